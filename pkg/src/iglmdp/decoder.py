"""Inverse-kinematics posterior learning and the Lipschitz reward decoder.

A posterior hypothesis at terminal state ``s`` is induced by a reward
candidate ``f`` and a binary feedback decoder ``phi``::

    h_a(x, y) = f(x,s,a) phi(x,y) / sum_a' f(x,s,a')
              + (1 - f(x,s,a)) (1 - phi(x,y)) / (K - sum_a' f(x,s,a'))

It is the law of a uniformly drawn action given the feedback, and the
decoder ``J`` turns such a vector into a reward estimate that never
over-estimates on heterogeneous states.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .env import IglEnv
from .errors import CollectionBudgetError, IdentifiabilityError, PosteriorDomainError

RAMP_SNAP = 1e-12


@dataclass(frozen=True)
class IdentifiabilityConstants:
    K: int
    M: float
    c: float
    theta: float
    kappa: float
    xi: float
    L: float

    @property
    def sigma(self) -> float:
        return self.theta * (self.K - self.M) / self.M

    @property
    def threshold(self) -> float:
        """Posterior level theta/M above which an action is decoded as rewarding."""
        return self.theta / self.M


def derive_constants(K, M, c, theta) -> IdentifiabilityConstants:
    if not 0 < M < K / 2:
        raise IdentifiabilityError(f"M={M} must lie in (0, K/2)")
    if not 0 < theta < 1:
        raise IdentifiabilityError(f"theta={theta} must lie in (0, 1)")
    sigma = theta * (K - M) / M
    kappa = (K * theta - M) / (K * (K - M))
    xi = 0.5 * (theta / M - 1.0 / (K - M))
    if sigma <= 1 or kappa <= 0 or xi <= 0:
        raise IdentifiabilityError(f"identifiability violated: sigma={sigma:.4g}, kappa={kappa:.4g}")
    return IdentifiabilityConstants(K, M, c, theta, kappa, xi, 4.0 / kappa + 1.0 / xi)


def env_constants(env: IglEnv) -> IdentifiabilityConstants:
    return derive_constants(env.n_actions, env.M, env.c, env.theta)


def ramp(alpha, beta, lam):
    """Piecewise-linear step: 0 below ``beta``, 1 from ``beta + lam`` on.

    Inputs within 1e-12 of the upper knee are snapped to 1 so that values
    computed as ``theta/M`` through different float paths land on the plateau.
    """
    if lam <= 0:
        raise ValueError("ramp width must be positive")
    alpha = np.asarray(alpha, dtype=float)
    out = np.clip((alpha - beta) / lam, 0.0, 1.0)
    out = np.where(alpha >= beta + lam - RAMP_SNAP, 1.0, out)
    return float(out) if out.ndim == 0 else out


def distance_from_uniform(v):
    v = np.asarray(v, dtype=float)
    return np.abs(v - 1.0 / v.shape[-1]).max(-1)


def decode(v, a, consts: IdentifiabilityConstants):
    """Lipschitz reward surrogate ``J(v, a)`` for posterior vector(s) ``v``.

    Constant ``c`` near uniform, the ramp on ``v_a`` far from uniform, and a
    linear bridge for ``kappa/2 < dist < kappa``.  Broadcasts over leading axes.
    """
    v = np.asarray(v, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=int), v.shape[:-1])
    dist = distance_from_uniform(v)
    va = np.take_along_axis(v, a[..., None], -1)[..., 0]
    g = ramp(va, consts.threshold - consts.xi, consts.xi)
    k, c = consts.kappa, consts.c
    bridge = (2 * c * (k - dist) + (2 * dist - k) * g) / k
    out = np.where(dist <= k / 2, c, np.where(dist < k, bridge, g))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# posteriors


def posterior_rows(f, phi):
    """Posterior vectors for reward rows ``f`` (..., K) and decoder bits ``phi`` (...).

    Rows conditioned on an impossible event (phi=1 with zero total reward,
    or phi=0 with total reward K) come back as NaN.
    """
    f = np.asarray(f, dtype=float)
    phi = np.asarray(phi, dtype=float)[..., None]
    K = f.shape[-1]
    Q = f.sum(-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(phi > 0, f * phi / Q, 0.0)
        neg = np.where(phi < 1, (1 - f) * (1 - phi) / (K - Q), 0.0)
    h = pos + neg
    undefined = ((phi > 0) & (Q <= 0)) | ((phi < 1) & (Q >= K))
    return np.where(undefined, np.nan, h)


def true_posterior(env: IglEnv, x: int, y: int, s: int) -> np.ndarray:
    """Law of a uniform action at ``s`` given context ``x`` and feedback ``y``."""
    h = posterior_rows(env.reward[x, s], env.feedback.decoder[x, y, s])
    if np.isnan(h).any():
        raise PosteriorDomainError(f"posterior at context {x}, feedback {y}, state {s} "
                                   "conditions on a zero-probability reward")
    return h


def true_posterior_table(env: IglEnv, s: int) -> np.ndarray:
    """h*(x, y, s) for all contexts and symbols, shape (X, Y, K); NaN where undefined."""
    f = env.reward[:, s][:, None, :]
    phi = env.feedback.decoder[:, :, s]
    return posterior_rows(np.broadcast_to(f, phi.shape + f.shape[-1:]), phi)


def feedback_law(env: IglEnv, s: int) -> np.ndarray:
    """P(x, y) at ``s`` under x ~ D, a ~ uniform; shape (X, Y)."""
    f = env.reward[:, s]                                   # (X, K)
    pr1 = f.mean(-1)                                       # P(r=1 | x, s)
    C = env.feedback.channel[:, s]                         # (X, 2, Y)
    return env.contexts.probs[:, None] * ((1 - pr1)[:, None] * C[:, 0] + pr1[:, None] * C[:, 1])


def lower_reward(env: IglEnv, consts: IdentifiabilityConstants | None = None) -> np.ndarray:
    """Expected decoded reward under the true posterior, shape (X, S, K).

    Equals ``f*`` at each state's best action and never exceeds it elsewhere.
    """
    consts = consts or env_constants(env)
    X, S, K = env.reward.shape
    out = np.zeros((X, S, K))
    C = env.feedback.channel
    for s in env.mdp.terminal_states:
        h = true_posterior_table(env, s)
        for x in range(X):
            for a in range(K):
                fa = env.reward[x, s, a]
                py = (1 - fa) * C[x, s, 0] + fa * C[x, s, 1]
                for y in np.flatnonzero(py > 0):
                    out[x, s, a] += py[y] * decode(h[x, y], a, consts)
    return out


# ---------------------------------------------------------------------------
# hypothesis classes


@dataclass(frozen=True, eq=False)
class PosteriorHypothesis:
    state: int
    f_index: int
    phi_index: int
    table: np.ndarray  # (X, Y, K), NaN rows where the hypothesis is undefined

    def __call__(self, x: int, y: int) -> np.ndarray:
        row = self.table[x, y]
        if np.isnan(row).any():
            # no information: decodes to the homogeneous constant
            return np.full(row.shape, 1.0 / row.shape[-1])
        return row

    def filled(self) -> np.ndarray:
        t = self.table.copy()
        bad = np.isnan(t).any(-1)
        t[bad] = 1.0 / t.shape[-1]
        return t


@dataclass(frozen=True, eq=False)
class FiniteHypothesisClass:
    """Reward candidates (F, X, S, K) and per-state binary decoders (D_s, X, Y)."""

    rewards: np.ndarray
    decoders: dict

    def size(self, s: int) -> int:
        return len(self.rewards) * len(self.decoders[s])

    def tables(self, s: int) -> np.ndarray:
        """Every induced posterior at ``s``, shape (F * D_s, X, Y, K); index = f * D_s + d."""
        f = self.rewards[:, :, s]                          # (F, X, K)
        phi = self.decoders[s]                             # (D, X, Y)
        F, X, K = f.shape
        D, _, Y = phi.shape
        fb = np.broadcast_to(f[:, None, :, None, :], (F, D, X, Y, K))
        pb = np.broadcast_to(phi[None], (F, D, X, Y))
        return posterior_rows(fb, pb).reshape(F * D, X, Y, K)

    def hypothesis(self, s: int, index: int) -> PosteriorHypothesis:
        D = len(self.decoders[s])
        return PosteriorHypothesis(int(s), index // D, index % D, self.tables(s)[index])


def all_binary_decoders(X: int, Y: int) -> np.ndarray:
    bits = np.array(list(itertools.product((0, 1), repeat=X * Y)), dtype=int)
    return bits.reshape(-1, X, Y)


def default_hypothesis_class(env: IglEnv, consts: IdentifiabilityConstants | None = None,
                             levels=(0.0, 0.5, 1.0, 1.5), max_decoders: int = 256) -> FiniteHypothesisClass:
    """Finite class holding the truth plus structured distractors.

    Reward candidates interpolate between the lower-bound reward ``f_`` and
    ``f*``: ``f_ + lam (f* - f_)`` for each ``lam`` in ``levels`` (clipped to
    [0, 1]), each under all K cyclic action shifts.  Level 0 is ``f_`` and
    level 1 is ``f*``, so both realizability conditions hold.  Decoders are
    every binary map on (context, symbol) when there are at most
    ``max_decoders`` of them, otherwise the true decoder with per-context flips.
    """
    consts = consts or env_constants(env)
    f_star = env.reward
    f_low = lower_reward(env, consts)
    base = [np.clip(f_low + lam * (f_star - f_low), 0.0, 1.0) for lam in levels]
    rewards = np.stack([np.roll(g, k, axis=-1) for g in base for k in range(env.n_actions)])
    X, Y = env.n_contexts, env.feedback.n_symbols
    decoders = {}
    for s in env.mdp.terminal_states:
        if 2 ** (X * Y) <= max_decoders:
            decoders[int(s)] = all_binary_decoders(X, Y)
        else:
            true = env.feedback.decoder[:, :, s]
            cands = [true]
            for x in range(X):
                flipped = true.copy()
                flipped[x] = 1 - flipped[x]
                cands.append(flipped)
            cands.append(1 - true)
            decoders[int(s)] = np.stack(cands)
    return FiniteHypothesisClass(rewards, decoders)


def true_hypothesis_index(cls: FiniteHypothesisClass, env: IglEnv, s: int) -> int | None:
    """Index of the first hypothesis equal to h* wherever feedback has positive probability."""
    support = feedback_law(env, s) > 0
    target = true_posterior_table(env, s)
    tables = cls.tables(s)
    for i, t in enumerate(tables):
        if np.allclose(t[support], target[support], atol=1e-12, rtol=0):
            return i
    return None


def matches_truth(hyp: PosteriorHypothesis, env: IglEnv) -> bool:
    """Whether ``hyp`` equals h* wherever the feedback has positive probability."""
    support = feedback_law(env, hyp.state) > 0
    target = true_posterior_table(env, hyp.state)
    return bool(np.allclose(hyp.table[support], target[support], atol=1e-12, rtol=0))


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True, eq=False)
class TupleDataset:
    state: int
    context: np.ndarray
    action: np.ndarray
    feedback: np.ndarray
    episodes: int = 0

    def __len__(self) -> int:
        return len(self.context)

    def counts(self, X: int, Y: int, K: int) -> np.ndarray:
        n = np.zeros((X, Y, K))
        np.add.at(n, (self.context, self.feedback, self.action), 1)
        return n

    def to_text(self, path) -> None:
        rows = np.column_stack([self.context, np.full(len(self), self.state), self.action, self.feedback])
        np.savetxt(path, rows, fmt="%d", header="context state action feedback")

    @classmethod
    def from_text(cls, path) -> "TupleDataset":
        rows = np.loadtxt(path, dtype=int, ndmin=2)
        if rows.size == 0:
            raise ValueError(f"{path}: empty dataset")
        states = np.unique(rows[:, 1])
        if len(states) != 1:
            raise ValueError(f"{path}: records mix terminal states {states.tolist()}")
        return cls(int(states[0]), rows[:, 0], rows[:, 2], rows[:, 3])


def collection_cap(n0: int, eps: float, n_states: int, delta: float) -> int:
    return int(math.ceil(20.0 / eps * (n0 + math.log(n_states / delta))))


def collect_tuples(reachable, homings, env: IglEnv, n0: int, rng: np.random.Generator,
                   eps: float = 0.05, delta: float = 0.05, chunk: int = 4096) -> dict:
    """Run each reachable state's homing mixture until ``n0`` episodes end there.

    Episodes ending elsewhere are discarded.  ``homings`` maps state -> HomingPolicy.
    Raises :class:`CollectionBudgetError` past ``(20/eps)(n0 + log(S/delta))``
    episodes for one state.
    """
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    cap = collection_cap(n0, eps, env.n_states, delta)
    out = {}
    for s in sorted(reachable.states):
        hp = homings[s]
        xs, acts, ys = [], [], []
        have = used = 0
        while have < n0:
            size = max(chunk, 2 * (n0 - have))
            sim = hp.sample(env, size, rng)
            hit = np.flatnonzero(sim["states"][:, -1] == s)[: n0 - have]
            if have + len(hit) >= n0:
                used += int(hit[-1]) + 1
            else:
                used += size
            xs.append(sim["context"][hit])
            acts.append(sim["actions"][hit, -1])
            ys.append(sim["feedback"][hit])
            have += len(hit)
            if used > cap:
                raise CollectionBudgetError(
                    f"state {s}: {have}/{n0} tuples after {used} episodes (cap {cap}); "
                    "the reachable set likely contains an unreachable state")
        out[s] = TupleDataset(s, np.concatenate(xs), np.concatenate(acts), np.concatenate(ys), used)
    return out


# ---------------------------------------------------------------------------
# fitting


def empirical_risks(counts: np.ndarray, tables: np.ndarray) -> np.ndarray:
    """Summed squared loss ``sum_i ||h(x_i, y_i) - e_{a_i}||^2`` for each table.

    ``counts`` is (X, Y, K).  A hypothesis undefined on an observed (x, y)
    gets infinite risk.
    """
    n_xy = counts.sum(-1)
    seen = n_xy > 0
    sq = np.einsum("hxyk,hxyk->hxy", tables, tables)
    cross = np.einsum("xyk,hxyk->hxy", counts, tables)
    per = n_xy * sq - 2 * cross + n_xy
    per = np.where(seen, per, 0.0)
    risk = per.sum((1, 2))
    return np.where(np.isnan(risk), np.inf, risk)


def erm_fit(dataset: TupleDataset, cls: FiniteHypothesisClass, X: int, Y: int, K: int) -> PosteriorHypothesis:
    """Empirical risk minimizer over the induced class; lowest index wins ties."""
    tables = cls.tables(dataset.state)
    if len(tables) == 0:
        raise ValueError("empty hypothesis class")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    risks = empirical_risks(dataset.counts(X, Y, K), tables)
    best = int(np.argmin(risks))
    return cls.hypothesis(dataset.state, best)


def fit_decoder(datasets: dict, cls: FiniteHypothesisClass, env: IglEnv) -> dict:
    X, Y, K = env.n_contexts, env.feedback.n_symbols, env.n_actions
    return {s: erm_fit(d, cls, X, Y, K) for s, d in datasets.items()}


def posterior_risk(hyp: PosteriorHypothesis, env: IglEnv) -> float:
    """Exact ``E ||h_hat(x,y) - h*(x,y,s)||^2`` under x ~ D, uniform actions, y | x, s, a."""
    w = feedback_law(env, hyp.state)
    target = true_posterior_table(env, hyp.state)
    diff = hyp.filled() - np.nan_to_num(target)
    return float(np.sum(w * np.einsum("xyk,xyk->xy", diff, diff)))
