"""Brute-force cross-checks of the closed forms the algorithm relies on.

Each suite returns a :class:`SuiteResult`; the ``verify`` CLI verb and the
acceptance tests run the same code.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .decoder import (FiniteHypothesisClass, IdentifiabilityConstants, TupleDataset, all_binary_decoders, decode,
                      derive_constants, env_constants, true_posterior_table)
from .env import IglEnv, LayeredMdp
from .online import logloss_bound, logloss_regret, sequential_product_identity


@dataclass
class SuiteResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.4g} (limit {self.threshold:.4g})"


# ---------------------------------------------------------------------------
# posterior


def sample_tuples(env: IglEnv, s: int, n: int, rng: np.random.Generator) -> TupleDataset:
    """``n`` draws of (x, a, y) at terminal state ``s`` with x ~ D and uniform actions."""
    if n < 1:
        raise ValueError("need at least one sample")
    if s not in env.mdp.terminal_states:
        raise ValueError(f"state {s} is not terminal")
    X, K, Y = env.n_contexts, env.n_actions, env.feedback.n_symbols
    x = np.minimum((rng.random(n)[:, None] >= env.contexts.cum_probs).sum(-1), X - 1)
    a = rng.integers(K, size=n)
    r = (rng.random(n) < env.reward[x, s, a]).astype(int)
    cdf = np.cumsum(env.feedback.channel[x, s, r], axis=-1)
    y = np.minimum((rng.random(n)[:, None] >= cdf).sum(-1), Y - 1)
    return TupleDataset(int(s), x, a, y)


def monte_carlo_posterior(env: IglEnv, s: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Empirical P[a | x, y] at terminal state ``s`` under uniform actions, shape (X, Y, K).

    Rows for (x, y) pairs never observed are NaN.
    """
    data = sample_tuples(env, s, samples, rng)
    counts = data.counts(env.n_contexts, env.feedback.n_symbols, env.n_actions)
    tot = counts.sum(-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        return np.where(tot > 0, counts / np.where(tot > 0, tot, 1), np.nan)


def posterior_suite(env: IglEnv, samples: int, rng: np.random.Generator, tol: float = 0.01) -> SuiteResult:
    worst, per = 0.0, {}
    for s in env.mdp.terminal_states:
        emp = monte_carlo_posterior(env, int(s), samples, rng)
        exact = true_posterior_table(env, int(s))
        ok = ~np.isnan(exact).any(-1) & ~np.isnan(emp).any(-1)
        d = float(np.abs(emp[ok] - exact[ok]).max()) if ok.any() else 0.0
        per[env.mdp.state_labels[s] if env.mdp.state_labels else int(s)] = d
        worst = max(worst, d)
    return SuiteResult("posterior Monte Carlo (L-inf)", worst <= tol, worst, tol, per)


def sparse_grid_class(env: IglEnv, s: int, peaks, offs) -> FiniteHypothesisClass:
    """Reward candidates free in every context at terminal state ``s``.

    In each context the row at ``s`` takes a value from ``peaks`` at the true
    best action and one from ``offs`` at the others, independently across
    contexts; all other rows equal ``f*``.  Decoders are every binary map.
    Unlike a single interpolation level this family has two parameters per
    context, so a small sample rarely lands on the truth by luck.
    """
    f_star = env.reward
    best = np.argmax(f_star[:, s], -1)
    per_ctx = list(itertools.product(peaks, offs))
    rewards = []
    for combo in itertools.product(per_ctx, repeat=env.n_contexts):
        f = f_star.copy()
        for x, (peak, off) in enumerate(combo):
            f[x, s] = off
            f[x, s, best[x]] = peak
        rewards.append(f)
    X, Y = env.n_contexts, env.feedback.n_symbols
    decoders = {int(t): all_binary_decoders(X, Y) for t in env.mdp.terminal_states}
    return FiniteHypothesisClass(np.stack(rewards), decoders)


# ---------------------------------------------------------------------------
# Dirichlet identity


def dirichlet_suite(n_sequences: int, rng: np.random.Generator, max_outcomes: int = 5,
                    max_len: int = 50, tol: float = 1e-12) -> SuiteResult:
    worst = 0.0
    for _ in range(n_sequences):
        k = int(rng.integers(1, max_outcomes + 1))
        B = int(rng.integers(0, max_len + 1))
        seq = rng.integers(k, size=B)
        seq_prod, closed = sequential_product_identity(seq, k)
        worst = max(worst, abs(seq_prod - closed) / closed)
    return SuiteResult("Dirichlet product identity (rel. error)", worst <= tol, worst, tol,
                       {"sequences": n_sequences})


# ---------------------------------------------------------------------------
# Lipschitz decoder


def figure_constants(kappa: float | None = None) -> IdentifiabilityConstants:
    """The K=3, M=1, theta=0.6, c=0.2 illustration; ``kappa`` overrides the derived value."""
    base = derive_constants(3, 1.0, 0.2, 0.6)
    if kappa is None:
        return base
    return replace(base, kappa=kappa, L=4.0 / kappa + 1.0 / base.xi)


def _simplex_pairs(K: int, n: int, consts: IdentifiabilityConstants, rng: np.random.Generator):
    """Pairs mixing far-apart draws, local perturbations and near-uniform points."""
    v = rng.dirichlet(np.ones(K), size=n)
    kind = rng.integers(3, size=n)
    near = 1.0 / K + consts.kappa * rng.uniform(-1.2, 1.2, size=(n, K))
    near = np.clip(near, 0, None)
    near /= near.sum(-1, keepdims=True)
    v = np.where((kind == 2)[:, None], near, v)
    scale = 10.0 ** rng.uniform(-5, -1, size=(n, 1))
    w = np.clip(v + scale * rng.normal(size=(n, K)), 0, None)
    w /= w.sum(-1, keepdims=True)
    w = np.where((kind == 0)[:, None], rng.dirichlet(np.ones(K), size=n), w)
    return v, w


def lipschitz_suite(consts: IdentifiabilityConstants, n_pairs: int, rng: np.random.Generator,
                    label: str = "") -> SuiteResult:
    """Largest ``|J(v,a) - J(w,a)| - L ||v - w||_inf`` over random pairs and every action."""
    K = consts.K
    v, w = _simplex_pairs(K, n_pairs, consts, rng)
    dist = np.abs(v - w).max(-1)
    worst = -np.inf
    for a in range(K):
        gap = np.abs(decode(v, a, consts) - decode(w, a, consts)) - consts.L * dist
        worst = max(worst, float(gap.max()))
    name = "decoder Lipschitz excess" + (f" [{label}]" if label else "")
    return SuiteResult(name, worst <= 1e-9, worst, 1e-9, {"L": consts.L, "pairs": n_pairs})


# ---------------------------------------------------------------------------
# log-loss regret


def random_layered_mdp(rng: np.random.Generator, max_states: int = 8, max_actions: int = 4,
                       max_horizon: int = 4) -> LayeredMdp:
    """Random layered kernel with one start state and Dirichlet rows over the next layer."""
    H = int(rng.integers(2, max_horizon + 1))
    S = int(rng.integers(H, max_states + 1))
    K = int(rng.integers(1, max_actions + 1))
    sizes = [1] + [1] * (H - 1)
    for _ in range(S - H):
        sizes[int(rng.integers(1, H))] += 1
    layers, i = [], 0
    for n in sizes:
        layers.append(list(range(i, i + n)))
        i += n
    P = np.zeros((S, K, S))
    for h in range(H - 1):
        for s in layers[h]:
            P[s][:, layers[h + 1]] = rng.dirichlet(np.full(len(layers[h + 1]), 0.5), size=K)
    P /= np.where(P.sum(-1, keepdims=True) > 0, P.sum(-1, keepdims=True), 1)
    return LayeredMdp(layers=tuple(layers), n_actions=K, transition=P)


def simulate_uniform(mdp: LayeredMdp, T: int, rng: np.random.Generator):
    """(T, H) state and action arrays under uniformly random actions."""
    H, K = mdp.horizon, mdp.n_actions
    states = np.empty((T, H), dtype=np.int64)
    actions = rng.integers(K, size=(T, H))
    s = np.full(T, mdp.start_state)
    cum = mdp.cum_transition
    for h in range(H):
        states[:, h] = s
        if h < H - 1:
            s = np.minimum((rng.random(T)[:, None] >= cum[s, actions[:, h]]).sum(-1), mdp.n_states - 1)
    return states, actions


def logloss_suite(n_mdps: int, T: int, rng: np.random.Generator) -> SuiteResult:
    worst, rows = -np.inf, []
    for _ in range(n_mdps):
        mdp = random_layered_mdp(rng)
        states, actions = simulate_uniform(mdp, T, rng)
        reg = logloss_regret(states, actions, mdp.transition, mdp.layers)
        bound = logloss_bound(mdp.n_states, mdp.n_actions, T, mdp.horizon)
        rows.append((mdp.n_states, mdp.n_actions, mdp.horizon, reg, bound))
        worst = max(worst, reg / bound)
    return SuiteResult("log-loss regret / bound", worst <= 1.0, worst, 1.0, {"runs": rows})


# ---------------------------------------------------------------------------


def run_all(env: IglEnv, rng: np.random.Generator, quick: bool = False) -> list:
    """Every suite at acceptance scale, or a reduced scale with ``quick``."""
    scale = 10 if quick else 1
    return [
        dirichlet_suite(10**4 // scale, rng),
        lipschitz_suite(env_constants(env), 10**5 // scale, rng, env.name),
        lipschitz_suite(figure_constants(), 10**5 // scale, rng, "K=3 illustration"),
        lipschitz_suite(figure_constants(0.2), 10**5 // scale, rng, "K=3 illustration, kappa=0.2"),
        posterior_suite(env, 10**6 // scale, rng, tol=0.01 if not quick else 0.03),
        logloss_suite(20 // (2 if quick else 1), 10**4 // scale, rng),
    ]
