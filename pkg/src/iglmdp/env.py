"""Layered contextual episodic MDP with a latent terminal reward.

States, actions, contexts and feedback symbols are dense integer indices;
string labels live in side tables.  All kernels are dense numpy arrays.

Array conventions used throughout the package:

* ``transition[s, a, s']``  -- shape (S, K, S), rows of terminal states are zero
* ``policy[x, s, a]``       -- shape (X, S, K)
* ``reward[x, s, a]``       -- shape (X, S, K), only terminal rows are read
* ``channel[x, s, r, y]``   -- shape (X, S, 2, Y), feedback law given (x, s_H, r)
"""

from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, IdentifiabilityError

ROW_TOL = 1e-12
HOMOGENEOUS_TOL = 1e-9


def rng_stream(seed: int, *names: str) -> np.random.Generator:
    """Independent generator for the stream ``names`` under a master ``seed``.

    Streams with different names are statistically independent and each is
    reproducible on its own, so phases can be reordered without perturbing
    one another.
    """
    key = tuple(zlib.crc32(n.encode()) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def _check_rows(arr, what, tol=ROW_TOL):
    if np.any(arr < 0):
        raise ConfigError(f"{what} has negative entries")
    bad = np.abs(arr.sum(-1) - 1.0) > tol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ConfigError(f"{what} row {idx} does not sum to 1")


@dataclass(frozen=True, eq=False)
class LayeredMdp:
    layers: tuple
    n_actions: int
    transition: np.ndarray
    state_labels: tuple = ()

    def __post_init__(self):
        layers = tuple(np.asarray(l, dtype=int) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        P = np.asarray(self.transition, dtype=float)
        object.__setattr__(self, "transition", P)
        if not self.state_labels:
            object.__setattr__(self, "state_labels", tuple(f"s{i}" for i in range(self.n_states)))
        if len(layers) < 1 or self.n_actions < 1:
            raise ConfigError("need at least one layer and one action")
        if len(layers[0]) != 1:
            raise ConfigError("the start layer must be a singleton")
        flat = np.concatenate(layers)
        if sorted(flat.tolist()) != list(range(len(flat))):
            raise ConfigError("layers must partition the state indices 0..S-1")
        S, K = self.n_states, self.n_actions
        if P.shape != (S, K, S):
            raise ConfigError(f"transition must have shape {(S, K, S)}, got {P.shape}")
        if np.any(P < 0):
            raise ConfigError("transition has negative entries")
        for h in range(self.horizon):
            for s in layers[h]:
                row = P[s]
                if h == self.horizon - 1:
                    if np.any(row != 0):
                        raise ConfigError("terminal states cannot have outgoing transitions")
                    continue
                off = np.ones(S, dtype=bool)
                off[layers[h + 1]] = False
                if np.any(row[:, off] != 0):
                    raise ConfigError(f"state {s} transitions outside the next layer")
                _check_rows(row, f"transition of state {s}")
        P.setflags(write=False)

    @property
    def horizon(self) -> int:
        return len(self.layers)

    @property
    def n_states(self) -> int:
        return sum(len(l) for l in self.layers)

    @property
    def start_state(self) -> int:
        return int(self.layers[0][0])

    @property
    def terminal_states(self) -> np.ndarray:
        return self.layers[-1]

    @cached_property
    def layer_of(self) -> np.ndarray:
        out = np.empty(self.n_states, dtype=int)
        for h, l in enumerate(self.layers):
            out[l] = h
        return out

    @cached_property
    def cum_transition(self) -> np.ndarray:
        return np.cumsum(self.transition, axis=-1)


@dataclass(frozen=True, eq=False)
class ContextModel:
    labels: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "labels", tuple(str(l) for l in self.labels))
        if p.shape != (len(self.labels),) or len(self.labels) == 0:
            raise ConfigError("context distribution must match the context labels")
        _check_rows(p, "context distribution", tol=1e-9)

    @property
    def n_contexts(self) -> int:
        return len(self.labels)

    @cached_property
    def cum_probs(self):
        return np.cumsum(self.probs)


@dataclass(frozen=True, eq=False)
class FeedbackModel:
    """Latent reward ``f*`` and a feedback channel that sees only (x, s_H, r).

    The decoder ``phi*`` is derived from the channel: a symbol decodes to the
    reward value whose channel row can emit it.  A symbol emitted by both
    reward values breaks decodability and is rejected.
    """

    reward: np.ndarray
    channel: np.ndarray
    symbols: tuple = ("0", "1")
    decoder: np.ndarray = field(init=False)

    def __post_init__(self):
        f = np.asarray(self.reward, dtype=float)
        C = np.asarray(self.channel, dtype=float)
        object.__setattr__(self, "reward", f)
        object.__setattr__(self, "channel", C)
        object.__setattr__(self, "symbols", tuple(str(y) for y in self.symbols))
        if np.any(f < 0) or np.any(f > 1):
            raise ConfigError("reward probabilities must lie in [0, 1]")
        if C.ndim != 4 or C.shape[:2] != f.shape[:2] or C.shape[2] != 2 or C.shape[3] != len(self.symbols):
            raise ConfigError("channel must have shape (X, S, 2, Y)")
        X, S, _ = f.shape
        # phi*[x, y, s]
        phi = np.zeros((X, len(self.symbols), S), dtype=int)
        for x in range(X):
            for s in range(S):
                can1 = f[x, s].max() > 0
                can0 = f[x, s].min() < 1
                sup1 = C[x, s, 1] > 0
                sup0 = C[x, s, 0] > 0
                if can1 and can0 and np.any(sup1 & sup0):
                    raise ConfigError(f"feedback for context {x}, state {s} cannot be decoded: "
                                      "some symbol is emitted under both reward values")
                phi[x, :, s] = np.where(sup1 & can1, 1, 0)
        object.__setattr__(self, "decoder", phi)

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)


@dataclass(frozen=True, eq=False)
class IglEnv:
    """Dynamics, contexts, feedback and the known identifiability constants."""

    mdp: LayeredMdp
    contexts: ContextModel
    feedback: FeedbackModel
    M: float
    theta: float
    c: float
    name: str = "custom"
    state_types: np.ndarray = field(init=False)

    def __post_init__(self):
        X, S, K = self.n_contexts, self.mdp.n_states, self.mdp.n_actions
        if self.feedback.reward.shape != (X, S, K):
            raise ConfigError(f"reward table must have shape {(X, S, K)}")
        if self.feedback.channel.shape[:2] != (X, S):
            raise ConfigError("channel does not match contexts/states")
        for x in range(X):
            for s in self.mdp.terminal_states:
                _check_rows(self.feedback.channel[x, s], f"channel of context {x}, state {s}", tol=1e-9)
        object.__setattr__(self, "state_types", classify_states(
            self.feedback.reward[:, self.mdp.terminal_states], K, self.M, self.theta, self.c))

    @property
    def n_contexts(self) -> int:
        return self.contexts.n_contexts

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    @property
    def reward(self) -> np.ndarray:
        return self.feedback.reward

    def state_index(self, label: str) -> int:
        return self.mdp.state_labels.index(label)

    def uniform_policy(self) -> np.ndarray:
        return np.full((self.n_contexts, self.n_states, self.n_actions), 1.0 / self.n_actions)


def classify_states(terminal_reward, K, M, theta, c):
    """Label each (context, terminal state) heterogeneous (1) or homogeneous (0).

    ``terminal_reward`` has shape (X, S_H, K).  Raises when a pair satisfies
    neither branch, or when the constants themselves are out of range.
    """
    if not 0 < M < K / 2:
        raise IdentifiabilityError(f"M={M} must lie in (0, K/2) with K={K}")
    if not 0 < theta < 1:
        raise IdentifiabilityError(f"theta={theta} must lie in (0, 1)")
    if not 0 <= c <= 1:
        raise IdentifiabilityError(f"c={c} must lie in [0, 1]")
    sigma = theta * (K - M) / M
    if sigma <= 1:
        raise IdentifiabilityError(f"separation sigma={sigma:.4f} must exceed 1")
    f = np.asarray(terminal_reward, dtype=float)
    hetero = (f.sum(-1) <= M + HOMOGENEOUS_TOL) & (f.max(-1) >= theta - HOMOGENEOUS_TOL)
    homo = np.all(np.abs(f - c) <= HOMOGENEOUS_TOL, axis=-1)
    neither = ~(hetero | homo)
    if np.any(neither):
        x, s = (int(i) for i in np.argwhere(neither)[0])
        raise IdentifiabilityError(f"context {x}, terminal state #{s} is neither heterogeneous "
                                   f"nor homogeneous: f={f[x, s]}")
    return hetero.astype(int)


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class Trajectory:
    context: int
    states: tuple
    actions: tuple
    reward: int
    feedback: int

    @property
    def terminal_state(self) -> int:
        return self.states[-1]


def check_policy(env: IglEnv, policy) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    shape = (env.n_contexts, env.n_states, env.n_actions)
    if pi.shape != shape:
        raise ValueError(f"policy must have shape {shape}, got {pi.shape}")
    if np.any(pi < 0) or np.any(np.abs(pi.sum(-1) - 1.0) > 1e-9):
        raise ValueError("policy rows must be probability vectors")
    return pi


def _draw(cdf, u):
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def sample_episode(env: IglEnv, policy, rng: np.random.Generator, context=None, check=True) -> Trajectory:
    """Roll out one episode: context, H state/action pairs, latent reward, feedback."""
    pi = check_policy(env, policy) if check else policy
    mdp = env.mdp
    x = _draw(env.contexts.cum_probs, rng.random()) if context is None else int(context)
    u = rng.random(2 * mdp.horizon + 1)
    s = mdp.start_state
    states, actions = [], []
    for h in range(mdp.horizon):
        a = _draw(np.cumsum(pi[x, s]), u[2 * h])
        states.append(s)
        actions.append(a)
        if h < mdp.horizon - 1:
            s = _draw(mdp.cum_transition[s, a], u[2 * h + 1])
    r = int(u[-1] < env.reward[x, s, a])
    y = _draw(np.cumsum(env.feedback.channel[x, s, r]), rng.random())
    return Trajectory(x, tuple(states), tuple(actions), r, y)


def _draw_rows(cdf, u):
    idx = (u[:, None] >= cdf).sum(-1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def simulate_batch(env: IglEnv, policy, n: int, rng: np.random.Generator, member=None, contexts=None):
    """Vectorized rollout of ``n`` independent episodes.

    ``policy`` is (X, S, K), or (M, X, S, K) together with an integer array
    ``member`` of length ``n`` choosing the mixture component per episode.
    Returns a dict of arrays: context, states (n, H), actions (n, H), reward, feedback.
    """
    mdp = env.mdp
    pi = np.asarray(policy, dtype=float)
    if pi.ndim == 3:
        pi = pi[None]
        member = np.zeros(n, dtype=int)
    H = mdp.horizon
    x = _draw_rows(np.broadcast_to(env.contexts.cum_probs, (n, env.n_contexts)), rng.random(n)) \
        if contexts is None else np.asarray(contexts, dtype=int)
    states = np.empty((n, H), dtype=int)
    actions = np.empty((n, H), dtype=int)
    s = np.full(n, mdp.start_state)
    for h in range(H):
        a = _draw_rows(np.cumsum(pi[member, x, s], axis=-1), rng.random(n))
        states[:, h] = s
        actions[:, h] = a
        if h < H - 1:
            s = _draw_rows(mdp.cum_transition[s, a], rng.random(n))
    r = (rng.random(n) < env.reward[x, s, a]).astype(int)
    y = _draw_rows(np.cumsum(env.feedback.channel[x, s, r], axis=-1), rng.random(n))
    return {"context": x, "states": states, "actions": actions, "reward": r, "feedback": y}


# ---------------------------------------------------------------------------
# exact evaluation


def terminal_distribution(env: IglEnv, policy) -> np.ndarray:
    """Per-context distribution over final-layer states, shape (X, S)."""
    pi = np.asarray(policy, dtype=float)
    P = env.mdp.transition
    d = np.zeros((env.n_contexts, env.n_states))
    d[:, env.mdp.start_state] = 1.0
    for _ in range(env.horizon - 1):
        d = np.einsum("xs,xsa,sat->xt", d, pi, P)
    return d


def exact_value(env: IglEnv, policy, reward=None) -> float:
    """Expected terminal reward of ``policy`` by forward dynamic programming."""
    pi = np.asarray(policy, dtype=float)
    f = env.reward if reward is None else np.asarray(reward, dtype=float)
    d = terminal_distribution(env, pi)
    per_context = np.einsum("xs,xsa,xsa->x", d, pi, f)
    return float(env.contexts.probs @ per_context)


def optimal_value(env: IglEnv, reward=None):
    """Return ``(V*, policy)`` by backward induction separately for each context."""
    f = env.reward if reward is None else np.asarray(reward, dtype=float)
    X, S, K = f.shape
    P = env.mdp.transition
    layers = env.mdp.layers
    V = np.zeros((X, S))
    pi = np.full((X, S, K), 1.0 / K)
    Q = f.copy()
    for h in range(env.horizon - 1, -1, -1):
        st = layers[h]
        if h < env.horizon - 1:
            Q[:, st] = np.einsum("sat,xt->xsa", P[st], V)
        best = Q[:, st].argmax(-1)
        V[:, st] = np.take_along_axis(Q[:, st], best[..., None], -1)[..., 0]
        pi[:, st] = np.eye(K)[best]
    vstar = float(env.contexts.probs @ V[:, env.mdp.start_state])
    return vstar, pi


def reach_reward(env: IglEnv, target: int) -> np.ndarray:
    """Dummy reward: 1 for every action at ``target``, 0 elsewhere."""
    f = np.zeros((env.n_contexts, env.n_states, env.n_actions))
    f[:, target] = 1.0
    return f


def max_reach_probability(env: IglEnv, target: int) -> float:
    return optimal_value(env, reach_reward(env, target))[0]


def enumerate_paths(env: IglEnv, policy, reward=None) -> float:
    """Brute-force value: sum over every context, action sequence and state path.

    Exponential in H; used only as an independent check of :func:`exact_value`.
    """
    pi = np.asarray(policy, dtype=float)
    f = env.reward if reward is None else np.asarray(reward, dtype=float)
    P, K, H = env.mdp.transition, env.n_actions, env.horizon
    total = 0.0
    for x, px in enumerate(env.contexts.probs):
        for acts in itertools.product(range(K), repeat=H):
            for nxt in itertools.product(*(env.mdp.layers[h] for h in range(1, H))):
                path = (env.mdp.start_state,) + nxt
                prob = px
                for h in range(H):
                    prob *= pi[x, path[h], acts[h]]
                    if h < H - 1:
                        prob *= P[path[h], acts[h], path[h + 1]]
                    if prob == 0:
                        break
                total += prob * f[x, path[-1], acts[-1]]
    return float(total)


# ---------------------------------------------------------------------------
# presets


def build_synthetic_env(p: float = 0.1, p_reward: float = 0.1) -> IglEnv:
    """Three-layer good/bad chain with context-dependent flipped feedback.

    States: s1g | s2g, s2b | s3g, s3b.  Action 0 keeps a good state good with
    probability 1-p; the other four actions flip that.  Bad states are
    absorbing.  At s3g action 0 pays with probability 1-p_reward and the
    others with p_reward; s3b never pays.  Feedback equals the reward under
    context "True" and its complement under "False".
    """
    if not (0 < p < 0.5 and 0 < p_reward < 0.5):
        raise ConfigError("p and p_reward must lie in (0, 0.5)")
    K = 5
    labels = ("s1g", "s2g", "s2b", "s3g", "s3b")
    S = len(labels)
    P = np.zeros((S, K, S))
    for good, nxt_good, nxt_bad in ((0, 1, 2), (1, 3, 4)):
        P[good, 0, nxt_good], P[good, 0, nxt_bad] = 1 - p, p
        P[good, 1:, nxt_good], P[good, 1:, nxt_bad] = p, 1 - p
    P[2, :, 4] = 1.0
    mdp = LayeredMdp(layers=([0], [1, 2], [3, 4]), n_actions=K, transition=P, state_labels=labels)
    contexts = ContextModel(labels=("True", "False"), probs=[0.7, 0.3])
    f = np.zeros((2, S, K))
    f[:, 3, 0] = 1 - p_reward
    f[:, 3, 1:] = p_reward
    channel = np.zeros((2, S, 2, 2))
    channel[0, :, 0, 0] = channel[0, :, 1, 1] = 1.0  # y = r
    channel[1, :, 0, 1] = channel[1, :, 1, 0] = 1.0  # y = 1 - r
    feedback = FeedbackModel(reward=f, channel=channel, symbols=("0", "1"))
    theta = 1 - p_reward
    M = 1 - p_reward + (K - 1) * p_reward
    return IglEnv(mdp=mdp, contexts=contexts, feedback=feedback, M=M, theta=theta, c=0.0,
                  name="synthetic-v1")


PRESETS = {"synthetic-v1": build_synthetic_env}
