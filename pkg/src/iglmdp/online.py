"""Online policy learning against decoded proxy rewards.

Each episode: predict the reward with a square-loss oracle, estimate the
kernel with add-one smoothing, plan by log-barrier occupancy optimization
for the observed context, play the induced policy, decode the feedback into
a proxy reward and, if the episode ended in a reliably reachable state,
feed it back to the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, NamedTuple

import numpy as np

from .decoder import IdentifiabilityConstants, decode
from .env import IglEnv, exact_value, optimal_value, sample_episode
from .errors import InconsistentDataError, NumericalError, PipelineError
from .occupancy import solve_occupancy


# ---------------------------------------------------------------------------
# transition estimation


@dataclass(eq=False)
class TransitionCounts:
    n_sa: np.ndarray    # (S, K)
    n_sas: np.ndarray   # (S, K, S)

    @classmethod
    def empty(cls, n_states: int, n_actions: int) -> "TransitionCounts":
        return cls(np.zeros((n_states, n_actions), dtype=np.int64),
                   np.zeros((n_states, n_actions, n_states), dtype=np.int64))

    def copy(self) -> "TransitionCounts":
        return TransitionCounts(self.n_sa.copy(), self.n_sas.copy())


def update_counts(counts: TransitionCounts, states, actions) -> TransitionCounts:
    """Add the H-1 transitions of one trajectory, in place; returns ``counts``."""
    s, a = np.asarray(states[:-1]), np.asarray(actions[:-1])
    nxt = np.asarray(states[1:])
    np.add.at(counts.n_sa, (s, a), 1)
    np.add.at(counts.n_sas, (s, a, nxt), 1)
    return counts


def estimate_transition(counts: TransitionCounts, layers) -> np.ndarray:
    """Add-one smoothed kernel over each layer's successors; terminal rows stay zero."""
    P = np.zeros(counts.n_sas.shape)
    for h in range(len(layers) - 1):
        st, nxt = layers[h], layers[h + 1]
        num = counts.n_sas[np.ix_(st, np.arange(P.shape[1]), nxt)] + 1.0
        den = counts.n_sa[st][..., None] + len(nxt)
        P[np.ix_(st, np.arange(P.shape[1]), nxt)] = num / den
    return P


def sequential_product_identity(seq, n_outcomes: int):
    """Sequential add-one predictive product of ``seq`` and its closed form.

    Returns ``(prod_b (n_b(z_b) + 1) / (b + S'), (S'-1)! prod_z n_z! / (S'+B-1)!)``
    with ``n_b`` the counts before step b.  The second value is computed in
    exact rational arithmetic.
    """
    n = np.zeros(n_outcomes, dtype=np.int64)
    prod = 1.0
    for b, z in enumerate(seq):
        prod *= (n[z] + 1) / (b + n_outcomes)
        n[z] += 1
    num = math.factorial(n_outcomes - 1)
    for c in n:
        num *= math.factorial(int(c))
    closed = Fraction(num, math.factorial(n_outcomes + len(seq) - 1))
    return prod, float(closed)


def logloss_bound(S: int, K: int, T: int, H: int) -> float:
    return S * S * K * math.log(T * H + S)


def logloss_regret(states, actions, transition, layers) -> float:
    """Cumulative log-loss regret of the smoothed estimator against the true kernel.

    ``states`` and ``actions`` are (T, H) arrays of trajectories in play order;
    each transition is scored with the estimator built from earlier data only.
    """
    states = np.asarray(states)
    actions = np.asarray(actions)
    S, K, _ = transition.shape
    layer_size = np.zeros(S, dtype=np.int64)
    for h in range(len(layers) - 1):
        layer_size[layers[h]] = len(layers[h + 1])
    n_sa = np.zeros((S, K), dtype=np.int64)
    n_sas = np.zeros((S, K, S), dtype=np.int64)
    total = 0.0
    for traj_s, traj_a in zip(states, actions):
        for h in range(len(traj_s) - 1):
            s, a, t = traj_s[h], traj_a[h], traj_s[h + 1]
            p_true = transition[s, a, t]
            if p_true <= 0:
                raise InconsistentDataError(f"transition {s} -{a}-> {t} has zero true probability")
            p_hat = (n_sas[s, a, t] + 1) / (n_sa[s, a] + layer_size[s])
            total += math.log(p_true) - math.log(p_hat)
            n_sa[s, a] += 1
            n_sas[s, a, t] += 1
    return total


# ---------------------------------------------------------------------------
# regression oracles


class AggregationOracle:
    """Exponentially weighted aggregation over a finite reward class.

    Predicts the weighted mean of the candidates (clipped to [0, 1]).  For
    squared loss on [0, 1] and ``eta <= 1/2`` the cumulative regret against
    the best candidate is at most ``ln|F| / eta``.
    """

    def __init__(self, candidates, eta: float = 0.5):
        cand = np.asarray(candidates, dtype=float)
        if cand.ndim != 4 or len(cand) == 0:
            raise ValueError("candidates must have shape (F, X, S, K) with F >= 1")
        if eta < 0:
            raise ValueError("eta must be non-negative")
        self.candidates = cand
        self.eta = float(eta)
        self.log_w = np.zeros(len(cand))

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.log_w - self.log_w.max())
        return w / w.sum()

    def predict_table(self) -> np.ndarray:
        return np.clip(np.tensordot(self.weights, self.candidates, axes=1), 0.0, 1.0)

    def predict(self, x: int, s: int, a: int) -> float:
        return float(np.clip(self.weights @ self.candidates[:, x, s, a], 0.0, 1.0))

    def update(self, x: int, s: int, a: int, target: float) -> None:
        _check_target(target)
        self.log_w = self.log_w - self.eta * (self.candidates[:, x, s, a] - target) ** 2

    def snapshot(self) -> bytes:
        return self.log_w.tobytes()


class OgdOracle:
    """Tabular online gradient descent on squared loss with projection to [0, 1]."""

    def __init__(self, shape, lr: float = 0.05, init: float = 0.5):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.theta = np.full(tuple(shape), float(init))
        self.lr = float(lr)

    def predict_table(self) -> np.ndarray:
        return np.clip(self.theta, 0.0, 1.0)

    def predict(self, x: int, s: int, a: int) -> float:
        return float(np.clip(self.theta[x, s, a], 0.0, 1.0))

    def update(self, x: int, s: int, a: int, target: float) -> None:
        _check_target(target)
        g = 2.0 * (self.theta[x, s, a] - target)
        self.theta[x, s, a] = min(1.0, max(0.0, self.theta[x, s, a] - self.lr * g))

    def snapshot(self) -> bytes:
        return self.theta.tobytes()


def _check_target(target):
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"regression target {target} lies outside [0, 1]")


# ---------------------------------------------------------------------------
# decoding


def proxy_reward(decoders: dict, consts: IdentifiabilityConstants, x, y, s, a, reachable):
    """Decoded reward ``J(h_hat(x, y, s), a)``, or None when ``s`` is filtered out."""
    if s not in reachable or s not in decoders:
        return None
    return float(decode(decoders[s](x, y), a, consts))


def decoded_tables(decoders: dict, consts: IdentifiabilityConstants, reachable) -> dict:
    """Precomputed ``J`` per reachable state, each (X, Y, K)."""
    out = {}
    for s, hyp in decoders.items():
        if s in reachable:
            t = hyp.filled()
            K = t.shape[-1]
            out[s] = decode(t[..., None, :].repeat(K, -2), np.arange(K), consts)
    return out


# ---------------------------------------------------------------------------
# online loop


def gamma_schedule(H: int, K: int) -> Callable[[int], float]:
    return lambda t: H * math.sqrt(K * t)


def constant_gamma(value: float) -> Callable[[int], float]:
    if value <= 0:
        raise ValueError("gamma must be positive")
    return lambda t: float(value)


METRIC_COLUMNS = ("episode", "context", "terminal_state", "true_reward", "decoded_reward",
                  "policy_value", "cumulative_regret")


@dataclass(eq=False)
class OnlineMetrics:
    """Per-episode records; ``decoded_reward`` is NaN on filtered episodes."""

    context: np.ndarray
    terminal_state: np.ndarray
    true_reward: np.ndarray
    decoded_reward: np.ndarray
    policy_value: np.ndarray
    v_star: float
    counts: TransitionCounts | None = None
    solves: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.context)

    @property
    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.v_star - self.policy_value)

    def truncated(self, n: int) -> "OnlineMetrics":
        return OnlineMetrics(self.context[:n], self.terminal_state[:n], self.true_reward[:n],
                             self.decoded_reward[:n], self.policy_value[:n], self.v_star,
                             self.counts, self.solves, self.extra)


def run_online_loop(env: IglEnv, reachable, decoders: dict, consts: IdentifiabilityConstants,
                    oracle, gamma: Callable[[int], float], T_online: int,
                    rng: np.random.Generator, warm_start: bool = True) -> OnlineMetrics:
    """Play ``T_online`` episodes and return their metrics.

    The occupancy problem is solved for every context each episode (reusing
    a solve when two contexts share the same predicted reward), so the
    recorded policy value is exact.  A solver failure raises
    :class:`PipelineError` carrying the metrics up to the failing episode.
    """
    if T_online < 1:
        raise ValueError("T_online must be at least 1")
    mdp = env.mdp
    X, S, K = env.n_contexts, env.n_states, env.n_actions
    terminal = mdp.terminal_states
    mask = np.zeros(S)
    mask[terminal] = 1.0
    v_star = optimal_value(env)[0]
    J = decoded_tables(decoders, consts, reachable)
    counts = TransitionCounts.empty(S, K)
    m = OnlineMetrics(np.zeros(T_online, dtype=np.int64), np.zeros(T_online, dtype=np.int64),
                      np.zeros(T_online, dtype=np.int64), np.full(T_online, np.nan),
                      np.zeros(T_online), v_star, counts)
    last = [None] * X
    ctx_cdf = env.contexts.cum_probs
    for t in range(1, T_online + 1):
        try:
            f_hat = oracle.predict_table()
            P_hat = estimate_transition(counts, mdp.layers)
            g = gamma(t)
            pi = np.empty((X, S, K))
            memo = {}
            for x in range(X):
                r = f_hat[x] * mask[:, None]
                key = r.tobytes()
                if key not in memo:
                    occ = solve_occupancy(P_hat, r, g, mdp.layers,
                                          init_policy=last[x] if warm_start else None)
                    memo[key] = occ.policy()
                    m.solves += 1
                pi[x] = memo[key]
                last[x] = pi[x]
        except NumericalError as e:
            raise PipelineError("online", e, m.truncated(t - 1)) from e
        x = min(int(np.searchsorted(ctx_cdf, rng.random(), side="right")), X - 1)
        traj = sample_episode(env, pi, rng, context=x, check=False)
        s_T, a_T = traj.states[-1], traj.actions[-1]
        i = t - 1
        m.context[i] = x
        m.terminal_state[i] = s_T
        m.true_reward[i] = traj.reward
        m.policy_value[i] = exact_value(env, pi)
        if s_T in J:
            r_tilde = float(J[s_T][x, traj.feedback, a_T])
            m.decoded_reward[i] = r_tilde
            oracle.update(x, s_T, a_T, r_tilde)
        update_counts(counts, traj.states, traj.actions)
    return m


# ---------------------------------------------------------------------------
# theory-mode parameters


class TheoryParams(NamedTuple):
    gamma: float
    n0: float
    eps: float


def compute_theory_params(T, S, K, H, L, reg_sq) -> TheoryParams:
    """Rate-optimal ``(gamma, N0, eps)`` for horizon ``T`` and decoder Lipschitz constant ``L``."""
    for name, v in (("T", T), ("S", S), ("K", K), ("H", H), ("L", L), ("reg_sq", reg_sq)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    gamma = min(math.sqrt(T * S * K * H / reg_sq),
                math.sqrt(T / (S * K * H**3)),
                T**0.25 * S**0.25 * K**0.5 * L**-0.5 * H**0.75)
    n0 = max(L * math.sqrt(T * K * H) / S,
             gamma ** (2 / 3) * T ** (1 / 3) * S ** (-2 / 3) * K ** (2 / 3) * L ** (4 / 3))
    eps = max(math.sqrt(n0 / T), T ** (-1 / 3) * S ** (1 / 3) * K ** (1 / 3) * H ** (1 / 3))
    return TheoryParams(gamma, n0, eps)
