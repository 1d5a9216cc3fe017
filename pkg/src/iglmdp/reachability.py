"""Homing policies for terminal states and the reliably-reachable set.

The homing learner is tabular optimistic value iteration with Hoeffding
bonuses on the dummy reward "reached the target".  Any learner with a PAC
guarantee works here; this one is small and fully vectorized over a batch
of independent targets.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .env import IglEnv, simulate_batch


def lemma1_budget(S, K, H, eps, delta, C=1.0) -> int:
    """Episode budget ``C * S K H log(SKH/delta) / eps^2`` for one target."""
    return int(math.ceil(C * S * K * H * math.log(S * K * H / delta) / eps**2))


def concentration_width(S, K, H, n, delta) -> float:
    return math.sqrt(math.log(S * K * H / delta) / (2 * n))


@dataclass(frozen=True, eq=False)
class HomingPolicy:
    """Uniform mixture over the greedy policies executed while learning.

    ``actions[n, s]`` is member n's action at non-terminal state s; every
    member plays uniformly on the terminal layer.  ``train_visits`` counts
    training episodes that ended at the target.
    """

    target: int
    actions: np.ndarray
    n_actions: int
    terminal_states: np.ndarray
    train_visits: int = 0

    @property
    def n_members(self) -> int:
        return len(self.actions)

    def member_policy(self, n: int) -> np.ndarray:
        return self._tables(self.actions[n : n + 1])[0]

    def _tables(self, acts):
        K = self.n_actions
        pi = np.eye(K)[acts]
        pi[:, self.terminal_states] = 1.0 / K
        return pi

    def unique_members(self):
        """Distinct member tables (U, S, K) and the count of each."""
        uniq, counts = np.unique(self.actions, axis=0, return_counts=True)
        return self._tables(uniq), counts

    def reach_probability(self, env: IglEnv) -> float:
        """Exact mixture reach probability: the mean over members of their DP value."""
        tables, counts = self.unique_members()
        P = env.mdp.transition
        d = np.zeros((len(tables), env.n_states))
        d[:, env.mdp.start_state] = 1.0
        for _ in range(env.horizon - 1):
            d = np.einsum("us,usa,sat->ut", d, tables, P)
        return float(counts @ d[:, self.target] / counts.sum())

    def sample(self, env: IglEnv, n: int, rng: np.random.Generator):
        """Roll out ``n`` episodes, drawing a fresh member for each."""
        tables, counts = self.unique_members()
        member = rng.choice(len(tables), size=n, p=counts / counts.sum())
        pi = np.broadcast_to(tables[:, None], (len(tables), env.n_contexts) + tables.shape[1:])
        return simulate_batch(env, pi, n, rng, member=member)


def learn_homing_policies(env: IglEnv, targets, N: int, delta: float, rng: np.random.Generator,
                          bonus_scale: float = 1.0):
    """Run one optimistic learner per target for ``N`` episodes each, in lockstep.

    Learners share nothing but the generator.  Bonus for a pair visited n
    times is ``sqrt(2 log(2 S K H N / delta) / max(1, n))``; Q-values are
    clipped to [0, 1] and each episode plays the greedy policy (lowest
    action index on ties).
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=int))
    mdp = env.mdp
    terminal = mdp.terminal_states
    bad = np.setdiff1d(targets, terminal)
    if bad.size:
        raise ValueError(f"homing targets {bad.tolist()} are not terminal states")
    if N < 1:
        raise ValueError("N must be at least 1")
    B, S, K, H = len(targets), mdp.n_states, mdp.n_actions, mdp.horizon
    log_term = math.log(2 * S * K * H * N / delta)
    n_sa = np.zeros((B, S, K))
    n_sas = np.zeros((B, S, K, S))
    greedy = np.zeros((B, S), dtype=np.int64)
    log = np.zeros((B, N, S), dtype=np.int8 if K <= 127 else np.int32)
    visits = np.zeros(B, dtype=int)
    V_term = (terminal[None, :] == targets[:, None]).astype(float)
    cum_P = mdp.cum_transition
    rows = np.arange(B)
    for ep in range(N):
        V = np.zeros((B, S))
        V[:, terminal] = V_term
        n_clip = np.maximum(n_sa, 1.0)
        bonus = bonus_scale * np.sqrt(2.0 * log_term / n_clip)
        for h in range(H - 2, -1, -1):
            st = mdp.layers[h]
            nxt = mdp.layers[h + 1]
            mean = np.einsum("bsat,bt->bsa", n_sas[:, st][..., nxt], V[:, nxt]) / n_clip[:, st]
            Q = np.minimum(1.0, bonus[:, st] + mean)
            greedy[:, st] = Q.argmax(-1)
            V[:, st] = Q.max(-1)
        log[:, ep] = greedy
        s = np.full(B, mdp.start_state)
        for h in range(H - 1):
            a = greedy[rows, s]
            u = rng.random(B)
            s_next = np.minimum((u[:, None] >= cum_P[s, a]).sum(-1), S - 1)
            n_sa[rows, s, a] += 1
            n_sas[rows, s, a, s_next] += 1
            s = s_next
        visits += s == targets
    return [HomingPolicy(int(t), log[b], K, terminal, int(visits[b])) for b, t in enumerate(targets)]


def learn_homing_policy(env: IglEnv, target: int, N: int, delta: float, rng: np.random.Generator,
                        bonus_scale: float = 1.0) -> HomingPolicy:
    return learn_homing_policies(env, [target], N, delta, rng, bonus_scale)[0]


@dataclass(frozen=True)
class VisitationStats:
    states: np.ndarray
    p_hat: np.ndarray
    n: int
    beta: float

    def __post_init__(self):
        if np.any((self.p_hat < 0) | (self.p_hat > 1)):
            raise ValueError("visitation frequencies must lie in [0, 1]")


def estimate_visitation(homing: HomingPolicy, env: IglEnv, N: int, rng: np.random.Generator,
                        delta: float = 0.05) -> VisitationStats:
    """Empirical frequency of ending at the target over ``N`` fresh mixture rollouts."""
    if N < 1:
        raise ValueError("N must be at least 1")
    hits = int((homing.sample(env, N, rng)["states"][:, -1] == homing.target).sum())
    beta = concentration_width(env.n_states, env.n_actions, env.horizon, N, delta)
    return VisitationStats(np.array([homing.target]), np.array([hits / N]), N, beta)


def visitation_from_training(homings, env: IglEnv, delta: float) -> VisitationStats:
    """Frequencies from the learners' own episodes (one rollout per member).

    Each member is executed exactly once, so the hit fraction is an unbiased
    estimate of the mixture reach probability and concentrates at the same
    Azuma rate as fresh rollouts, without spending extra episodes.
    """
    N = homings[0].n_members
    if any(hp.n_members != N for hp in homings):
        raise ValueError("all homing policies must share the same budget")
    states = np.array([hp.target for hp in homings])
    p_hat = np.array([hp.train_visits / N for hp in homings])
    beta = concentration_width(env.n_states, env.n_actions, env.horizon, N, delta)
    return VisitationStats(states, p_hat, N, beta)


def merge_stats(parts) -> VisitationStats:
    parts = list(parts)
    return VisitationStats(np.concatenate([p.states for p in parts]),
                           np.concatenate([p.p_hat for p in parts]),
                           min(p.n for p in parts), max(p.beta for p in parts))


class Reachability(enum.Enum):
    ABOVE = "AboveThreshold"
    BELOW = "BelowThreshold"
    INDETERMINATE = "Indeterminate"


def classify_reachability(p_hat: float, beta: float, tau: float, eps: float = 0.0) -> Reachability:
    """Three-way test of the maximal reach probability against ``tau``."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if p_hat >= tau + beta:
        return Reachability.ABOVE
    if p_hat <= tau - (beta + eps):
        return Reachability.BELOW
    return Reachability.INDETERMINATE


@dataclass(frozen=True)
class ReachableSet:
    states: frozenset
    eps: float

    def __contains__(self, s) -> bool:
        return int(s) in self.states

    def __len__(self) -> int:
        return len(self.states)

    def as_mask(self, n_states: int) -> np.ndarray:
        m = np.zeros(n_states, dtype=bool)
        m[list(self.states)] = True
        return m


def build_reachable_set(stats: VisitationStats, eps: float) -> ReachableSet:
    """Terminal states whose empirical frequency clears ``4 * eps``."""
    if not 0 < eps < 0.25:
        raise ValueError("eps must lie in (0, 1/4)")
    keep = frozenset(int(s) for s, p in zip(stats.states, stats.p_hat) if p >= 4 * eps)
    if not keep:
        warnings.warn("no terminal state is reliably reachable; the reward decoder will be empty "
                      "and every online episode is skipped for oracle updates", RuntimeWarning,
                      stacklevel=2)
    return ReachableSet(keep, eps)
