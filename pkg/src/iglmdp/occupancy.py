"""Log-barrier occupancy-measure planning by equality-constrained Newton.

Solves::

    max_q  sum_{s,a} q(s,a) r(s,a) + (1/gamma) sum_{s,a} log q(s,a)
    s.t.   sum_a q(s1,a) = 1
           sum_a q(s',a) = sum_{s,a} P(s'|s,a) q(s,a)    for every non-start s'

over occupancy measures of a layered kernel.  Each state belongs to one
layer, so ``q`` is stored as an (S, K) array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

POLISH_STEPS = 5
QUADRATIC_REGION = 0.1   # scaled decrement below which full steps converge


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    q: np.ndarray            # (S, K)
    transition: np.ndarray   # (S, K, S) kernel the measure is valid for
    iterations: int = 0
    decrement: float = 0.0

    def policy(self) -> np.ndarray:
        return extract_policy(self.q)


def flow_matrix(transition: np.ndarray, start: int):
    """Constraint matrix ``A`` (S, S*K) and right-hand side ``b`` with ``A vec(q) = b``."""
    S, K, _ = transition.shape
    A = -transition.reshape(S * K, S).T.copy()
    for s in range(S):
        A[s, s * K:(s + 1) * K] += 1.0
    b = np.zeros(S)
    b[start] = 1.0
    return A, b


def policy_occupancy(transition: np.ndarray, policy: np.ndarray, layers) -> np.ndarray:
    """Occupancy (S, K) of a Markov policy (S, K) under ``transition``."""
    S = transition.shape[0]
    d = np.zeros(S)
    d[layers[0]] = 1.0
    for h in range(len(layers) - 1):
        st = layers[h]
        d = d + np.einsum("s,sa,sat->t", d[st], policy[st], transition[st])
    return d[:, None] * policy


def flow_residual(q: np.ndarray, transition: np.ndarray, start: int) -> float:
    A, b = flow_matrix(transition, start)
    return float(np.abs(A @ q.ravel() - b).max())


def barrier_objective(q, reward, gamma) -> float:
    return float(np.sum(q * reward) + np.sum(np.log(q)) / gamma)


def solve_occupancy(transition: np.ndarray, reward: np.ndarray, gamma: float, layers,
                    init_policy=None, tol: float = 1e-10, max_iter: int = 200) -> OccupancyMeasure:
    """Unique maximizer of the barrier-regularized planning problem.

    Starts from the occupancy of ``init_policy`` (uniform by default), which
    is strictly feasible when every row of ``transition`` is positive on the
    next layer.  Newton steps move within the flow constraints and also
    cancel any rounding drift off them; backtracking rejects steps leaving
    the positive orthant and enforces an Armijo decrease until the iterate
    is close enough for undamped steps.  Stops once half the squared Newton
    decrement (of the unscaled objective) falls below ``tol``, then polishes
    with a few full steps while the decrement keeps falling.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    S, K, _ = transition.shape
    start = int(layers[0][0])
    A, b = flow_matrix(transition, start)
    pi0 = np.full((S, K), 1.0 / K) if init_policy is None else np.asarray(init_policy, dtype=float)
    q = policy_occupancy(transition, pi0, layers).ravel()
    if np.any(q <= 0):
        raise NumericalError("initial occupancy is not strictly positive", float(q.min()))
    r = gamma * np.asarray(reward, dtype=float).ravel()

    def phi(z):
        return -r @ z - np.log(z).sum()

    def direction(q):
        g = -r - 1.0 / q
        hinv = q * q
        Ah = A * hinv
        rp = b - A @ q
        w = np.linalg.solve(Ah @ A.T, -(Ah @ g) - rp)
        dq = -hinv * (g + A.T @ w)
        # decrement of the unscaled objective; the gamma factor is for conditioning only
        return dq, float(dq @ (dq / hinv)) / gamma

    f_cur = phi(q)
    dec = prev = np.inf
    for it in range(1, max_iter + 1):
        dq, dec = direction(q)
        if dec / 2 <= tol:
            break
        if dec * gamma < QUADRATIC_REGION:
            # pure Newton is safe here; a decrement that stops falling is the float floor
            if dec >= prev:
                break
            z = q + dq
            if np.all(z > 0):
                q, f_cur, prev = z, phi(z), dec
                continue
        t = 1.0
        neg = dq < 0
        if np.any(neg):
            t = min(1.0, 0.99 * float(np.min(-q[neg] / dq[neg])))
        while True:
            z = q + t * dq
            f_new = phi(z)
            if f_new <= f_cur - 0.25 * t * dec * gamma:
                break
            t *= 0.5
            if t < 1e-14:
                raise NumericalError("line search stalled", dec)
        q, f_cur, prev = z, f_new, dec
    else:
        raise NumericalError(f"Newton did not converge in {max_iter} iterations", dec)
    # polish: full steps while the (quadratically shrinking) decrement keeps falling
    for _ in range(POLISH_STEPS):
        z = q + dq
        if not np.all(z > 0):
            break
        dq_next, dec_next = direction(z)
        if not dec_next < dec:
            break
        q, dq, dec = z, dq_next, dec_next
    lam2 = dec
    return OccupancyMeasure(q.reshape(S, K), transition, it, float(np.sqrt(max(lam2, 0.0))))


def extract_policy(q: np.ndarray) -> np.ndarray:
    """Row-normalize an occupancy into the policy that induces it."""
    q = np.asarray(q, dtype=float)
    tot = q.sum(-1, keepdims=True)
    if np.any(tot <= 0):
        raise NumericalError("occupancy has an all-zero row", float(tot.min()))
    return q / tot


def projected_gradient_norm(q, transition, reward, gamma, start) -> float:
    """Norm of the objective gradient projected onto the flow-constraint null space."""
    A, _ = flow_matrix(transition, start)
    g = np.asarray(reward, dtype=float).ravel() + 1.0 / (gamma * np.asarray(q).ravel())
    w, *_ = np.linalg.lstsq(A.T, g, rcond=None)
    return float(np.linalg.norm(g - A.T @ w))
