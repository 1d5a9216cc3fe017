import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iglmdp.env import exact_value, rng_stream
from iglmdp.errors import NumericalError
from iglmdp.occupancy import (barrier_objective, extract_policy, flow_residual, policy_occupancy,
                              projected_gradient_norm, solve_occupancy)
from iglmdp.verify import random_layered_mdp


def single_state(K):
    return np.zeros((1, K, 1)), ([0],)


def test_bandit_zero_reward_uniform():
    P, layers = single_state(4)
    for gamma in (0.1, 10.0, 1e5):
        occ = solve_occupancy(P, np.zeros((1, 4)), gamma, layers)
        np.testing.assert_allclose(occ.q, 0.25, atol=1e-12)


def test_bandit_large_gamma_greedy():
    P, layers = single_state(2)
    occ = solve_occupancy(P, np.array([[1.0, 0.0]]), 1e6, layers)
    assert occ.q[0, 0] >= 0.999
    # first-order condition: q2 (1 + o(1)) = 1/gamma
    assert occ.q[0, 1] == pytest.approx(1e-6, rel=1e-3)


def test_bandit_closed_form():
    # K=2, reward gap 1: maximize q + (log q + log(1-q))/g  =>  g q (1-q) = 2q - 1 ... solved numerically below
    P, layers = single_state(2)
    g = 3.0
    occ = solve_occupancy(P, np.array([[1.0, 0.0]]), g, layers)
    q = occ.q[0, 0]
    assert 1 + (1 / q - 1 / (1 - q)) / g == pytest.approx(0.0, abs=1e-10)


def test_deterministic_chain_constant_reward():
    K = 3
    P = np.zeros((3, K, 3))
    P[0, :, 1] = 1.0
    P[1, :, 2] = 1.0
    layers = ([0], [1], [2])
    occ = solve_occupancy(P, np.full((3, K), 0.4), 50.0, layers)
    want = policy_occupancy(P, np.full((3, K), 1 / K), layers)
    np.testing.assert_allclose(occ.q, want, atol=1e-12)


def test_extract_policy_examples():
    np.testing.assert_allclose(extract_policy(np.array([[0.3, 0.1]])), [[0.75, 0.25]])
    np.testing.assert_allclose(extract_policy(np.full((2, 4), 0.7)), 0.25)
    with pytest.raises(NumericalError):
        extract_policy(np.array([[0.0, 0.0]]))


def test_extracted_policy_induces_occupancy():
    rng = rng_stream(0, "occ")
    mdp = random_layered_mdp(rng)
    r = rng.random((mdp.n_states, mdp.n_actions))
    occ = solve_occupancy(mdp.transition, r, 20.0, mdp.layers)
    q2 = policy_occupancy(mdp.transition, occ.policy(), mdp.layers)
    np.testing.assert_allclose(q2, occ.q, atol=1e-10)


def test_synthetic_near_optimal(env):
    f = env.reward[0] * np.isin(np.arange(5), env.mdp.terminal_states)[:, None]
    occ = solve_occupancy(env.mdp.transition, f, 1e4, env.mdp.layers)
    pi = np.broadcast_to(occ.policy(), (2, 5, 5))
    assert exact_value(env, pi) == pytest.approx(0.729, abs=0.01)


def test_solver_invariants_random_instances():
    rng = rng_stream(1, "occ")
    for _ in range(40):
        mdp = random_layered_mdp(rng, max_horizon=3)
        P = mdp.transition
        r = rng.random((mdp.n_states, mdp.n_actions))
        gamma = float(10 ** rng.uniform(-1, 5))
        occ = solve_occupancy(P, r, gamma, mdp.layers)
        start = mdp.start_state
        assert flow_residual(occ.q, P, start) <= 1e-8
        assert occ.q[start].sum() == pytest.approx(1.0, abs=1e-8)
        assert occ.q.min() > 0
        assert projected_gradient_norm(occ.q, P, r, gamma, start) <= 1e-6


def test_warm_start_same_solution():
    rng = rng_stream(2, "occ")
    mdp = random_layered_mdp(rng)
    r = rng.random((mdp.n_states, mdp.n_actions))
    cold = solve_occupancy(mdp.transition, r, 300.0, mdp.layers)
    init = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    warm = solve_occupancy(mdp.transition, r, 300.0, mdp.layers, init_policy=init)
    np.testing.assert_allclose(warm.q, cold.q, atol=1e-9)


def test_rejects_bad_gamma():
    P, layers = single_state(2)
    with pytest.raises(ValueError):
        solve_occupancy(P, np.zeros((1, 2)), 0.0, layers)


def test_iteration_cap_raises():
    rng = rng_stream(3, "occ")
    mdp = random_layered_mdp(rng)
    r = rng.random((mdp.n_states, mdp.n_actions))
    with pytest.raises(NumericalError) as e:
        solve_occupancy(mdp.transition, r, 1e4, mdp.layers, max_iter=1)
    assert np.isfinite(e.value.residual)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.5, 1e4))
def test_beats_random_policies(seed, gamma):
    rng = np.random.default_rng(seed)
    mdp = random_layered_mdp(rng, max_horizon=3)
    P = mdp.transition
    r = rng.random((mdp.n_states, mdp.n_actions))
    best = barrier_objective(solve_occupancy(P, r, gamma, mdp.layers).q, r, gamma)
    for _ in range(50):
        pi = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
        q = policy_occupancy(P, pi, mdp.layers)
        assert barrier_objective(q, r, gamma) <= best + 1e-9
