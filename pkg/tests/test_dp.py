import numpy as np
import pytest
from hypothesis import given, strategies as st

from mpcrl.mdp import (
    DiscreteMDP,
    bellman_optimality,
    bellman_residual,
    enumerate_optimal_policy,
    greedy_from_q,
    load_mdp,
    policy_actions,
    policy_evaluation,
    policy_value_direct,
    save_mdp,
    value_iteration,
)


def random_mdp(seed, S=5, A=3, gamma=0.9):
    return DiscreteMDP.random(S, A, gamma, np.random.default_rng(seed))


def test_single_state_geometric_series():
    mdp = DiscreteMDP(np.ones((1, 2, 1)), np.ones((1, 2)), 0.5)
    assert np.allclose(value_iteration(mdp, 1e-13), 2.0, atol=1e-12)


def test_zero_rewards_zero_q():
    mdp = random_mdp(0)
    mdp = DiscreteMDP(mdp.P, np.zeros_like(mdp.R), 0.9)
    assert np.array_equal(value_iteration(mdp), np.zeros_like(mdp.R))


@pytest.mark.parametrize("seed", range(5))
def test_greedy_matches_enumeration(seed):
    mdp = random_mdp(seed)
    Q = value_iteration(mdp, 1e-12)
    assert bellman_residual(mdp, Q) <= 1e-10
    best, V = enumerate_optimal_policy(mdp)
    assert np.array_equal(policy_actions(greedy_from_q(Q)), best)
    assert np.allclose(Q.max(axis=1), V, atol=1e-9)


def test_uniform_policy_on_symmetric_mdp_gives_equal_values():
    P = np.zeros((2, 2, 2))
    P[0, 0] = P[1, 1] = [0.5, 0.5]
    P[0, 1] = [0.2, 0.8]
    P[1, 0] = [0.8, 0.2]
    R = np.array([[1.0, 0.0], [0.0, 1.0]])
    V, _ = policy_evaluation(DiscreteMDP(P, R, 0.9), np.full((2, 2), 0.5))
    assert V[0] == pytest.approx(V[1], abs=1e-10)


def test_deterministic_policy_value_is_q_at_policy_action():
    mdp = random_mdp(3)
    actions = np.array([0, 2, 1, 1, 0])
    V, Q = policy_evaluation(mdp, actions)
    assert np.allclose(V, Q[np.arange(5), actions], atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_policy_evaluation_matches_linear_solve(seed):
    mdp = random_mdp(seed)
    pi = np.random.default_rng(seed + 10).dirichlet(np.ones(3), size=5)
    V, Q = policy_evaluation(mdp, pi)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = np.sum(pi * mdp.R, axis=1)
    V_direct = np.linalg.solve(np.eye(5) - mdp.gamma * P_pi, r_pi)
    assert np.allclose(V, V_direct, atol=1e-9)
    # value-Q recursion
    assert np.allclose(Q, mdp.R + mdp.gamma * mdp.P @ V, atol=1e-9)


def test_greedy_examples_and_tie_break():
    assert policy_actions(greedy_from_q(np.array([[0.0, 1.0]])))[0] == 1
    assert policy_actions(greedy_from_q(np.array([[1.0, 1.0]])))[0] == 0
    with pytest.raises(ValueError):
        greedy_from_q(np.array([[np.nan, 1.0]]))


@given(st.integers(0, 10_000), st.floats(0.1, 0.95))
def test_value_iteration_contracts(seed, gamma):
    mdp = random_mdp(seed, 4, 2, gamma)
    hist = []
    value_iteration(mdp, 1e-9, history=hist)
    for a, b in zip(hist, hist[1:]):
        assert b <= gamma * a + 1e-12


@given(st.integers(0, 10_000))
def test_bellman_operator_is_gamma_contraction(seed):
    mdp = random_mdp(seed, 4, 2, 0.8)
    rng = np.random.default_rng(seed)
    Q1, Q2 = rng.normal(size=(2, 4, 2))
    d_out = np.max(np.abs(bellman_optimality(mdp, Q1) - bellman_optimality(mdp, Q2)))
    assert d_out <= 0.8 * np.max(np.abs(Q1 - Q2)) + 1e-12


def test_mdp_text_round_trip(tmp_path):
    mdp = random_mdp(7)
    save_mdp(mdp, tmp_path / "m.txt")
    back = load_mdp(tmp_path / "m.txt")
    assert np.array_equal(back.P, mdp.P) and np.array_equal(back.R, mdp.R) and back.gamma == mdp.gamma
    assert load_mdp(tmp_path / "m.txt", gamma=0.5).gamma == 0.5


def test_invalid_mdp_rejected(tmp_path):
    with pytest.raises(ValueError):
        DiscreteMDP(np.full((2, 1, 2), 0.7), np.zeros((2, 1)), 0.9)
    (tmp_path / "bad.txt").write_text("not an mdp\n")
    with pytest.raises(ValueError):
        load_mdp(tmp_path / "bad.txt")


def test_direct_value_matches_iterative():
    mdp = random_mdp(11)
    actions = np.array([1, 1, 0, 2, 0])
    assert np.allclose(policy_value_direct(mdp, actions), policy_evaluation(mdp, actions)[0], atol=1e-9)
