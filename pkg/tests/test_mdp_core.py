import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ConstantPolicy, DriftEnv, StillEnv, TablePolicy
from mpcrl.mdp import (
    RolloutError,
    chainworld,
    chainworld_mdp,
    discounted_return,
    episode_streams,
    estimate_performance,
    ordered_map,
    policy_evaluation,
    reward_to_go,
    rewards_to_go,
    rollout,
)
from mpcrl.mdp.core import PolicyInterface
from mpcrl.rng import RNGStream


def test_fixed_point_env_gives_identical_states():
    traj = rollout(StillEnv(), ConstantPolicy(0.0), 3, 0)
    assert len(traj) == 3
    assert all(np.array_equal(tr.s, np.array([0.25])) for tr in traj.transitions)
    assert traj.T == 3


def test_chainworld_always_right_visits_every_state():
    traj = rollout(chainworld(5), TablePolicy([1] * 5), 4, 0)
    visited = [int(tr.s[0]) for tr in traj.transitions] + [int(traj.transitions[-1].s_next[0])]
    assert visited == [0, 1, 2, 3, 4]


def test_rollout_is_bit_identical_for_same_seed():
    from mpcrl.mdp import LinearGaussianEnv
    env = LinearGaussianEnv([[0.9]], [[1.0]], noise_std=0.3)
    a = rollout(env, ConstantPolicy(0.1), 10, RNGStream.from_seed(4).child(2))
    b = rollout(env, ConstantPolicy(0.1), 10, RNGStream.from_seed(4).child(2))
    assert a.seed == b.seed
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.rewards, b.rewards)


def test_rollout_rejects_bad_horizon_and_reports_failing_step():
    with pytest.raises(ValueError):
        rollout(StillEnv(), ConstantPolicy(0.0), 0, 0)

    class Breaks(PolicyInterface):
        m = 1

        def __init__(self):
            self.calls = 0

        def deterministic_act(self, s):
            self.calls += 1
            if self.calls == 3:
                raise RuntimeError("solver blew up")
            return np.zeros(1)

    with pytest.raises(RolloutError) as info:
        rollout(StillEnv(), Breaks(), 5, 0)
    assert info.value.t == 2


@pytest.mark.parametrize("rewards,gamma,expected", [
    ([1, 1, 1], 0.5, 1.75),
    ([0, 0, 0, 0], 0.9, 0.0),
    ([2, -1], 0.9, 1.1),
])
def test_discounted_return(rewards, gamma, expected):
    assert discounted_return(rewards, gamma) == pytest.approx(expected, abs=1e-12)


def test_reward_to_go_examples():
    r = [1.0, 1.0, 1.0]
    assert reward_to_go(r, 1, 0.5) == pytest.approx(1.5)
    assert reward_to_go(r, 2, 0.5) == pytest.approx(1.0)
    assert reward_to_go(r, 0, 0.5) == pytest.approx(discounted_return(r, 0.5))


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(0.0, 0.999))
def test_reward_to_go_telescopes(rewards, gamma):
    G = rewards_to_go(np.array(rewards), gamma)
    for t in range(len(rewards) - 1):
        assert abs(G[t] - (rewards[t] + gamma * G[t + 1])) <= 1e-12 * max(1.0, abs(G[t]))
    assert G[-1] == rewards[-1]


def test_deterministic_estimate_has_zero_error():
    est = estimate_performance(DriftEnv(), ConstantPolicy(0.0), 0.9, 5, 8, RNGStream.from_seed(1))
    assert est.std_error == 0.0
    assert est.mean == pytest.approx(-(1 + 0.9 * 0.25 + 0.81 * 0.0625 + 0.729 * 0.25**3 + 0.6561 * 0.25**4))


def test_single_episode_estimate_is_flagged():
    est = estimate_performance(DriftEnv(), ConstantPolicy(0.0), 0.9, 5, 1, RNGStream.from_seed(1))
    assert est.degenerate and est.std_error == 0.0 and est.n_episodes == 1


def test_chainworld_estimate_matches_finite_horizon_dp():
    # slip makes returns random; the finite-T oracle is the T-step policy value
    from mpcrl.mdp import finite_horizon_value
    mdp = chainworld_mdp(5, slip=0.2, gamma=0.9)
    env = chainworld(5, slip=0.2, gamma=0.9)
    actions = np.array([1, 1, 0, 1, 1])
    table = np.eye(2)[actions]
    T = 15
    exact = finite_horizon_value(mdp, table, T)[0]
    hits = 0
    for k in range(20):
        est = estimate_performance(env, TablePolicy(actions), 0.9, T, 400, RNGStream.from_seed(100 + k))
        hits += abs(est.mean - exact) <= 3 * est.std_error
    assert hits >= 19


def test_long_horizon_estimate_approaches_infinite_horizon_value():
    mdp = chainworld_mdp(5, slip=0.1, gamma=0.9)
    actions = np.ones(5, dtype=int)
    V, _ = policy_evaluation(mdp, actions)
    est = estimate_performance(chainworld(5, slip=0.1), TablePolicy(actions), 0.9, 200, 300, RNGStream.from_seed(3))
    assert abs(est.mean - V[0]) <= 3 * est.std_error + 0.9**200 * 10


def test_ordered_map_preserves_order_under_threads():
    out = ordered_map(lambda x: x * x, range(50), threads=4)
    assert out == [x * x for x in range(50)]


def test_episode_streams_are_distinct_and_reproducible():
    a = episode_streams(RNGStream.from_seed(9), 5)
    b = episode_streams(9, 5)
    assert a == b and len(set(s.key for s in a)) == 5


def test_estimate_with_shared_seed_list_is_reproducible():
    from mpcrl.mdp import LinearGaussianEnv
    env = LinearGaussianEnv([[0.9]], [[1.0]], noise_std=0.3)
    seeds = episode_streams(RNGStream.from_seed(2), 12)
    e1 = estimate_performance(env, ConstantPolicy(0.0), 0.9, 10, seeds=seeds, threads=3)
    e2 = estimate_performance(env, ConstantPolicy(0.0), 0.9, 10, seeds=seeds, threads=1)
    assert e1.returns == e2.returns
