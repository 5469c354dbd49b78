import numpy as np
import pytest

from mpcrl.agents import GaussianPerturbedPolicy, MlpPolicy
from mpcrl.critics import LinearQ, QuadraticFeatures
from mpcrl.harness import fixtures
from mpcrl.learners.pg import (
    AllSamplesDropped,
    LearnerFailure,
    NonFiniteGradient,
    PGConfig,
    dpg_gradient,
    gradient_step,
    mc_value_baseline,
    reinforce_gradient,
    train_dpg,
    train_reinforce,
)
from mpcrl.mdp.core import Environment, Trajectory, Transition, episode_streams, rollout
from mpcrl.rng import RNGStream
from mpcrl.sensitivity import SingularKKTMatrix

from conftest import DriftEnv

TARGET = 0.7


class Bandit(Environment):
    """One fixed state; reward -(a - TARGET)^2."""
    n = 1
    m = 1

    def sample_initial(self, rng):
        return np.zeros(1)

    def step(self, s, a, rng):
        return s.copy(), float(-(a[0] - TARGET) ** 2)


def _affine_policy(bias=0.0):
    # hidden=() makes the network a = W s + b; at s = 0 the mean is b
    net = MlpPolicy(1, 1, ())
    return net.with_theta(net.theta.with_block("b0", [bias]))


def _bandit_trajectories(pol, n, seed=0):
    return [rollout(Bandit(), pol, 1, st) for st in episode_streams(RNGStream.from_seed(seed), n)]


def test_single_sample_gradient_is_score_times_return():
    pol = GaussianPerturbedPolicy(_affine_policy(0.2), 0.5)
    tr = Transition(np.zeros(1), np.array([0.9]), -0.04, np.zeros(1), 0)
    g = reinforce_gradient([Trajectory([tr], 0, 1)], pol, 0.9).grad
    # d/db log N(a; b, sigma^2) = (a - b) / sigma^2 = 0.7 / 0.25; the W coordinate has zero score at s = 0
    assert np.allclose(g, [0.0, 2.8 * -0.04])


def test_reinforce_is_unbiased_on_gaussian_bandit():
    sigma, b = 0.4, 0.2
    pol = GaussianPerturbedPolicy(_affine_policy(b), sigma)
    est = reinforce_gradient(_bandit_trajectories(pol, 20000), pol, 0.9)
    # d/db E[-(a - c)^2] = -2 (b - c)
    se = est.per_episode[:, 1].std(ddof=1) / np.sqrt(20000)
    assert abs(est.grad[1] - (-2 * (b - TARGET))) < 4 * se
    assert est.used == 20000 and est.dropped == 0


def test_constant_baseline_keeps_mean_and_cuts_variance():
    pol = GaussianPerturbedPolicy(_affine_policy(0.2), 0.4)
    trajs = _bandit_trajectories(pol, 20000, seed=1)
    plain = reinforce_gradient(trajs, pol, 0.9)
    mean_return = float(np.mean([t.rewards[0] for t in trajs]))
    based = reinforce_gradient(trajs, pol, 0.9, [np.array([mean_return]) for _ in trajs])
    se = plain.per_episode[:, 1].std(ddof=1) / np.sqrt(len(trajs))
    assert abs(plain.grad[1] - based.grad[1]) < 4 * se
    assert based.per_episode[:, 1].var() < plain.per_episode[:, 1].var()


def test_baseline_equal_to_returns_gives_zero_gradient():
    pol = GaussianPerturbedPolicy(_affine_policy(), 0.4)
    trajs = _bandit_trajectories(pol, 5)
    with pytest.raises(ValueError):
        reinforce_gradient(trajs, pol, 0.9, [np.zeros(2)] * 5)
    est = reinforce_gradient(trajs, pol, 0.9, [t.rewards for t in trajs])
    assert np.all(est.grad == 0)


def test_all_samples_dropped_raises():
    class Refusing(GaussianPerturbedPolicy):
        def grad_log_prob(self, s, a):
            raise SingularKKTMatrix("refused")
    pol = Refusing(_affine_policy(), 0.4)
    with pytest.raises(AllSamplesDropped):
        reinforce_gradient(_bandit_trajectories(pol, 3), pol, 0.9)


def test_dpg_gradient_matches_chain_rule():
    # Q(s, a) = -(a - c)^2 as a quadratic critic: weights on [1, s, a, s^2, s a, a^2]
    feats = QuadraticFeatures(1, 1)
    q = LinearQ(np.array([-TARGET**2, 0.0, 2 * TARGET, 0.0, 0.0, -1.0]), feats)
    pol = _affine_policy(0.1)
    pol = pol.with_theta(pol.theta.with_block("W0", [0.5]))
    states = [np.array([x]) for x in (-1.0, 0.0, 2.0)]
    est = dpg_gradient(states, pol, q)
    mu = [0.5 * s[0] + 0.1 for s in states]
    expect = np.mean([[-2 * (m - TARGET) * s[0], -2 * (m - TARGET)] for m, s in zip(mu, states)], axis=0)
    assert np.allclose(est.grad, expect, atol=1e-12)


def test_gradient_step_clips_projects_and_guards():
    theta = fixtures.mismatch_policy(("dyn_B", "stage_q")).theta
    new = gradient_step(theta, [30.0, 40.0], 1.0, clip=5.0)
    assert np.allclose(new.learnable_values() - theta.learnable_values(), [3.0, 4.0])
    far = gradient_step(theta, [-1e6, 1e6], 1.0)  # layout order: stage_q, dyn_B
    assert far["dyn_B"][0] == 5.0 and far["stage_q"][0] == 0.1
    frozen = ~theta.learnable_mask
    assert np.array_equal(far.values[frozen], theta.values[frozen])
    with pytest.raises(NonFiniteGradient):
        gradient_step(theta, [np.nan, 0.0], 1.0)
    with pytest.raises(ValueError):
        gradient_step(theta, [1.0], 1.0)


def test_mc_baseline_fits_deterministic_returns():
    from conftest import ConstantPolicy
    trajs = [rollout(DriftEnv(), ConstantPolicy(0.1), 6, k) for k in range(3)]
    b = mc_value_baseline(trajs, 0.9)
    from mpcrl.mdp.core import rewards_to_go
    g = rewards_to_go(trajs[0].rewards, 0.9)
    assert np.allclose([b(tr.s, tr.t) for tr in trajs[0].transitions], g, atol=1e-6)


def test_config_validation_collects_errors():
    with pytest.raises(ValueError) as exc:
        PGConfig(gamma=1.0, eta=-1.0, T=0, baseline="x")
    msg = str(exc.value)
    for part in ("gamma", "eta", "T must", "baseline"):
        assert part in msg
    assert PGConfig(eta=0.4).step_size(3) == pytest.approx(0.2)
    assert PGConfig(eta=0.4, eta_decay="none").step_size(3) == 0.4


def _small_config(**kw):
    base = dict(gamma=fixtures.MISMATCH_GAMMA, T=10, episodes_per_iteration=8, eta=0.1, clip=1.0,
                max_iterations=3, eval_episodes=8, sigma=0.2, seed=3)
    base.update(kw)
    return PGConfig(**base)


def test_reinforce_training_is_deterministic_and_leaves_frozen_blocks():
    env, pol = fixtures.mismatch_env(), fixtures.mismatch_policy()
    a = train_reinforce(env, pol, _small_config())
    b = train_reinforce(env, pol, _small_config(threads=3))
    assert len(a) == 4
    assert [r.theta.tolist() for r in a.records] == [r.theta.tolist() for r in b.records]
    assert np.array_equal(a.means(), b.means())
    frozen = ~pol.theta.learnable_mask
    assert np.array_equal(a.policy.theta.values[frozen], pol.theta.values[frozen])


def test_reinforce_zero_step_keeps_theta():
    env, pol = fixtures.mismatch_env(), fixtures.mismatch_policy()
    curve = train_reinforce(env, pol, _small_config(eta=0.0, max_iterations=2))
    assert all(np.array_equal(r.theta, pol.theta.learnable_values()) for r in curve.records)


def test_dpg_runs_and_moves_towards_true_gain():
    env, pol = fixtures.mismatch_env(), fixtures.mismatch_policy()
    curve = train_dpg(env, pol, _small_config(eta=1.5, max_iterations=8, update_every=50, batch_size=200))
    assert curve.critic is not None
    # the model's B = 0.5 underestimates the plant's b = 1; the actor should raise it
    assert curve.final.theta[0] > 0.5


def test_failure_carries_partial_curve():
    class Exploding(Environment):
        n = 1
        m = 1

        def sample_initial(self, rng):
            return np.zeros(1)

        def step(self, s, a, rng):
            raise RuntimeError("plant fault")
    with pytest.raises(LearnerFailure) as exc:
        train_reinforce(Exploding(), fixtures.mismatch_policy(), _small_config())
    assert len(exc.value.curve) == 0
