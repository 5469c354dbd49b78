import numpy as np
import pytest
from hypothesis import given, strategies as st

from mpcrl.agents import MlpPolicy
from mpcrl.harness import fixtures
from mpcrl.learners.offline import (
    BCConfig,
    DemoDataset,
    bc_evaluate,
    bc_loss,
    collect_expert,
    identifiability,
    train_bc,
)


def _affine(W, b):
    net = MlpPolicy(1, 1, ())
    return net.with_theta(net.theta.with_block("W0", [W]).with_block("b0", [b]))


def test_loss_and_gradient_on_affine_policy():
    S = np.array([[0.0], [1.0], [2.0]])
    A = 3.0 * S + 1.0
    ds = DemoDataset(S, A)
    pol = _affine(2.0, 0.0)
    ev = bc_evaluate(pol, ds)
    # residuals -(s + 1): 1, 4, 9 squared; gradient 2 mean(r * [s, 1])
    assert ev.loss == pytest.approx(14 / 3)
    assert np.allclose(ev.grad, [2 * (-2 - 6) / 3, 2 * (-1 - 2 - 3) / 3])


def test_bc_recovers_affine_expert_exactly():
    rng = np.random.default_rng(0)
    S = rng.uniform(-1, 1, (40, 1))
    ds = DemoDataset(S, -0.8 * S + 0.3, train_idx=np.arange(30), test_idx=np.arange(30, 40))
    res = train_bc(ds, _affine(0.0, 0.0))
    assert np.allclose(res.final.theta, [-0.8, 0.3], atol=1e-6)
    assert res.final.heldout_mse <= 1e-12
    assert res.identifiability.identified
    mses = [r.train_mse for r in res.records]
    assert all(b <= a for a, b in zip(mses, mses[1:]))


def test_bc_recovers_mpc_cost_weight():
    env = fixtures.bc_env()
    expert = fixtures.bc_policy(q=fixtures.BC_EXPERT_Q)
    ds = collect_expert(env, expert, 60, 5, T=20, holdout_fraction=0.25)
    res = train_bc(ds, fixtures.bc_policy(q=0.5))
    assert res.final.theta[0] == pytest.approx(fixtures.BC_EXPERT_Q, abs=1e-3)
    assert res.final.heldout_mse <= 1e-8


def test_low_diversity_is_flagged():
    ds = DemoDataset(np.ones((5, 1)), np.full((5, 1), 2.0))
    ev = bc_evaluate(_affine(0.0, 0.0), ds)
    rep = identifiability(ev.jacobians, ds.states)
    assert rep.low_diversity and rep.rank == 1 and not rep.identified


def test_collect_expert_split_and_determinism():
    env, expert = fixtures.bc_env(), fixtures.bc_policy()
    a = collect_expert(env, expert, 25, 11, T=10, holdout_fraction=0.2)
    b = collect_expert(env, expert, 25, 11, T=10, holdout_fraction=0.2)
    assert len(a) == 25 and a.test_idx.size == 5
    assert np.array_equal(a.states, b.states) and np.array_equal(a.test_idx, b.test_idx)
    with pytest.raises(ValueError):
        collect_expert(env, expert, 0, 1)
    with pytest.raises(ValueError):
        collect_expert(env, expert, 5, 1, holdout_fraction=1.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=12), st.integers(0, 3))
def test_csv_round_trip(vals, n_test):
    k = len(vals) // 3
    S = np.array(vals[:2 * k]).reshape(k, 2)
    A = np.array(vals[2 * k:3 * k]).reshape(k, 1)
    n_test = min(n_test, k)
    ds = DemoDataset(S, A, "lqr", 7, np.arange(n_test, k), np.arange(n_test))
    back = DemoDataset.from_csv(ds.to_csv())
    assert np.array_equal(back.states, ds.states) and np.array_equal(back.actions, ds.actions)
    assert np.array_equal(back.test_idx, ds.test_idx) and back.expert == "lqr" and back.seed == 7


def test_dataset_validation():
    with pytest.raises(ValueError):
        DemoDataset(np.zeros((3, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        DemoDataset(np.zeros((3, 1)), np.zeros((3, 1)), train_idx=[0, 1], test_idx=[1])
    with pytest.raises(ValueError):
        DemoDataset.from_csv("s0,a0,split\n1,2,train\n")
    with pytest.raises(ValueError):
        bc_loss(_affine(0, 0), DemoDataset(np.zeros((2, 1)), np.zeros((2, 1))), indices=[])


def test_config_validation():
    assert len(BCConfig(max_iterations=-1, step0=0, backtrack=1.0, armijo=0).validate()) == 4
    with pytest.raises(ValueError):
        train_bc(DemoDataset(np.zeros((2, 1)), np.zeros((2, 1))), _affine(0, 0), BCConfig(step0=-1))
