import numpy as np
import pytest
from hypothesis import given, strategies as st

from mpcrl.harness import fixtures
from mpcrl.ocp import (
    NonConvexOCPError,
    OCPDimensionError,
    OCPSpec,
    Status,
    assemble_kkt,
    kkt_components,
    mpc_action,
    riccati_lqr,
    riccati_stationary,
    solve_ocp,
)
from mpcrl.ocp import backend


def test_dimension_counting():
    spec = OCPSpec(n=1, m=1, H=1)
    qp = assemble_kkt(spec, spec.theta(R=2.0, Q=0.0, P=[[0.0]]), np.zeros(1))
    # u_0 followed by x_1; the u block is the leading m x m block
    assert qp.nv == 2 and qp.P[0, 0] == pytest.approx(2.0)
    spec = OCPSpec(n=2, m=1, H=3)
    assert assemble_kkt(spec, spec.theta(), np.zeros(2)).nv == 9
    spec = OCPSpec(n=1, m=1, H=2, input_box=True)
    assert assemble_kkt(spec, spec.theta(), np.zeros(1)).ni == 4


def test_dimension_mismatch_rejected():
    spec = OCPSpec(n=2, m=1, H=2)
    with pytest.raises(OCPDimensionError):
        assemble_kkt(spec, spec.theta(), np.zeros(3))
    with pytest.raises(OCPDimensionError):
        OCPSpec(n=1, m=1, H=0)


def test_unconstrained_scalar_stationarity():
    # 1/2 u^2 + S s u  ->  u* = -S s; with S = -theta this is u* = theta s
    inst = fixtures.scalar_fixture(S=-0.8, s=2.0)
    sol = solve_ocp(inst.spec, inst.theta, inst.s)
    assert sol.status == Status.OPTIMAL
    assert sol.u0[0] == pytest.approx(1.6, abs=1e-12)


def test_lower_bound_active_kkt():
    # min 1/2 u^2 s.t. u >= 1  ->  u* = 1, lambda* = 1
    spec = OCPSpec(n=1, m=1, H=1, input_box=True)
    theta = spec.theta(Q=0.0, R=1.0, P=[[0.0]], A=[[0.0]], B=[[0.0]], u_lo=1.0, u_hi=5.0)
    for s in (-3.0, 0.0, 2.5):
        sol = solve_ocp(spec, theta, np.array([s]))
        assert sol.u0[0] == pytest.approx(1.0, abs=1e-10)
        assert np.max(sol.lam) == pytest.approx(1.0, abs=1e-8)


def test_lqr_fixture_matches_riccati():
    inst = fixtures.lqr_fixture()
    K, _ = riccati_lqr(fixtures.LQR_A, fixtures.LQR_B, np.diag(fixtures.LQR_Q), np.diag(fixtures.LQR_R),
                       np.diag(fixtures.LQR_Q), fixtures.LQR_H)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.uniform(-2, 2, 2)
        u = mpc_action(inst.spec, inst.theta, s)
        assert np.linalg.norm(u + K @ s) <= 1e-4 * np.linalg.norm(K @ s)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 8))
def test_terminal_riccati_weight_gives_exact_lqr(s0, s1, H):
    A, B = fixtures.LQR_A, fixtures.LQR_B
    Q, R = np.diag(fixtures.LQR_Q), np.diag(fixtures.LQR_R)
    K, P = riccati_stationary(A, B, Q, R)
    spec = OCPSpec(n=2, m=1, H=H)
    theta = spec.theta(Q=fixtures.LQR_Q, R=fixtures.LQR_R, P=P, A=A, B=B)
    s = np.array([s0, s1])
    assert np.allclose(mpc_action(spec, theta, s), -K @ s, atol=1e-8)


def test_symmetric_regulation_at_origin():
    inst = fixtures.lqr_fixture(H=10)
    assert np.allclose(mpc_action(inst.spec, inst.theta, np.zeros(2)), 0.0, atol=1e-12)


def test_active_bound_clips_exactly_with_positive_multiplier():
    inst = fixtures.active_bound_fixture()
    sol = solve_ocp(inst.spec, inst.theta, inst.s)
    assert sol.u0[0] == 1.0 or abs(sol.u0[0] - 1.0) <= 1e-12
    # lambda = u_lo + S s = 2 on the u >= u_lo row
    assert np.max(sol.lam) == pytest.approx(2.0, abs=1e-8)


def test_riccati_examples():
    K, _ = riccati_lqr(np.eye(2), np.zeros((2, 1)), np.eye(2), np.eye(1), np.eye(2), 10)
    assert np.allclose(K, 0.0)
    Ks, _ = riccati_lqr(np.zeros((2, 2)), np.ones((2, 1)), np.eye(2), np.eye(1), np.eye(2), 5, return_all=True)
    assert all(np.allclose(k, 0.0) for k in Ks)
    _, P = riccati_stationary(1.0, 1.0, 1.0, 1.0)
    # scalar DARE p = 1 + p - p^2 / (1 + p)  ->  p^2 - p - 1 = 0
    assert P[0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-10)
    with pytest.raises(ValueError):
        riccati_lqr(1.0, 1.0, 1.0, -1.0, 1.0, 3)


def _random_problem(rng, state_box=False):
    n, m, H = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 6))
    spec = OCPSpec(n=n, m=m, H=H, input_box=True, state_box=state_box)
    A = rng.normal(size=(n, n))
    A /= max(1.0, np.max(np.abs(np.linalg.eigvals(A))))
    theta = spec.theta(Q=rng.uniform(0.1, 2, n), R=rng.uniform(0.1, 2, m), A=A, B=rng.normal(size=(n, m)),
                       u_lo=-rng.uniform(0.2, 1, m), u_hi=rng.uniform(0.2, 1, m), x_lo=-5.0, x_hi=5.0)
    return spec, theta, rng.uniform(-2, 2, n)


@given(st.integers(0, 100_000), st.booleans())
def test_kkt_conditions_hold_at_optimal_solutions(seed, state_box):
    spec, theta, s = _random_problem(np.random.default_rng(seed), state_box)
    sol = solve_ocp(spec, theta, s)
    assert sol.status in (Status.OPTIMAL, Status.SOFT_FALLBACK)
    assert np.array_equal(sol.x_seq[0], s)
    if sol.status == Status.OPTIMAL:
        comps = kkt_components(sol.qp, sol.y, sol.nu, sol.lam)
        assert all(v <= spec.tol for v in comps.values()), comps
        assert np.all(sol.lam >= -1e-9)


@given(st.integers(0, 100_000))
def test_inactive_constraint_does_not_move_solution(seed):
    rng = np.random.default_rng(seed)
    spec, theta, s = _random_problem(rng)
    free = OCPSpec(n=spec.n, m=spec.m, H=spec.H)
    free_theta = free.theta(Q=theta["stage_q"], R=theta["stage_r"], A=theta["dyn_A"].reshape(spec.n, spec.n),
                            B=theta["dyn_B"].reshape(spec.n, spec.m), P=theta["terminal_p"].reshape(spec.n, spec.n))
    u_free = solve_ocp(free, free_theta, s).u_seq
    wide = spec.theta(Q=theta["stage_q"], R=theta["stage_r"], A=theta["dyn_A"].reshape(spec.n, spec.n),
                      B=theta["dyn_B"].reshape(spec.n, spec.m), P=theta["terminal_p"].reshape(spec.n, spec.n),
                      u_lo=np.min(u_free) - 1.0, u_hi=np.max(u_free) + 1.0)
    u_box = solve_ocp(spec, wide, s).u_seq
    assert np.max(np.abs(u_box - u_free)) <= spec.tol


def test_convexity_guard():
    spec = OCPSpec(n=1, m=1, H=2)
    with pytest.raises(NonConvexOCPError):
        solve_ocp(spec, spec.theta(Q=-1.0, P=[[-1.0]]), np.ones(1))


def test_state_box_infeasible_falls_back_to_soft_constraints():
    spec = OCPSpec(n=1, m=1, H=2, input_box=True, state_box=True)
    theta = spec.theta(A=[[1.0]], B=[[1.0]], u_lo=-0.1, u_hi=0.1, x_lo=-1.0, x_hi=1.0)
    sol = solve_ocp(spec, theta, np.array([3.0]))
    assert sol.status == Status.SOFT_FALLBACK
    assert sol.u0[0] == pytest.approx(-0.1, abs=1e-6)


def test_inconsistent_equalities_are_infeasible():
    spec = OCPSpec(n=1, m=1, H=1, eq_Ex=[[0.0]], eq_Eu=[[0.0]])
    sol = solve_ocp(spec, spec.theta(eq_d=[1.0]), np.zeros(1))
    assert sol.status == Status.INFEASIBLE
    # a state-only equality at the first stage is a condition on the measured state
    spec = OCPSpec(n=1, m=1, H=2, eq_Ex=[[1.0]], eq_Eu=[[0.0]])
    assert solve_ocp(spec, spec.theta(A=[[1.0]], B=[[1.0]], eq_d=[0.5]), np.array([0.5])).status == Status.OPTIMAL
    assert solve_ocp(spec, spec.theta(A=[[1.0]], B=[[1.0]], eq_d=[0.5]), np.array([0.7])).status == Status.INFEASIBLE


@pytest.mark.skipif("compiled" not in backend.BACKENDS, reason="compiled kernel not built")
@given(st.integers(0, 100_000))
def test_compiled_and_python_kernels_agree(seed):
    spec, theta, s = _random_problem(np.random.default_rng(seed), True)
    qp = assemble_kkt(spec, theta, s)
    a = backend.solve_qp(qp.P, qp.p, qp.E, qp.e, qp.G, qp.w, 1e-9, 100, backend="python")
    b = backend.solve_qp(qp.P, qp.p, qp.E, qp.e, qp.G, qp.w, 1e-9, 100, backend="compiled")
    assert a[5] == b[5]
    if a[5] == backend.OPTIMAL:
        assert np.allclose(a[0], b[0], atol=1e-7)


def test_pure_python_backend_selectable_by_environment():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-c", "from mpcrl.ocp import BACKEND; print(BACKEND)"],
                         capture_output=True, text=True, env={"MPCRL_PURE_PYTHON": "1", "PATH": ""}, check=True)
    assert out.stdout.strip() == "python"
