"""Documented problem instances shared by the verification commands and the tests.

Every fixture is a plain function so the values live in one place:

* ``lqr_fixture``: 2-state unconstrained regulator with its Riccati oracle data.
* ``scalar_fixture``: H = 1, n = m = 1, stage cost 1/2 u^2 + S s u with S
  learnable, so u* = -S s and du*/dS = -s.
* ``active_bound_fixture``: the same problem with u >= u_lo binding.
* ``licq_fixture``: an input bound duplicated as a polytope row, saturated.
* ``random_strict_instances``: the FD-vs-IFT batch (mixed active sets).
* ``mismatch_env`` / ``mismatch_policy``: linear-Gaussian plant with a biased
  input gain in the controller's model.
* ``bc_fixture``: identifiable scalar cloning problem.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..agents import MpcPolicy
from ..mdp.envs import LinearGaussianEnv
from ..ocp.problem import OCPSpec
from ..ocp.solver import Status, solve_ocp
from ..ocp.theta import ThetaVector
from ..rng import AUX_LANE, RNGStream
from ..sensitivity import ActiveSetChanged, classify_active, fd_policy_jacobian

# 2-state LQR fixture: discretised double integrator with a mild drift
LQR_A = np.array([[1.0, 0.1], [0.0, 1.0]])
LQR_B = np.array([[0.005], [0.1]])
LQR_Q = np.array([1.0, 0.5])
LQR_R = np.array([0.1])
LQR_H = 50


@dataclass
class Instance:
    spec: OCPSpec
    theta: ThetaVector
    s: np.ndarray
    label: str = ""


def lqr_fixture(H: int = LQR_H) -> Instance:
    spec = OCPSpec(n=2, m=1, H=H)
    theta = spec.theta(Q=LQR_Q, R=LQR_R, A=LQR_A, B=LQR_B)
    return Instance(spec, theta, np.zeros(2), "lqr")


def scalar_fixture(S: float = -0.7, s: float = 2.0) -> Instance:
    spec = OCPSpec(n=1, m=1, H=1)
    theta = spec.theta(Q=1.0, R=1.0, S=S, P=[[0.0]], A=[[0.0]], B=[[0.0]], learnable=["stage_cross"])
    return Instance(spec, theta, np.array([s]), "scalar")


def active_bound_fixture(S: float = 0.5, s: float = 2.0, u_lo: float = 1.0) -> Instance:
    # unconstrained optimum -S s = -1 lies below u_lo = 1, so u* = 1 and lambda = u_lo + S s
    spec = OCPSpec(n=1, m=1, H=1, input_box=True)
    theta = spec.theta(Q=1.0, R=1.0, S=S, P=[[0.0]], A=[[0.0]], B=[[0.0]], u_lo=u_lo, u_hi=10.0,
                       learnable=["stage_cross"])
    return Instance(spec, theta, np.array([s]), "active_bound")


def licq_fixture(s: float = 3.0, H: int = 1, learnable=("stage_cross", "stage_r")) -> Instance:
    """u <= 1 stated twice (box and polytope row) with the bound binding."""
    spec = OCPSpec(n=1, m=1, H=H, input_box=True, poly_Cx=[[0.0]], poly_Cu=[[1.0]])
    theta = spec.theta(Q=1.0, R=1.0, S=-1.0, A=[[0.9]], B=[[0.5]], u_lo=-10.0, u_hi=1.0, poly_d=[1.0],
                       learnable=list(learnable))
    return Instance(spec, theta, np.array([s]), "licq")


def random_instance(rng: np.random.Generator) -> Instance:
    n = int(rng.integers(1, 4))
    m = int(rng.integers(1, 3))
    H = int(rng.integers(1, 5))
    state_box = bool(rng.random() < 0.4)
    spec = OCPSpec(n=n, m=m, H=H, input_box=True, state_box=state_box)
    A = rng.normal(size=(n, n))
    A *= rng.uniform(0.5, 1.1) / max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))
    ub = rng.uniform(0.3, 1.5, m)
    lb = -rng.uniform(0.3, 1.5, m)
    theta = spec.theta(
        Q=rng.uniform(0.5, 2.0, n), R=rng.uniform(0.2, 2.0, m), S=0.1 * rng.normal(size=(n, m)),
        q=0.1 * rng.normal(size=n), r=0.1 * rng.normal(size=m),
        A=A, B=rng.normal(size=(n, m)), c=0.05 * rng.normal(size=n),
        u_lo=lb, u_hi=ub, x_lo=-rng.uniform(2.0, 4.0, n), x_hi=rng.uniform(2.0, 4.0, n),
    )
    theta = theta.with_flags([b.name for b in theta.blocks])
    s = rng.uniform(-3.0, 3.0, n)
    return Instance(spec, theta, s, f"random n={n} m={m} H={H}")


def random_strict_instances(count: int, seed: int = 0, delta: float = 1e-6, max_tries: int = 20):
    """``count`` random instances whose optimum is strictly complementary and
    whose active set survives the +-delta perturbations used by the FD oracle.

    Yields (instance, fd_jacobian, n_active).
    """
    rng = RNGStream.from_seed(seed).generator(AUX_LANE)
    found = 0
    tries = 0
    while found < count:
        tries += 1
        if tries > max_tries * count:
            raise RuntimeError(f"only {found} usable random instances in {tries} draws")
        inst = random_instance(rng)
        sol = solve_ocp(inst.spec, inst.theta, inst.s)
        if sol.status != Status.OPTIMAL:
            continue
        rep = classify_active(sol)
        if not rep.strict_complementarity:
            continue
        try:
            fd = fd_policy_jacobian(inst.spec, inst.theta, inst.s, delta)
        except ActiveSetChanged:
            continue
        found += 1
        yield inst, fd[:, inst.theta.learnable_mask], len(rep.active)


# -- mismatch environment ------------------------------------------------------

MISMATCH_GAMMA = 0.95
MISMATCH_T = 30


def mismatch_env() -> LinearGaussianEnv:
    """True input gain 1.0; the controller's model starts at 0.5."""
    return LinearGaussianEnv([[1.05]], [[1.0]], Q=[[1.0]], R=[[0.1]], noise_std=0.1, x0_box=1.0,
                             action_bound=2.0)


def mismatch_policy(learnable=("dyn_B",), B: float = 0.5, Q: float = 1.0, R: float = 0.1, H: int = 5) -> MpcPolicy:
    spec = OCPSpec(n=1, m=1, H=H, input_box=True)
    theta = spec.theta(Q=[Q], R=[R], A=[[1.05]], B=[[B]], u_lo=-2.0, u_hi=2.0, learnable=list(learnable))
    theta = theta.with_bounds("dyn_B", 0.05, 5.0).with_bounds("stage_q", 0.1, 5.0).with_bounds("stage_r", 0.02, 2.0)
    return MpcPolicy(spec, theta)


# cost-weight search box for BO on the mismatch env (B frozen at 0.5)
BO_LOWER = np.array([0.1, 0.02])
BO_UPPER = np.array([5.0, 2.0])


# -- behavioural cloning -------------------------------------------------------

BC_EXPERT_Q = 2.0


def bc_env() -> LinearGaussianEnv:
    return LinearGaussianEnv([[1.05]], [[1.0]], Q=[[1.0]], R=[[1.0]], noise_std=0.1, x0_box=1.0, action_bound=5.0)


def bc_policy(q: float = BC_EXPERT_Q, learnable=("stage_q",)) -> MpcPolicy:
    """Scalar MPC with a fixed terminal weight, so the stage weight alone shapes the gain."""
    spec = OCPSpec(n=1, m=1, H=5, input_box=True)
    theta = spec.theta(Q=[q], R=[1.0], P=[[1.0]], A=[[1.05]], B=[[1.0]], u_lo=-5.0, u_hi=5.0,
                       learnable=list(learnable))
    return MpcPolicy(spec, theta.with_bounds("stage_q", 1e-3, 100.0))
