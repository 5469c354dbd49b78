"""Implicit differentiation of the MPC policy through its KKT system.

With z = (y, nu, lam) the residual is

    psi(s, z; theta) = [ P y + p + E'nu + G'lam ;  E y - e ;  lam * (G y - w) ]

and, where the KKT Jacobian is nonsingular (LICQ, SOSC, strict
complementarity), dz/dtheta = -(d psi/dz)^{-1} d psi/dtheta.  The policy
Jacobian is the first m rows, i.e. the u_{0|t} block of the primal ordering.
The theta-derivatives are analytic: the QP data are affine in theta, so
``tangent_qp`` gives them exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .ocp.problem import OCPSpec, QPData, assemble_kkt, tangent_qp
from .ocp.solver import OCPSolution, Status, solve_ocp
from .ocp.theta import ThetaVector

ATOL_ACTIVE = 1e-7
LAMBDA_MIN = 1e-7
RCOND_MIN = 1e-13


class SensitivityError(Exception):
    """The policy Jacobian does not exist (or is not trustworthy) at this state."""


class SingularKKTMatrix(SensitivityError, np.linalg.LinAlgError):
    """KKT Jacobian is singular: LICQ or SOSC fails at the solution."""


class NonOptimalSolution(SensitivityError, ValueError):
    """Only Optimal solutions of the hard-constrained OCP are differentiated."""


class StrictComplementarityViolation(SensitivityError, ValueError):
    """Weakly active constraints present; the policy is not differentiable there."""


class ActiveSetChanged(RuntimeError):
    """Finite-difference perturbation crossed an active-set boundary."""


@dataclass(frozen=True)
class ActiveSetReport:
    active: np.ndarray
    inactive: np.ndarray
    weakly_active: np.ndarray

    @property
    def strict_complementarity(self) -> bool:
        return self.weakly_active.size == 0

    def signature(self) -> tuple[int, ...]:
        return tuple(self.active.tolist())


@dataclass(frozen=True)
class PolicyJacobian:
    matrix: np.ndarray         # (m, n_learnable)
    state: np.ndarray
    condition: float
    labels: tuple[str, ...] = ()


def split_z(qp: QPData, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    if z.size != qp.nv + qp.ne + qp.ni:
        raise ValueError(f"z has {z.size} entries, expected {qp.nv + qp.ne + qp.ni}")
    return z[:qp.nv], z[qp.nv:qp.nv + qp.ne], z[qp.nv + qp.ne:]


def stack_z(sol: OCPSolution) -> np.ndarray:
    return np.concatenate([sol.y, sol.nu, sol.lam])


def lagrangian(spec: OCPSpec, theta: ThetaVector, s, z) -> float:
    """Objective plus nu'(equality residuals) plus lam'(inequality values)."""
    qp = assemble_kkt(spec, theta, s)
    y, nu, lam = split_z(qp, z)
    return qp.objective(y) + float(nu @ (qp.E @ y - qp.e)) + float(lam @ (qp.G @ y - qp.w))


def kkt_residual(spec: OCPSpec, theta: ThetaVector, s, z) -> np.ndarray:
    qp = assemble_kkt(spec, theta, s)
    y, nu, lam = split_z(qp, z)
    return np.concatenate([
        qp.P @ y + qp.p + qp.E.T @ nu + qp.G.T @ lam,
        qp.E @ y - qp.e,
        lam * (qp.G @ y - qp.w),
    ])


def classify_active(solution: OCPSolution, atol: float = ATOL_ACTIVE, lambda_min: float = LAMBDA_MIN) -> ActiveSetReport:
    qp = solution.qp
    h = qp.G @ solution.y - qp.w
    lam = solution.lam
    touching = np.abs(h) <= atol
    strong = lam > lambda_min
    active = np.flatnonzero(touching & strong)
    weak = np.flatnonzero(touching & ~strong)
    inactive = np.flatnonzero(~touching)
    return ActiveSetReport(active, inactive, weak)


def _theta_jacobian(spec: OCPSpec, s, sol: OCPSolution, cols: np.ndarray, report: ActiveSetReport) -> np.ndarray:
    """d psi / d theta for the given flat coordinates, in the row-scaled form."""
    qp = sol.qp
    y, nu, lam = sol.y, sol.nu, sol.lam
    out = np.zeros((qp.nv + qp.ne + qp.ni, cols.size))
    act = report.active
    for c, j in enumerate(cols):
        tq = tangent_qp(spec, int(j)).at(s)
        out[:qp.nv, c] = tq.P @ y + tq.p + tq.E.T @ nu + tq.G.T @ lam
        out[qp.nv:qp.nv + qp.ne, c] = tq.E @ y - tq.e
        # active rows are divided by lam_i; inactive rows vanish (lam_i = 0)
        out[qp.nv + qp.ne + act, c] = (tq.G @ y - tq.w)[act]
    return out


def kkt_jacobian(qp: QPData, report: ActiveSetReport) -> np.ndarray:
    """d psi / dz at the exact KKT point of the classified active set.

    Complementarity rows are scaled by 1/lam_i (active) or 1/h_i
    (inactive); left-scaling leaves the solution of the IFT system unchanged
    and keeps the condition estimate meaningful.
    """
    nv, ne, ni = qp.nv, qp.ne, qp.ni
    nz = nv + ne + ni
    K = np.zeros((nz, nz))
    K[:nv, :nv] = qp.P
    K[:nv, nv:nv + ne] = qp.E.T
    K[:nv, nv + ne:] = qp.G.T
    K[nv:nv + ne, :nv] = qp.E
    base = nv + ne
    K[base + report.active, :nv] = qp.G[report.active]
    K[base + report.inactive, base + report.inactive] = 1.0
    return K


def _factor(K: np.ndarray):
    lu, piv, info = lapack.dgetrf(K)
    if info > 0:
        raise SingularKKTMatrix("KKT matrix is exactly singular (LICQ/SOSC violated)")
    anorm = float(np.max(np.sum(np.abs(K), axis=0))) if K.size else 1.0
    rcond, _ = lapack.dgecon(lu, anorm, norm="1")
    if not rcond >= RCOND_MIN:
        raise SingularKKTMatrix(f"KKT matrix is numerically singular (rcond={rcond:.2e}); LICQ/SOSC violated")
    return lu, piv, 1.0 / rcond


def solution_sensitivity(spec: OCPSpec, theta: ThetaVector, s, solution: OCPSolution,
                         cols: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Full dz*/dtheta (rows in z order) for learnable coordinates; one factorisation."""
    if solution.status != Status.OPTIMAL:
        raise NonOptimalSolution(f"sensitivities need an Optimal solution, got {solution.status.value}")
    report = classify_active(solution)
    if not report.strict_complementarity:
        raise StrictComplementarityViolation(
            f"weakly active rows {report.weakly_active.tolist()} at s={np.asarray(s).tolist()}")
    s = np.asarray(s, dtype=float)
    cols = theta.learnable_index if cols is None else np.asarray(cols)
    K = kkt_jacobian(solution.qp, report)
    lu, piv, cond = _factor(K)
    rhs = -_theta_jacobian(spec, s, solution, cols, report)
    if cols.size == 0:
        return np.zeros((K.shape[0], 0)), cond
    X, info = lapack.dgetrs(lu, piv, rhs)
    return X, cond


def policy_jacobian(spec: OCPSpec, theta: ThetaVector, s, solution: OCPSolution | None = None) -> PolicyJacobian:
    """d u*_{0|t} / d theta over the learnable coordinates (m x n_learnable)."""
    if solution is None:
        solution = solve_ocp(spec, theta, s)
    X, cond = solution_sensitivity(spec, theta, s, solution)
    return PolicyJacobian(X[:spec.m].copy(), np.asarray(s, dtype=float), cond, tuple(theta.learnable_labels()))


def fd_policy_jacobian(spec: OCPSpec, theta: ThetaVector, s, delta: float = 1e-5) -> np.ndarray:
    """Central differences of u*_{0|t} in each learnable coordinate (m x len(theta)).

    Frozen coordinates get zero columns.  Raises :class:`ActiveSetChanged`
    when a perturbed problem has a different active set, so a comparison is
    skipped rather than silently wrong.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    base = solve_ocp(spec, theta, s)
    if base.status != Status.OPTIMAL:
        raise ActiveSetChanged(f"base problem not Optimal ({base.status.value})")
    sig = classify_active(base).signature()
    out = np.zeros((spec.m, len(theta)))
    vals = theta.values
    for j in theta.learnable_index:
        us = []
        for sign in (1.0, -1.0):
            v = vals.copy()
            v[j] += sign * delta
            sol = solve_ocp(spec, theta.with_values(v), s)
            if sol.status != Status.OPTIMAL or classify_active(sol).signature() != sig:
                raise ActiveSetChanged(f"active set changed when perturbing coordinate {j}")
            us.append(sol.u0)
        out[:, j] = (us[0] - us[1]) / (2.0 * delta)
    return out
