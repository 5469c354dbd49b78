"""OCP solution and the receding-horizon MPC control law."""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import backend
from .problem import OCPSpec, QPData, assemble_kkt, inf_norm
from .theta import ThetaVector

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    SOFT_FALLBACK = "SoftFallback"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


class OCPInfeasibleError(RuntimeError):
    def __init__(self, s: np.ndarray, detail: str = ""):
        super().__init__(f"OCP infeasible at state {np.asarray(s).tolist()} {detail}".rstrip())
        self.state = np.asarray(s)


@dataclass
class OCPSolution:
    u_seq: np.ndarray          # (H, m)
    x_seq: np.ndarray          # (H + 1, n), x_seq[0] is the queried state
    nu: np.ndarray             # equality multipliers (dynamics rows first within each stage)
    lam: np.ndarray            # inequality multipliers
    status: Status
    kkt_residual_norm: float
    iterations: int
    y: np.ndarray              # primal vector in assembly order
    qp: QPData
    objective: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.SOFT_FALLBACK)

    @property
    def u0(self) -> np.ndarray:
        return self.u_seq[0].copy()


def kkt_components(qp: QPData, y, nu, lam) -> dict[str, float]:
    h = qp.G @ y - qp.w
    return {
        "stationarity": inf_norm(qp.P @ y + qp.p + qp.E.T @ nu + qp.G.T @ lam),
        "equality": inf_norm(qp.E @ y - qp.e),
        "primal_infeasibility": float(np.max(np.maximum(h, 0.0), initial=0.0)),
        "dual_infeasibility": float(np.max(np.maximum(-lam, 0.0), initial=0.0)),
        "complementarity": inf_norm(lam * h),
    }


def kkt_norm(qp: QPData, y, nu, lam) -> float:
    return max(kkt_components(qp, y, nu, lam).values())


def _polish(qp: QPData, y, nu, lam, t, tol):
    """Re-solve with the identified active set as equalities for an exact point."""
    act = lam > t
    GA = qp.G[act]
    nv, ne, na = qp.nv, qp.ne, int(act.sum())
    K = np.zeros((nv + ne + na, nv + ne + na))
    K[:nv, :nv] = qp.P
    K[:nv, nv:nv + ne] = qp.E.T
    K[:nv, nv + ne:] = GA.T
    K[nv:nv + ne, :nv] = qp.E
    K[nv + ne:, :nv] = GA
    rhs = np.concatenate([-qp.p, qp.e, qp.w[act]])
    try:
        with warnings.catch_warnings():
            # a singular reduced KKT matrix is an expected outcome (degenerate active set)
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(K, check_finite=False)
        if np.min(np.abs(np.diag(lu[0]))) < 1e-14 * max(1.0, np.max(np.abs(K))):
            return None
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        sol += sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
    except (sla.LinAlgError, ValueError):
        return None
    yp, nup, lamA = sol[:nv], sol[nv:nv + ne], sol[nv + ne:]
    if na and np.min(lamA) < -tol:
        return None
    inactive = ~act
    if np.any(qp.G[inactive] @ yp - qp.w[inactive] > tol):
        return None
    lam_p = np.zeros_like(lam)
    lam_p[act] = np.maximum(lamA, 0.0)
    return yp, nup, lam_p


def _soft_qp(qp: QPData, rho: float):
    """Append one L1-penalised slack per state-involving inequality row."""
    idx = np.flatnonzero(qp.soft_rows)
    ns, nv, ni = idx.size, qp.nv, qp.ni
    P = np.zeros((nv + ns, nv + ns))
    P[:nv, :nv] = qp.P
    p = np.concatenate([qp.p, np.full(ns, rho)])
    E = np.hstack([qp.E, np.zeros((qp.ne, ns))])
    G = np.zeros((ni + ns, nv + ns))
    G[:ni, :nv] = qp.G
    G[idx, nv + np.arange(ns)] = -1.0
    G[ni + np.arange(ns), nv + np.arange(ns)] = -1.0
    w = np.concatenate([qp.w, np.zeros(ns)])
    return P, p, E, w, G


def _equalities_consistent(qp: QPData) -> bool:
    if qp.ne == 0:
        return True
    sol, *_ = np.linalg.lstsq(qp.E, qp.e, rcond=None)
    return inf_norm(qp.E @ sol - qp.e) <= 1e-8 * max(1.0, inf_norm(qp.e))


def _package(spec: OCPSpec, s, qp: QPData, y, nu, lam, status, iters, res=None) -> OCPSolution:
    n, m, H = spec.n, spec.m, spec.H
    blocks = y[:H * (m + n)].reshape(H, m + n)
    u_seq = blocks[:, :m].copy()
    x_seq = np.vstack([np.asarray(s, dtype=float).reshape(1, n), blocks[:, m:]])
    if res is None:
        res = kkt_norm(qp, y, nu, lam)
    return OCPSolution(u_seq, x_seq, nu, lam, status, res, iters, y, qp, qp.objective(y))


def solve_qp_data(spec: OCPSpec, qp: QPData, s, tol: float | None = None) -> OCPSolution:
    tol = spec.tol if tol is None else tol
    if tol <= 0:
        raise ValueError("tol must be positive")
    if spec.n_eq and not _equalities_consistent(qp):
        return _package(spec, s, qp, np.zeros(qp.nv), np.zeros(qp.ne), np.zeros(qp.ni), Status.INFEASIBLE, 0)
    if qp.ni:
        # if the equality-constrained minimiser is feasible it is optimal with lam = 0
        y, nu, _, _, _, code, _ = backend.solve_qp(qp.P, qp.p, qp.E, qp.e, qp.G[:0], qp.w[:0], tol, spec.max_iter)
        if code == backend.OPTIMAL and np.all(qp.G @ y < qp.w):
            sol = _package(spec, s, qp, y, nu, np.zeros(qp.ni), Status.OPTIMAL, 0)
            if sol.kkt_residual_norm <= tol:
                return sol
    y, nu, lam, t, iters, code, _ = backend.solve_qp(qp.P, qp.p, qp.E, qp.e, qp.G, qp.w, tol, spec.max_iter)
    if code == backend.OPTIMAL:
        res = None
        if qp.ni:
            polished = _polish(qp, y, nu, lam, t, tol)
            if polished is not None:
                res_p = kkt_norm(qp, *polished)
                if res_p <= tol:
                    (y, nu, lam), res = polished, res_p
        sol = _package(spec, s, qp, y, nu, lam, Status.OPTIMAL, iters, res)
        if sol.kkt_residual_norm <= tol:
            return sol
        code = backend.MAX_ITER
    first = Status.MAX_ITER if code == backend.MAX_ITER else Status.INFEASIBLE
    if qp.soft_rows.any():
        P, p, E, w, G = _soft_qp(qp, spec.soft_penalty)
        ys, nus, lams, ts, it2, code2, _ = backend.solve_qp(P, p, E, qp.e, G, w, tol, spec.max_iter)
        if code2 == backend.OPTIMAL:
            log.debug("soft-constraint fallback used at s=%s", s)
            soft = QPData(P, p, 0.0, E, qp.e, G, w, np.zeros(G.shape[0], dtype=bool))
            return _package(spec, s, qp, ys[:qp.nv], nus, lams[:qp.ni], Status.SOFT_FALLBACK, iters + it2,
                            res=kkt_norm(soft, ys, nus, lams))
    return _package(spec, s, qp, y, nu, lam, first, iters)


def solve_ocp(spec: OCPSpec, theta: ThetaVector, s, tol: float | None = None) -> OCPSolution:
    """Primal-dual solution of the parametric OCP at state ``s``."""
    qp = assemble_kkt(spec, theta, s)
    if spec.n_eq and not _initial_equalities_hold(spec, theta, s, spec.tol if tol is None else tol):
        return _package(spec, s, qp, np.zeros(qp.nv), np.zeros(qp.ne), np.zeros(qp.ni), Status.INFEASIBLE, 0)
    return solve_qp_data(spec, qp, s, tol)


def _initial_equalities_hold(spec: OCPSpec, theta: ThetaVector, s, tol: float) -> bool:
    # stage-0 equality rows without an input term only constrain the measured
    # state; they are left out of the QP, so check them here
    rows = ~np.any(spec.eq_Eu != 0, axis=1)
    if not rows.any():
        return True
    gap = spec.eq_Ex[rows] @ np.asarray(s, dtype=float) - theta["eq_d"][rows]
    return bool(np.max(np.abs(gap)) <= tol)


def mpc_action(spec: OCPSpec, theta: ThetaVector, s, tol: float | None = None) -> np.ndarray:
    """First optimal input u*_{0|t}; re-solved from scratch at every call."""
    sol = solve_ocp(spec, theta, s, tol)
    if sol.status == Status.INFEASIBLE:
        raise OCPInfeasibleError(s, "(after soft-constraint fallback)")
    if sol.status == Status.MAX_ITER:
        if not np.isfinite(sol.kkt_residual_norm) or sol.kkt_residual_norm > 1e-4:
            raise OCPInfeasibleError(s, f"(no convergence, residual {sol.kkt_residual_norm:.2e})")
        log.warning("OCP hit max iterations at s=%s, residual %.2e", s, sol.kkt_residual_norm)
    return sol.u0
