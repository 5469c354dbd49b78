"""Pure-numpy primal-dual interior-point QP kernel (fallback backend).

Solves  min 1/2 y'Py + p'y  s.t.  E y = e,  G y + t = w,  t >= 0
with Mehrotra predictor-corrector steps on the reduced system

    [P + G' diag(lam/t) G   E'] [dy ]   [-r_d + G'((r_c - lam*r_i)/t)]
    [E                      0 ] [dnu] = [-r_e                        ]

The compiled kernel in ``_ipm_core.pyx`` implements the same iteration.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

OPTIMAL, MAX_ITER, INFEASIBLE, SINGULAR = 0, 1, 2, 3
_DIVERGE = 1e12


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    """Largest alpha with x + alpha*dx >= 0 (inf when dx >= 0)."""
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def _kkt_solve_eq(P, p, E, e):
    nv, ne = P.shape[0], E.shape[0]
    K = np.zeros((nv + ne, nv + ne))
    K[:nv, :nv] = P
    K[:nv, nv:] = E.T
    K[nv:, :nv] = E
    rhs = np.concatenate([-p, e])
    try:
        lu = sla.lu_factor(K, check_finite=False)
    except (sla.LinAlgError, ValueError):
        return None
    if np.any(np.abs(np.diag(lu[0])) < 1e-300):
        return None
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    # one step of iterative refinement
    sol += sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
    return sol[:nv], sol[nv:]


def solve_qp(P, p, E, e, G, w, tol: float = 1e-9, max_iter: int = 100):
    """Returns (y, nu, lam, t, iterations, status, residual)."""
    nv, ne, ni = P.shape[0], E.shape[0], G.shape[0]
    if ni == 0:
        sol = _kkt_solve_eq(P, p, E, e)
        if sol is None:
            return np.zeros(nv), np.zeros(ne), np.zeros(0), np.zeros(0), 1, SINGULAR, np.inf
        y, nu = sol
        res = max(np.max(np.abs(P @ y + p + E.T @ nu), initial=0.0), np.max(np.abs(E @ y - e), initial=0.0))
        if not np.isfinite(res):
            return y, nu, np.zeros(0), np.zeros(0), 1, SINGULAR, np.inf
        return y, nu, np.zeros(0), np.zeros(0), 1, OPTIMAL if res <= tol else MAX_ITER, float(res)

    init = _kkt_solve_eq(P + G.T @ G, p - G.T @ w, E, e)
    if init is None:
        return np.zeros(nv), np.zeros(ne), np.zeros(ni), np.ones(ni), 0, SINGULAR, np.inf
    y, nu = init
    # shifted least-squares start: lam = Gy - w zeroes the dual residual before the shift
    t = w - G @ y
    lam = -t
    t = t + max(0.0, 1.0 - float(np.min(t)))
    lam = lam + max(0.0, 1.0 - float(np.min(lam)))
    nk = nv + ne
    K = np.zeros((nk, nk))
    K[:nv, nv:] = E.T
    K[nv:, :nv] = E
    status, res, it = MAX_ITER, np.inf, 0
    for it in range(1, max_iter + 1):
        r_d = P @ y + p + E.T @ nu + G.T @ lam
        r_e = E @ y - e
        r_i = G @ y + t - w
        mu = float(t @ lam) / ni
        res = max(np.max(np.abs(r_d)), np.max(np.abs(r_e), initial=0.0), np.max(np.abs(r_i)))
        comp = float(np.max(t * lam))
        if res <= tol and comp <= tol:
            status = OPTIMAL
            it -= 1
            break
        if not np.isfinite(res) or np.max(lam) > _DIVERGE or np.max(np.abs(y)) > _DIVERGE:
            status = INFEASIBLE
            break
        D = lam / t
        K[:nv, :nv] = P + (G.T * D) @ G
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (sla.LinAlgError, ValueError):
            status = SINGULAR
            break
        if np.any(np.abs(np.diag(lu[0])) < 1e-300):
            status = SINGULAR
            break

        def direction(r_c):
            rhs = np.concatenate([-r_d + G.T @ ((r_c - lam * r_i) / t), -r_e])
            sol = sla.lu_solve(lu, rhs, check_finite=False)
            dy = sol[:nv]
            Gdy = G @ dy
            dt = -r_i - Gdy
            dlam = (-r_c + lam * (r_i + Gdy)) / t
            return dy, sol[nv:], dt, dlam

        dy, dnu, dt, dlam = direction(t * lam)
        a_aff = min(1.0, _max_step(t, dt), _max_step(lam, dlam))
        mu_aff = float((t + a_aff * dt) @ (lam + a_aff * dlam)) / ni
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dy, dnu, dt, dlam = direction(t * lam + dt * dlam - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(t, dt), _max_step(lam, dlam)))
        y = y + alpha * dy
        nu = nu + alpha * dnu
        t = t + alpha * dt
        lam = lam + alpha * dlam
    else:
        r_d = P @ y + p + E.T @ nu + G.T @ lam
        r_e = E @ y - e
        r_i = G @ y + t - w
        res = max(np.max(np.abs(r_d)), np.max(np.abs(r_e), initial=0.0), np.max(np.abs(r_i)))
        it = max_iter
    return y, nu, lam, t, it, status, float(max(res, float(np.max(t * lam))))
