"""Finite-horizon LQR by backward Riccati recursion (independent oracle)."""
from __future__ import annotations

import numpy as np


def riccati_lqr(A, B, Q, R, Qf, H: int, *, return_all: bool = False):
    """Gain and cost-to-go for  min sum x'Qx + u'Ru + x_H'Qf x_H,  u = -K x.

    Returns the first-stage gain K_0 and cost-to-go matrix P_0 (or, with
    ``return_all``, the lists K_0..K_{H-1} and P_0..P_H).
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R, Qf = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float), np.atleast_2d(Qf).astype(float)
    if H < 1:
        raise ValueError("H must be >= 1")
    try:
        np.linalg.cholesky(0.5 * (R + R.T))
    except np.linalg.LinAlgError:
        raise ValueError("R must be positive definite") from None
    P = Qf
    Ps, Ks = [P], []
    for _ in range(H):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        Ks.append(K)
        Ps.append(P)
    Ks.reverse()
    Ps.reverse()
    if return_all:
        return Ks, Ps
    return Ks[0], Ps[0]


def riccati_stationary(A, B, Q, R, tol: float = 1e-13, max_iter: int = 100_000):
    """Iterate the recursion to its fixed point (discrete algebraic Riccati equation)."""
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
    P = Q.copy()
    for _ in range(max_iter):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P_new = Q + A.T @ P @ (A - B @ K)
        P_new = 0.5 * (P_new + P_new.T)
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P))):
            return K, P_new
        P = P_new
    raise RuntimeError("Riccati iteration did not converge")
