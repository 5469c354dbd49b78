# cython: language_level=3
"""Compiled primal-dual interior-point QP kernel.

Same iteration as ``_ipm_py.solve_qp``; the whole loop runs without the GIL
so concurrent rollouts can overlap their solves.  Inequality rows are kept
in CSR form since box rows have a single nonzero.
"""
import numpy as np

from libc.math cimport fabs, isfinite
from scipy.linalg.cython_lapack cimport dgetrf, dgetrs

cdef enum:
    OPTIMAL = 0
    MAX_ITER = 1
    INFEASIBLE = 2
    SINGULAR = 3

cdef double DIVERGE = 1e12


cdef inline double _step_to_boundary(double[::1] x, double[::1] dx, int k) noexcept nogil:
    cdef double a = 1e300
    cdef double r
    cdef int i
    for i in range(k):
        if dx[i] < 0.0:
            r = -x[i] / dx[i]
            if r < a:
                a = r
    return a


cdef int _factor(double[::1] K, int[::1] ipiv, int nk) noexcept nogil:
    cdef int info = 0
    cdef int i
    dgetrf(&nk, &nk, &K[0], &nk, &ipiv[0], &info)
    if info != 0:
        return -1
    for i in range(nk):
        if fabs(K[i * nk + i]) < 1e-300:
            return -1
    return 0


cdef void _solve(double[::1] K, int[::1] ipiv, int nk, double[::1] b) noexcept nogil:
    cdef char trans = b'N'
    cdef int one = 1
    cdef int info = 0
    # K is symmetric, so the row-major buffer read as column-major is the same matrix
    dgetrs(&trans, &nk, &one, &K[0], &nk, &ipiv[0], &b[0], &nk, &info)


cdef void _fill_kkt(double[::1] K, double[:, ::1] P, double[:, ::1] E, int nv, int ne,
                    int[::1] gptr, int[::1] gidx, double[::1] gval, double[::1] D, int ni) noexcept nogil:
    cdef int nk = nv + ne
    cdef int i, j, r, a, b
    cdef double dr
    for i in range(nk * nk):
        K[i] = 0.0
    for i in range(nv):
        for j in range(nv):
            K[i * nk + j] = P[i, j]
    for r in range(ni):
        dr = D[r]
        for a in range(gptr[r], gptr[r + 1]):
            for b in range(gptr[r], gptr[r + 1]):
                K[gidx[a] * nk + gidx[b]] += dr * gval[a] * gval[b]
    for i in range(ne):
        for j in range(nv):
            K[(nv + i) * nk + j] = E[i, j]
            K[j * nk + nv + i] = E[i, j]


cdef double _residuals(double[:, ::1] P, double[::1] p, double[:, ::1] E, double[::1] e,
                       int[::1] gptr, int[::1] gidx, double[::1] gval, double[::1] w,
                       double[::1] y, double[::1] nu, double[::1] lam, double[::1] t,
                       double[::1] r_d, double[::1] r_e, double[::1] r_i,
                       int nv, int ne, int ni) noexcept nogil:
    cdef int i, j, a
    cdef double acc, res = 0.0
    for i in range(nv):
        acc = p[i]
        for j in range(nv):
            acc += P[i, j] * y[j]
        r_d[i] = acc
    for i in range(ne):
        acc = -e[i]
        for j in range(nv):
            acc += E[i, j] * y[j]
            r_d[j] += E[i, j] * nu[i]
        r_e[i] = acc
    for i in range(ni):
        acc = t[i] - w[i]
        for a in range(gptr[i], gptr[i + 1]):
            acc += gval[a] * y[gidx[a]]
            r_d[gidx[a]] += gval[a] * lam[i]
        r_i[i] = acc
    for i in range(nv):
        if not isfinite(r_d[i]):
            return 1e300
        if fabs(r_d[i]) > res:
            res = fabs(r_d[i])
    for i in range(ne):
        if fabs(r_e[i]) > res:
            res = fabs(r_e[i])
    for i in range(ni):
        if fabs(r_i[i]) > res:
            res = fabs(r_i[i])
    return res


cdef void _direction(double[::1] K, int[::1] ipiv, int nv, int ne, int ni,
                     int[::1] gptr, int[::1] gidx, double[::1] gval,
                     double[::1] r_d, double[::1] r_e, double[::1] r_i, double[::1] r_c,
                     double[::1] lam, double[::1] t, double[::1] rhs,
                     double[::1] dt, double[::1] dlam, double[::1] tmp) noexcept nogil:
    cdef int i, a
    cdef double gdy
    for i in range(nv):
        rhs[i] = -r_d[i]
    for i in range(ni):
        tmp[i] = (r_c[i] - lam[i] * r_i[i]) / t[i]
        for a in range(gptr[i], gptr[i + 1]):
            rhs[gidx[a]] += gval[a] * tmp[i]
    for i in range(ne):
        rhs[nv + i] = -r_e[i]
    _solve(K, ipiv, nv + ne, rhs)
    for i in range(ni):
        gdy = 0.0
        for a in range(gptr[i], gptr[i + 1]):
            gdy += gval[a] * rhs[gidx[a]]
        dt[i] = -r_i[i] - gdy
        dlam[i] = (-r_c[i] + lam[i] * (r_i[i] + gdy)) / t[i]


cdef int _ipm(double[:, ::1] P, double[::1] p, double[:, ::1] E, double[::1] e,
              int[::1] gptr, int[::1] gidx, double[::1] gval, double[::1] w,
              double[::1] y, double[::1] nu, double[::1] lam, double[::1] t,
              double[::1] K, int[::1] ipiv, double[::1] rhs,
              double[::1] r_d, double[::1] r_e, double[::1] r_i, double[::1] r_c,
              double[::1] D, double[::1] dt, double[::1] dlam, double[::1] tmp,
              int nv, int ne, int ni, double tol, int max_iter,
              int* iters, double* res_out) noexcept nogil:
    cdef int nk = nv + ne
    cdef int i, a, it
    cdef double res, comp, mu, mu_aff, sigma, alpha, a_aff, tn, ln, big, tmin, lmin
    cdef int status = MAX_ITER

    # starting point: equality-constrained minimiser of the objective plus 1/2||Gy - w||^2
    for i in range(ni):
        D[i] = 1.0
    _fill_kkt(K, P, E, nv, ne, gptr, gidx, gval, D, ni)
    if _factor(K, ipiv, nk) != 0:
        iters[0] = 0
        res_out[0] = 1e300
        return SINGULAR
    for i in range(nv):
        rhs[i] = -p[i]
    for i in range(ni):
        for a in range(gptr[i], gptr[i + 1]):
            rhs[gidx[a]] += gval[a] * w[i]
    for i in range(ne):
        rhs[nv + i] = e[i]
    _solve(K, ipiv, nk, rhs)
    for i in range(nv):
        y[i] = rhs[i]
    for i in range(ne):
        nu[i] = rhs[nv + i]
    # shifted least-squares start: lam = Gy - w zeroes the dual residual before the shift
    tmin = 1e300
    lmin = 1e300
    for i in range(ni):
        tn = w[i]
        for a in range(gptr[i], gptr[i + 1]):
            tn -= gval[a] * y[gidx[a]]
        t[i] = tn
        lam[i] = -tn
        if tn < tmin:
            tmin = tn
        if -tn < lmin:
            lmin = -tn
    for i in range(ni):
        if tmin < 1.0:
            t[i] += 1.0 - tmin
        if lmin < 1.0:
            lam[i] += 1.0 - lmin

    res = 1e300
    it = 0
    for it in range(1, max_iter + 1):
        res = _residuals(P, p, E, e, gptr, gidx, gval, w, y, nu, lam, t, r_d, r_e, r_i, nv, ne, ni)
        mu = 0.0
        comp = 0.0
        big = 0.0
        for i in range(ni):
            mu += t[i] * lam[i]
            if t[i] * lam[i] > comp:
                comp = t[i] * lam[i]
            if lam[i] > big:
                big = lam[i]
        mu /= ni
        if res <= tol and comp <= tol:
            status = OPTIMAL
            it -= 1
            break
        for i in range(nv):
            if fabs(y[i]) > big:
                big = fabs(y[i])
        if res >= 1e300 or big > DIVERGE:
            status = INFEASIBLE
            break
        for i in range(ni):
            D[i] = lam[i] / t[i]
        _fill_kkt(K, P, E, nv, ne, gptr, gidx, gval, D, ni)
        if _factor(K, ipiv, nk) != 0:
            status = SINGULAR
            break
        # predictor
        for i in range(ni):
            r_c[i] = t[i] * lam[i]
        _direction(K, ipiv, nv, ne, ni, gptr, gidx, gval, r_d, r_e, r_i, r_c, lam, t, rhs, dt, dlam, tmp)
        a_aff = _step_to_boundary(t, dt, ni)
        tn = _step_to_boundary(lam, dlam, ni)
        if tn < a_aff:
            a_aff = tn
        if a_aff > 1.0:
            a_aff = 1.0
        mu_aff = 0.0
        for i in range(ni):
            mu_aff += (t[i] + a_aff * dt[i]) * (lam[i] + a_aff * dlam[i])
        mu_aff /= ni
        sigma = (mu_aff / mu) ** 3 if mu > 0.0 else 0.0
        # corrector
        for i in range(ni):
            r_c[i] = t[i] * lam[i] + dt[i] * dlam[i] - sigma * mu
        _direction(K, ipiv, nv, ne, ni, gptr, gidx, gval, r_d, r_e, r_i, r_c, lam, t, rhs, dt, dlam, tmp)
        alpha = _step_to_boundary(t, dt, ni)
        ln = _step_to_boundary(lam, dlam, ni)
        if ln < alpha:
            alpha = ln
        alpha *= 0.99
        if alpha > 1.0:
            alpha = 1.0
        for i in range(nv):
            y[i] += alpha * rhs[i]
        for i in range(ne):
            nu[i] += alpha * rhs[nv + i]
        for i in range(ni):
            t[i] += alpha * dt[i]
            lam[i] += alpha * dlam[i]
    else:
        res = _residuals(P, p, E, e, gptr, gidx, gval, w, y, nu, lam, t, r_d, r_e, r_i, nv, ne, ni)
        it = max_iter
    comp = 0.0
    for i in range(ni):
        if t[i] * lam[i] > comp:
            comp = t[i] * lam[i]
    iters[0] = it
    res_out[0] = res if res > comp else comp
    return status


cdef int _eq_only(double[:, ::1] P, double[::1] p, double[:, ::1] E, double[::1] e,
                  double[::1] y, double[::1] nu, double[::1] K, double[::1] K2, int[::1] ipiv,
                  double[::1] rhs, double[::1] r, int nv, int ne, double tol, double* res_out) noexcept nogil:
    cdef int nk = nv + ne
    cdef int i, j
    cdef double acc, res = 0.0
    for i in range(nk * nk):
        K[i] = 0.0
    for i in range(nv):
        for j in range(nv):
            K[i * nk + j] = P[i, j]
    for i in range(ne):
        for j in range(nv):
            K[(nv + i) * nk + j] = E[i, j]
            K[j * nk + nv + i] = E[i, j]
    for i in range(nk * nk):
        K2[i] = K[i]
    if _factor(K, ipiv, nk) != 0:
        res_out[0] = 1e300
        return SINGULAR
    for i in range(nv):
        rhs[i] = -p[i]
    for i in range(ne):
        rhs[nv + i] = e[i]
    _solve(K, ipiv, nk, rhs)
    # one step of iterative refinement against the unfactored copy
    for i in range(nv):
        r[i] = -p[i]
    for i in range(ne):
        r[nv + i] = e[i]
    for i in range(nk):
        acc = r[i]
        for j in range(nk):
            acc -= K2[i * nk + j] * rhs[j]
        r[i] = acc
    _solve(K, ipiv, nk, r)
    for i in range(nk):
        rhs[i] += r[i]
    for i in range(nv):
        y[i] = rhs[i]
    for i in range(ne):
        nu[i] = rhs[nv + i]
    for i in range(nv):
        acc = p[i]
        for j in range(nv):
            acc += P[i, j] * y[j]
        for j in range(ne):
            acc += E[j, i] * nu[j]
        if not isfinite(acc):
            res_out[0] = 1e300
            return SINGULAR
        if fabs(acc) > res:
            res = fabs(acc)
    for i in range(ne):
        acc = -e[i]
        for j in range(nv):
            acc += E[i, j] * y[j]
        if fabs(acc) > res:
            res = fabs(acc)
    res_out[0] = res
    return OPTIMAL if res <= tol else MAX_ITER


def solve_qp(P, p, E, e, G, w, double tol=1e-9, int max_iter=100):
    """Returns (y, nu, lam, t, iterations, status, residual)."""
    cdef double[:, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef double[::1] pm = np.ascontiguousarray(p, dtype=np.float64)
    Ea = np.ascontiguousarray(E, dtype=np.float64)
    Ga = np.ascontiguousarray(G, dtype=np.float64)
    cdef int nv = Pm.shape[0]
    cdef int ne = Ea.shape[0]
    cdef int ni = Ga.shape[0]
    if ne == 0:
        Ea = np.zeros((1, nv))
    cdef double[:, ::1] Em = Ea
    cdef double[::1] em = np.ascontiguousarray(e, dtype=np.float64) if ne else np.zeros(1)
    cdef double[::1] wm = np.ascontiguousarray(w, dtype=np.float64) if ni else np.zeros(1)
    cdef int nk = nv + ne
    cdef int iters = 1
    cdef double res = 0.0
    cdef int status

    y = np.zeros(nv)
    nu = np.zeros(ne)
    lam = np.zeros(ni)
    t = np.zeros(ni)
    cdef double[::1] ym = y
    cdef double[::1] num = nu if ne else np.zeros(1)
    cdef double[::1] K = np.empty(nk * nk)
    cdef double[::1] rhs = np.empty(nk)
    cdef int[::1] ipiv = np.empty(nk, dtype=np.intc)
    cdef double[::1] K2
    cdef double[::1] r
    cdef double[::1] lamm, tm, r_d, r_e, r_i, r_c, D, dt, dlam, tmp
    cdef int[::1] gptr, gidx
    cdef double[::1] gval

    if ni == 0:
        K2 = np.empty(nk * nk)
        r = np.empty(nk)
        with nogil:
            status = _eq_only(Pm, pm, Em, em, ym, num, K, K2, ipiv, rhs, r, nv, ne, tol, &res)
        return y, nu, lam, t, 1, status, res

    rows, cols = np.nonzero(Ga)
    gptr = np.searchsorted(rows, np.arange(ni + 1)).astype(np.intc)
    gidx = cols.astype(np.intc)
    gval = np.ascontiguousarray(Ga[rows, cols]) if rows.size else np.zeros(1)
    if rows.size == 0:
        gidx = np.zeros(1, dtype=np.intc)
    lamm = lam
    tm = t
    work = np.empty(3 * nv + 2 * ne + 8 * ni + 8)
    r_d = work[0:nv]
    r_e = work[nv:nv + ne + 1]
    r_i = work[nv + ne + 1:nv + ne + 1 + ni]
    r_c = work[nv + ne + 1 + ni:nv + ne + 1 + 2 * ni]
    D = work[nv + ne + 1 + 2 * ni:nv + ne + 1 + 3 * ni]
    dt = work[nv + ne + 1 + 3 * ni:nv + ne + 1 + 4 * ni]
    dlam = work[nv + ne + 1 + 4 * ni:nv + ne + 1 + 5 * ni]
    tmp = work[nv + ne + 1 + 5 * ni:nv + ne + 1 + 6 * ni]
    with nogil:
        status = _ipm(Pm, pm, Em, em, gptr, gidx, gval, wm, ym, num, lamm, tm, K, ipiv, rhs,
                      r_d, r_e, r_i, r_c, D, dt, dlam, tmp, nv, ne, ni, tol, max_iter, &iters, &res)
    return y, nu, lam, t, iters, status, res
