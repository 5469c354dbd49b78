"""Parametric finite-horizon OCP and its assembly into a dense QP.

Primal ordering (fixed, relied on by the sensitivity code)::

    y = (u_0, x_1, u_1, x_2, ..., u_{H-1}, x_H)

so ``y[:m]`` is the applied input u_{0|t}.  The initial state x_0 = s is
substituted, not a decision variable.  Equality rows are, per stage k, the
``n`` dynamics rows  x_{k+1} - A x_k - B u_k - c = 0  followed by user
equality rows  Ex x_k + Eu u_k - d = 0.  Inequality rows, per stage k, are
input upper/lower bounds, then state upper/lower bounds (k >= 1), then
polytope rows  Cx x_k + Cu u_k <= d.  At k = 0 rows that do not involve u_0
are constants and are dropped; there are no terminal constraints.

Every QP coefficient is affine in theta for fixed s, which is what makes the
analytic theta-derivatives in :mod:`mpcrl.sensitivity` exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .theta import Block, ThetaVector

WEIGHT_MIN = 1e-4


class OCPDimensionError(ValueError):
    pass


class NonConvexOCPError(ValueError):
    pass


@dataclass(eq=False)
class OCPSpec:
    n: int
    m: int
    H: int
    input_box: bool = False
    state_box: bool = False
    poly_Cx: np.ndarray | None = None
    poly_Cu: np.ndarray | None = None
    eq_Ex: np.ndarray | None = None
    eq_Eu: np.ndarray | None = None
    soft_penalty: float = 1e4
    tol: float = 1e-9
    max_iter: int = 100
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.H < 1 or self.n < 1 or self.m < 1:
            raise OCPDimensionError("need H, n, m >= 1")
        for a, b, what in ((self.poly_Cx, self.poly_Cu, "polytope"), (self.eq_Ex, self.eq_Eu, "equality")):
            if (a is None) != (b is None):
                raise OCPDimensionError(f"{what} rows need both state and input matrices")
        if self.poly_Cx is not None:
            self.poly_Cx = np.atleast_2d(np.asarray(self.poly_Cx, dtype=float))
            self.poly_Cu = np.atleast_2d(np.asarray(self.poly_Cu, dtype=float))
            if self.poly_Cx.shape[1] != self.n or self.poly_Cu.shape != (self.poly_Cx.shape[0], self.m):
                raise OCPDimensionError("polytope matrix shapes")
        if self.eq_Ex is not None:
            self.eq_Ex = np.atleast_2d(np.asarray(self.eq_Ex, dtype=float))
            self.eq_Eu = np.atleast_2d(np.asarray(self.eq_Eu, dtype=float))
            if self.eq_Ex.shape[1] != self.n or self.eq_Eu.shape != (self.eq_Ex.shape[0], self.m):
                raise OCPDimensionError("equality matrix shapes")

    @property
    def n_poly(self) -> int:
        return 0 if self.poly_Cx is None else self.poly_Cx.shape[0]

    @property
    def n_eq(self) -> int:
        return 0 if self.eq_Ex is None else self.eq_Ex.shape[0]

    @property
    def n_primal(self) -> int:
        return self.H * (self.m + self.n)

    def layout(self) -> list[Block]:
        n, m = self.n, self.m
        blocks = [
            Block("stage_q", "cost_weights", n, lower=WEIGHT_MIN),
            Block("stage_r", "cost_weights", m, lower=WEIGHT_MIN),
            Block("stage_cross", "cost_weights", n * m),
            Block("stage_lin_x", "cost_weights", n),
            Block("stage_lin_u", "cost_weights", m),
            Block("terminal_p", "terminal_weights", n * n),
            Block("terminal_lin", "terminal_weights", n),
            Block("dyn_A", "dynamics_params", n * n),
            Block("dyn_B", "dynamics_params", n * m),
            Block("dyn_c", "dynamics_params", n),
        ]
        if self.input_box:
            blocks += [Block("u_lo", "constraint_params", m), Block("u_hi", "constraint_params", m)]
        if self.state_box:
            blocks += [Block("x_lo", "constraint_params", n), Block("x_hi", "constraint_params", n)]
        if self.n_poly:
            blocks.append(Block("poly_d", "constraint_params", self.n_poly))
        if self.n_eq:
            blocks.append(Block("eq_d", "constraint_params", self.n_eq))
        return blocks

    def theta(self, *, Q=1.0, R=1.0, S=0.0, q=0.0, r=0.0, P=None, p=0.0, A=None, B=None, c=0.0,
              u_lo=-1.0, u_hi=1.0, x_lo=-1.0, x_hi=1.0, poly_d=None, eq_d=None,
              learnable=()) -> ThetaVector:
        """Build a theta vector for this spec from familiar matrix names.

        Q and R are the diagonals of the stage weights; P is the full terminal
        weight (defaults to diag(Q)); A defaults to identity, B to zeros.
        """
        n, m = self.n, self.m
        Qd = np.broadcast_to(np.asarray(Q, dtype=float), (n,))
        vals = {
            "stage_q": Qd,
            "stage_r": np.broadcast_to(np.asarray(R, dtype=float), (m,)),
            "stage_cross": np.broadcast_to(np.asarray(S, dtype=float), (n, m)),
            "stage_lin_x": np.broadcast_to(np.asarray(q, dtype=float), (n,)),
            "stage_lin_u": np.broadcast_to(np.asarray(r, dtype=float), (m,)),
            "terminal_p": np.diag(Qd) if P is None else np.broadcast_to(np.asarray(P, dtype=float), (n, n)),
            "terminal_lin": np.broadcast_to(np.asarray(p, dtype=float), (n,)),
            "dyn_A": np.eye(n) if A is None else np.broadcast_to(np.asarray(A, dtype=float), (n, n)),
            "dyn_B": np.zeros((n, m)) if B is None else np.broadcast_to(np.asarray(B, dtype=float), (n, m)),
            "dyn_c": np.broadcast_to(np.asarray(c, dtype=float), (n,)),
            "u_lo": np.broadcast_to(np.asarray(u_lo, dtype=float), (m,)),
            "u_hi": np.broadcast_to(np.asarray(u_hi, dtype=float), (m,)),
            "x_lo": np.broadcast_to(np.asarray(x_lo, dtype=float), (n,)),
            "x_hi": np.broadcast_to(np.asarray(x_hi, dtype=float), (n,)),
            "poly_d": np.zeros(self.n_poly) if poly_d is None else np.asarray(poly_d, dtype=float),
            "eq_d": np.zeros(self.n_eq) if eq_d is None else np.asarray(eq_d, dtype=float),
        }
        blocks = self.layout()
        flat = np.concatenate([np.asarray(vals[b.name], dtype=float).reshape(-1) for b in blocks])
        return ThetaVector(blocks, flat).with_flags(learnable)

    def to_dict(self) -> dict:
        d = {"n": self.n, "m": self.m, "H": self.H, "input_box": self.input_box, "state_box": self.state_box,
             "soft_penalty": self.soft_penalty, "tol": self.tol, "max_iter": self.max_iter}
        for key in ("poly_Cx", "poly_Cu", "eq_Ex", "eq_Eu"):
            val = getattr(self, key)
            if val is not None:
                d[key] = val.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OCPSpec":
        known = {"n", "m", "H", "input_box", "state_box", "poly_Cx", "poly_Cu", "eq_Ex", "eq_Eu",
                 "soft_penalty", "tol", "max_iter"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown OCP keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class QPData:
    """Dense QP  min 1/2 y'Py + p'y + c0  s.t.  E y = e,  G y <= w  at one state."""

    P: np.ndarray
    p: np.ndarray
    c0: float
    E: np.ndarray
    e: np.ndarray
    G: np.ndarray
    w: np.ndarray
    soft_rows: np.ndarray  # inequality rows that involve states (softened on fallback)

    @property
    def nv(self) -> int:
        return self.P.shape[0]

    @property
    def ne(self) -> int:
        return self.E.shape[0]

    @property
    def ni(self) -> int:
        return self.G.shape[0]

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.P @ y + self.p @ y + self.c0)


@dataclass
class ParametricQP:
    """QP data as affine functions of the state s, for one fixed theta.

    p(s) = p0 + Lp s,  e(s) = e0 + Le s,  w(s) = w0 + Lw s,
    c0(s) = 1/2 s'Qc s + qc's.
    """

    P: np.ndarray
    p0: np.ndarray
    Lp: np.ndarray
    E: np.ndarray
    e0: np.ndarray
    Le: np.ndarray
    G: np.ndarray
    w0: np.ndarray
    Lw: np.ndarray
    Qc: np.ndarray
    qc: np.ndarray
    soft_rows: np.ndarray

    def at(self, s: np.ndarray) -> QPData:
        s = np.asarray(s, dtype=float)
        return QPData(self.P, self.p0 + self.Lp @ s, float(0.5 * s @ self.Qc @ s + self.qc @ s),
                      self.E, self.e0 + self.Le @ s, self.G, self.w0 + self.Lw @ s, self.soft_rows)


def _unpack(spec: OCPSpec, values: np.ndarray) -> dict[str, np.ndarray]:
    out, start = {}, 0
    for b in spec.layout():
        out[b.name] = values[start:start + b.size]
        start += b.size
    if start != values.size:
        raise OCPDimensionError(f"theta has {values.size} entries, spec layout needs {start}")
    return out


def _row_counts(spec: OCPSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-stage kept rows of the user equality and polytope blocks."""
    eq_keep, poly_keep = [], []
    for k in range(spec.H):
        if k == 0:
            eq_keep.append(np.flatnonzero(np.any(spec.eq_Eu != 0, axis=1)) if spec.n_eq else np.zeros(0, int))
            poly_keep.append(np.flatnonzero(np.any(spec.poly_Cu != 0, axis=1)) if spec.n_poly else np.zeros(0, int))
        else:
            eq_keep.append(np.arange(spec.n_eq))
            poly_keep.append(np.arange(spec.n_poly))
    return eq_keep, poly_keep


def build_parametric(spec: OCPSpec, values: np.ndarray, const: bool = True) -> ParametricQP:
    """Assemble the s-affine QP for flat theta ``values``.

    With ``const=False`` every theta-independent term is omitted; because the
    data are affine in theta this yields the exact partial derivative with
    respect to a coordinate when ``values`` is that coordinate's unit vector.
    """
    n, m, H = spec.n, spec.m, spec.H
    v = _unpack(spec, np.asarray(values, dtype=float))
    Q = np.diag(v["stage_q"])
    R = np.diag(v["stage_r"])
    S = v["stage_cross"].reshape(n, m)
    Pf = v["terminal_p"].reshape(n, n)
    Pf = 0.5 * (Pf + Pf.T)
    A = v["dyn_A"].reshape(n, n)
    B = v["dyn_B"].reshape(n, m)
    cst = 1.0 if const else 0.0

    nv = H * (m + n)
    ui = lambda k: k * (m + n)  # noqa: E731
    xi = lambda k: (k - 1) * (m + n) + m  # noqa: E731 - x_k for k >= 1

    P = np.zeros((nv, nv))
    p0 = np.zeros(nv)
    Lp = np.zeros((nv, n))
    for k in range(H):
        u = slice(ui(k), ui(k) + m)
        P[u, u] += R
        p0[u] += v["stage_lin_u"]
        if k == 0:
            Lp[u, :] += S.T
        else:
            x = slice(xi(k), xi(k) + n)
            P[x, x] += Q
            P[x, u] += S
            P[u, x] += S.T
            p0[x] += v["stage_lin_x"]
    xH = slice(xi(H), xi(H) + n)
    P[xH, xH] += Pf
    p0[xH] += v["terminal_lin"]

    eq_keep, poly_keep = _row_counts(spec)
    ne = H * n + sum(len(r) for r in eq_keep)
    E = np.zeros((ne, nv))
    e0 = np.zeros(ne)
    Le = np.zeros((ne, n))
    row = 0
    for k in range(H):
        d = slice(row, row + n)
        E[d, xi(k + 1):xi(k + 1) + n] += cst * np.eye(n)
        E[d, ui(k):ui(k) + m] -= B
        e0[d] += v["dyn_c"]
        if k == 0:
            Le[d, :] += A
        else:
            E[d, xi(k):xi(k) + n] -= A
        row += n
        rows = eq_keep[k]
        if len(rows):
            d = slice(row, row + len(rows))
            E[d, ui(k):ui(k) + m] += cst * spec.eq_Eu[rows]
            e0[d] += v["eq_d"][rows]
            if k == 0:
                Le[d, :] -= cst * spec.eq_Ex[rows]
            else:
                E[d, xi(k):xi(k) + n] += cst * spec.eq_Ex[rows]
            row += len(rows)

    g_rows, w_rows, lw_rows, soft = [], [], [], []

    def add(gvec, wval, lw=None, is_soft=False):
        g_rows.append(gvec)
        w_rows.append(wval)
        lw_rows.append(np.zeros(n) if lw is None else lw)
        soft.append(is_soft)

    for k in range(H):
        if spec.input_box:
            for sign, bound in ((1.0, v["u_hi"]), (-1.0, -v["u_lo"])):
                for j in range(m):
                    g = np.zeros(nv)
                    g[ui(k) + j] = cst * sign
                    add(g, bound[j])
        if spec.state_box and k >= 1:
            for sign, bound in ((1.0, v["x_hi"]), (-1.0, -v["x_lo"])):
                for j in range(n):
                    g = np.zeros(nv)
                    g[xi(k) + j] = cst * sign
                    add(g, bound[j], is_soft=True)
        for i in poly_keep[k]:
            g = np.zeros(nv)
            g[ui(k):ui(k) + m] = cst * spec.poly_Cu[i]
            if k == 0:
                add(g, v["poly_d"][i], -cst * spec.poly_Cx[i], is_soft=bool(np.any(spec.poly_Cx[i] != 0)))
            else:
                g[xi(k):xi(k) + n] = cst * spec.poly_Cx[i]
                add(g, v["poly_d"][i], is_soft=True)

    ni = len(g_rows)
    G = np.array(g_rows).reshape(ni, nv)
    w0 = np.array(w_rows, dtype=float).reshape(ni)
    Lw = np.array(lw_rows).reshape(ni, n)
    return ParametricQP(P, p0, Lp, E, e0, Le, G, w0, Lw, Q, v["stage_lin_x"].copy(), np.array(soft, dtype=bool))


def _check_convex(spec: OCPSpec, theta: ThetaVector, P: np.ndarray) -> None:
    if np.any(theta["stage_r"] <= 0):
        raise NonConvexOCPError("input weights must be positive definite")
    scale = max(1.0, float(np.max(np.abs(P))))
    try:
        np.linalg.cholesky(P + 1e-10 * scale * np.eye(P.shape[0]))
    except np.linalg.LinAlgError:
        raise NonConvexOCPError("assembled Hessian is not positive semidefinite") from None


def parametric_qp(spec: OCPSpec, theta: ThetaVector) -> ParametricQP:
    """Cached, convexity-checked s-affine QP for ``theta``."""
    key = ("pqp", theta.values.tobytes())
    cache = spec._cache
    hit = cache.get(key)
    if hit is not None:
        return hit
    if len(theta) != sum(b.size for b in spec.layout()):
        raise OCPDimensionError("theta does not match the spec layout")
    pqp = build_parametric(spec, theta.values)
    _check_convex(spec, theta, pqp.P)
    if len(cache) > 256:
        cache.clear()
    cache[key] = pqp
    return pqp


def tangent_qp(spec: OCPSpec, j: int) -> ParametricQP:
    """Partial derivative of the QP data with respect to flat theta coordinate j."""
    key = ("tan", j)
    hit = spec._cache.get(key)
    if hit is None:
        size = sum(b.size for b in spec.layout())
        unit = np.zeros(size)
        unit[j] = 1.0
        hit = build_parametric(spec, unit, const=False)
        spec._cache[key] = hit
    return hit


def assemble_kkt(spec: OCPSpec, theta: ThetaVector, s) -> QPData:
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.size != spec.n:
        raise OCPDimensionError(f"state has {s.size} entries, spec expects {spec.n}")
    return parametric_qp(spec, theta).at(s)


def inf_norm(x: np.ndarray) -> float:
    return float(np.max(np.abs(x))) if x.size else 0.0

