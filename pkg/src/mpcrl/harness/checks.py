"""Gradient verification: implicit-function Jacobians against finite differences and
analytic values, plus FD checks of the policy score, network Jacobian and critic.

Error measure for Jacobians: max |J - J_ref| / max(max |J_ref|, floor) with
floor 1e-3, i.e. relative where the Jacobian is of order one and absolute
where it is nearly zero.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..agents import GaussianPerturbedPolicy, MlpPolicy
from ..critics import LinearQ, QuadraticFeatures
from ..ocp.solver import solve_ocp
from ..rng import AUX_LANE, RNGStream
from ..sensitivity import SensitivityError, SingularKKTMatrix, policy_jacobian
from . import fixtures

ERROR_FLOOR = 1e-3
TOL_LINEAR = 1e-10
TOL_RANDOM = 1e-4
TOL_FD = 1e-6


def jacobian_error(J, ref, floor: float = ERROR_FLOOR) -> float:
    J, ref = np.asarray(J, dtype=float), np.asarray(ref, dtype=float)
    if J.shape != ref.shape:
        raise ValueError(f"shape mismatch {J.shape} vs {ref.shape}")
    if J.size == 0:
        return 0.0
    return float(np.max(np.abs(J - ref)) / max(float(np.max(np.abs(ref))), floor))


@dataclass
class CheckRow:
    kind: str
    instance: int
    label: str
    n_active: int
    error: float
    tolerance: float
    status: str          # pass | fail | refused | not-refused

    @property
    def ok(self) -> bool:
        return self.status in ("pass", "refused")


@dataclass
class GradCheckReport:
    rows: list[CheckRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.ok for r in self.rows)

    def of_kind(self, kind: str) -> list[CheckRow]:
        return [r for r in self.rows if r.kind == kind]

    def max_error(self, kind: str) -> float:
        errs = [r.error for r in self.of_kind(kind) if np.isfinite(r.error)]
        return max(errs) if errs else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "instance", "label", "n_active", "error", "tolerance", "status"])
        for r in self.rows:
            w.writerow([r.kind, r.instance, r.label, r.n_active, repr(float(r.error)), repr(r.tolerance), r.status])
        return buf.getvalue()

    def summary_lines(self) -> list[str]:
        out = []
        for kind in dict.fromkeys(r.kind for r in self.rows):
            rows = self.of_kind(kind)
            bad = sum(not r.ok for r in rows)
            out.append(f"{kind:<16} {len(rows):4d} checks  max error {self.max_error(kind):.3e}  "
                       f"{'ok' if bad == 0 else f'{bad} FAILED'}")
        return out


def _status(err: float, tol: float) -> str:
    return "pass" if np.isfinite(err) and err <= tol else "fail"


def _linear_checks(report: GradCheckReport) -> None:
    # u* = -S s in the scalar fixture, so du*/dS = -s exactly
    for k, (S, s) in enumerate([(-0.7, 2.0), (0.3, -1.5), (1.2, 0.4)]):
        inst = fixtures.scalar_fixture(S, s)
        J = policy_jacobian(inst.spec, inst.theta, inst.s).matrix
        err = jacobian_error(J, [[-s]], floor=1.0)
        report.rows.append(CheckRow("unconstrained", k, inst.label, 0, err, TOL_LINEAR, _status(err, TOL_LINEAR)))
    inst = fixtures.active_bound_fixture()
    J = policy_jacobian(inst.spec, inst.theta, inst.s).matrix
    err = jacobian_error(J, np.zeros_like(J), floor=1.0)
    report.rows.append(CheckRow("active_bound", 0, inst.label, 1, err, TOL_LINEAR, _status(err, TOL_LINEAR)))


def _random_checks(report: GradCheckReport, n: int, seed: int, delta: float) -> None:
    for k, (inst, fd, n_active) in enumerate(fixtures.random_strict_instances(n, seed, delta)):
        J = policy_jacobian(inst.spec, inst.theta, inst.s).matrix
        err = jacobian_error(J, fd)
        report.rows.append(CheckRow("random_strict", k, inst.label, n_active, err, TOL_RANDOM, _status(err, TOL_RANDOM)))


def _licq_checks(report: GradCheckReport) -> None:
    k = 0
    for H in (1, 2, 3):
        for s in (3.0, 4.0, 6.0):
            inst = fixtures.licq_fixture(s, H)
            sol = solve_ocp(inst.spec, inst.theta, inst.s)
            try:
                policy_jacobian(inst.spec, inst.theta, inst.s, sol)
                status = "not-refused"
            except SingularKKTMatrix:
                status = "refused"
            except SensitivityError as exc:
                status = f"not-refused ({type(exc).__name__})"
            report.rows.append(CheckRow("licq_violating", k, f"licq H={H} s={s}", -1, float("nan"), 0.0, status))
            k += 1


def _fd(f, x, delta):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = delta
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * delta))
    return np.stack(cols, axis=-1)


def _policy_checks(report: GradCheckReport, seed: int) -> None:
    rng = RNGStream.from_seed(seed).child(5).generator(AUX_LANE)
    # score function of the Gaussian-perturbed MPC policy
    pol = GaussianPerturbedPolicy(fixtures.mismatch_policy(("dyn_B", "stage_q")), 0.3)
    for k in range(5):
        s = rng.uniform(-1.0, 1.0, 1)
        a = pol.act(s, rng)
        g = pol.grad_log_prob(s, a)
        th = pol.theta
        fd = _fd(lambda v: pol.with_theta(th.with_learnable(v)).log_prob(s, a), th.learnable_values(), 1e-6)
        err = jacobian_error(g, fd)
        report.rows.append(CheckRow("score_function", k, "gaussian mpc", -1, err, TOL_FD, _status(err, TOL_FD)))
    # network Jacobian
    net = MlpPolicy.initialized(2, 1, (8, 8), rng)
    for k in range(3):
        s = rng.normal(size=2)
        _, J = net.mean_and_jacobian(s)
        th = net.theta
        fd = _fd(lambda v: net.with_theta(th.with_learnable(v)).deterministic_act(s), th.learnable_values(), 1e-6)
        err = jacobian_error(J, fd)
        report.rows.append(CheckRow("mlp_jacobian", k, "mlp 2-8-8-1", -1, err, TOL_FD, _status(err, TOL_FD)))
    # critic action gradient
    feats = QuadraticFeatures(2, 2)
    q = LinearQ(rng.normal(size=feats.dim), feats)
    for k in range(3):
        s, a = rng.normal(size=2), rng.normal(size=2)
        fd = _fd(lambda v: q(s, v), a, 1e-6)
        err = jacobian_error(q.grad_a(s, a), fd)
        report.rows.append(CheckRow("critic_grad_a", k, "quadratic q", -1, err, TOL_FD, _status(err, TOL_FD)))


def check_grad(n_instances: int = 100, seed: int = 0, delta: float = 1e-6,
               out: str | Path | None = None) -> GradCheckReport:
    """Run every check; with ``out`` the rows are written to ``out/gradcheck.csv``."""
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    report = GradCheckReport()
    _linear_checks(report)
    _random_checks(report, n_instances, seed, delta)
    _licq_checks(report)
    _policy_checks(report, seed)
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "gradcheck.csv").write_text(report.to_csv())
    return report
