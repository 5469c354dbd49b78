"""DP oracle tables and CSV exports for external plotting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..mdp.dp import (
    DiscreteMDP,
    bellman_residual,
    enumerate_optimal_policy,
    greedy_from_q,
    load_mdp,
    policy_actions,
    value_iteration,
)
from .records import RecordError, RunRecord

MAX_ENUMERATION = 200_000     # A**S policies; beyond this the brute force is skipped


@dataclass
class DPTables:
    mdp: DiscreteMDP
    Q: np.ndarray
    V: np.ndarray
    greedy: np.ndarray            # action per state
    residual: float
    enumerated: np.ndarray | None  # brute-force optimal actions, None when skipped
    V_enumerated: np.ndarray | None

    @property
    def agree(self) -> bool | None:
        """Greedy policy equals the enumerated one (None when enumeration was skipped)."""
        if self.enumerated is None:
            return None
        return bool(np.array_equal(self.greedy, self.enumerated))

    def q_csv(self) -> str:
        buf = io.StringIO()
        buf.write("state,action,Q\n")
        for s in range(self.mdp.n_states):
            for a in range(self.mdp.n_actions):
                buf.write(f"{s},{a},{float(self.Q[s, a])!r}\n")
        return buf.getvalue()

    def v_csv(self) -> str:
        buf = io.StringIO()
        buf.write("state,V,greedy_action,enumerated_action,V_enumerated\n")
        for s in range(self.mdp.n_states):
            ea = "" if self.enumerated is None else str(int(self.enumerated[s]))
            ev = "" if self.V_enumerated is None else repr(float(self.V_enumerated[s]))
            buf.write(f"{s},{float(self.V[s])!r},{int(self.greedy[s])},{ea},{ev}\n")
        return buf.getvalue()


def dp_oracle(mdp: DiscreteMDP | str | Path, gamma: float | None = None, tol: float = 1e-12,
              out: str | Path | None = None) -> DPTables:
    """Value iteration plus exhaustive policy enumeration on a tabular MDP.

    ``mdp`` is a DiscreteMDP or an ``mdp v1`` text file; ``gamma`` overrides
    the file's discount.
    """
    if not isinstance(mdp, DiscreteMDP):
        mdp = load_mdp(mdp, gamma)
    elif gamma is not None:
        mdp = DiscreteMDP(mdp.P, mdp.R, gamma)
    Q = value_iteration(mdp, tol)
    greedy = policy_actions(greedy_from_q(Q))
    enum_a = enum_V = None
    if mdp.n_actions ** mdp.n_states <= MAX_ENUMERATION:
        enum_a, enum_V = enumerate_optimal_policy(mdp)
    tables = DPTables(mdp, Q, Q.max(axis=1), greedy, bellman_residual(mdp, Q), enum_a, enum_V)
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "q_table.csv").write_text(tables.q_csv())
        (d / "v_table.csv").write_text(tables.v_csv())
    return tables


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in r])
    return path


def plot_data(run_dir: str | Path) -> dict[str, Path]:
    """Write plotting tables into ``<run_dir>/plot`` and return them by name.

    Run records give ``learning_curve.csv`` (PG, BC), ``query_history.csv``
    (BO) or ``grid.csv`` (sweep); a check-grad output directory gives
    ``gradcheck_scatter.csv``.
    """
    d = Path(run_dir)
    if not d.is_dir():
        raise RecordError(f"{d}: no such directory")
    if not any(d.iterdir()):
        raise RecordError(f"{d}: empty directory")
    out = d / "plot"
    written: dict[str, Path] = {}
    if (d / "gradcheck.csv").exists() and not (d / "events.jsonl").exists():
        out.mkdir(exist_ok=True)
        with open(d / "gradcheck.csv", newline="") as f:
            rows = [r for r in csv.DictReader(f) if r["error"] not in ("nan", "")]
        written["gradcheck_scatter"] = _write_csv(
            out / "gradcheck_scatter.csv", ["kind", "instance", "n_active", "error"],
            [(r["kind"], r["instance"], r["n_active"], r["error"]) for r in rows])
        return written

    rec = RunRecord.load(d)
    out.mkdir(exist_ok=True)
    start = next(e for e in rec.events if e["event"] == "start")
    labels = start["labels"]
    learner = start["learner"]
    its = [e for e in rec.events if e["event"] == "iteration"]
    queries = [e for e in rec.events if e["event"] == "query"]
    points = [e for e in rec.events if e["event"] == "point"]
    if its and learner in ("reinforce", "dpg"):
        written["learning_curve"] = _write_csv(
            out / "learning_curve.csv", ["iteration", "J_mean", "J_stderr"] + labels,
            [[e["iteration"], e["J_mean"], e["J_stderr"]] + e["theta"] for e in its])
    if its and learner == "bc":
        written["learning_curve"] = _write_csv(
            out / "learning_curve.csv", ["iteration", "train_mse", "heldout_mse"] + labels,
            [[e["iteration"], e["train_mse"], e["heldout_mse"]] + e["theta"] for e in its])
    if queries:
        written["query_history"] = _write_csv(
            out / "query_history.csv", ["query"] + labels + ["y", "incumbent_y", "failed"],
            [[e["iteration"]] + e["theta"] + [e["y"], e["incumbent_y"], int(e["failed"])] for e in queries])
    if points:
        written["grid"] = _write_csv(
            out / "grid.csv", labels + ["J_mean", "J_stderr"],
            [e["theta"] + [e["J_mean"], e["J_stderr"]] for e in points])
    if not written:
        raise RecordError(f"{d}: run has no iteration, query or grid events to export")
    return written
