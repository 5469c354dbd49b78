"""Run an experiment config end to end and persist its record."""
from __future__ import annotations

import io
import itertools
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .. import __version__
from ..learners.bo import train_bo
from ..learners.offline import collect_expert, train_bc
from ..learners.pg import LearnerFailure, train_dpg, train_reinforce
from ..mdp.core import RolloutError, discounted_return, episode_streams, estimate_performance, ordered_map, rollout
from ..ocp.problem import NonConvexOCPError
from ..ocp.solver import OCPInfeasibleError
from ..rng import RNGStream
from .config import ConfigError, ExperimentConfig, expert_policy
from .records import DATASET, THETA, RunRecord, RunWriter

log = logging.getLogger(__name__)

ROLLOUT_FAILURES = (RolloutError, OCPInfeasibleError, NonConvexOCPError)


class RunFailure(RuntimeError):
    """The learner aborted; the partial record was still persisted at ``record.path``."""

    def __init__(self, msg: str, record: RunRecord | None = None):
        super().__init__(msg)
        self.record = record


def eval_streams(cfg: ExperimentConfig):
    """Evaluation episodes shared by every learner and by the sweep (common random numbers)."""
    return episode_streams(RNGStream.from_seed(cfg.seed).child(1), cfg.n_episodes)


@dataclass
class FinalEvaluation:
    mean: float
    std_error: float
    violation_steps: int
    violation_episodes: int


def evaluate_final(env, policy, cfg: ExperimentConfig) -> FinalEvaluation:
    trajs = ordered_map(lambda st: rollout(env, policy, cfg.T, st), eval_streams(cfg), cfg.threads)
    G = np.array([discounted_return(traj, cfg.gamma) for traj in trajs])
    se = float(G.std(ddof=1) / math.sqrt(G.size)) if G.size > 1 else float("nan")
    steps = sum(int(tr.violation > 0) for traj in trajs for tr in traj.transitions)
    eps = sum(int(traj.violation_total() > 0) for traj in trajs)
    return FinalEvaluation(float(G.mean()), se, steps, eps)


def _theta_text(policy) -> str:
    return policy.theta.to_text()


def _start(writer: RunWriter, cfg: ExperimentConfig, policy) -> None:
    writer.event(event="start", config_hash=cfg.hash, toolkit_version=__version__, learner=cfg.learner,
                 env=cfg.env_id, seed=cfg.seed, gamma=cfg.gamma, T=cfg.T, n_episodes=cfg.n_episodes,
                 labels=list(policy.theta.learnable_labels()), theta0=policy.theta.learnable_values())


def _pg_event(writer):
    def cb(rec):
        est = rec.estimate
        writer.event(event="iteration", iteration=rec.iteration, J_mean=est.mean, J_stderr=est.std_error,
                     violation_mean=est.violation_mean, grad_norm=rec.grad_norm, dropped=rec.dropped,
                     used=rec.used, rejected=rec.rejected, theta=rec.theta)
    return cb


def _bo_event(writer):
    def cb(rec, state):
        last = state.data[-1]
        inc = state.incumbent
        writer.event(event="query", iteration=rec.iteration, theta=last.theta, y=last.y, violation=last.violation,
                     failed=last.failed, feasible=last.feasible, incumbent_y=None if inc is None else inc.y)
    return cb


def _bc_event(writer):
    def cb(rec):
        writer.event(event="iteration", iteration=rec.iteration, train_mse=rec.train_mse, heldout_mse=rec.heldout_mse,
                     grad_norm=rec.grad_norm, step=rec.step, dropped=rec.dropped, used=rec.used, theta=rec.theta)
    return cb


def bo_dataset_csv(state, labels) -> str:
    buf = io.StringIO()
    buf.write(",".join(list(labels) + ["y", "violation", "failed", "feasible"]) + "\n")
    for o in state.data:
        row = [repr(float(v)) for v in o.theta] + [repr(float(o.y)), repr(float(o.violation)),
                                                  str(int(o.failed)), str(int(o.feasible))]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def run(cfg: ExperimentConfig) -> RunRecord:
    """Train the configured learner, evaluate the result, persist the run atomically."""
    cfg.validate()
    env = cfg.build_env()
    policy = cfg.build_policy(env)
    writer = RunWriter(cfg.output, cfg.text)
    t0 = time.perf_counter()
    summary = {"config_hash": cfg.hash, "toolkit_version": __version__, "learner": cfg.learner,
               "env": cfg.env_id, "seed": cfg.seed, "labels": " ".join(policy.theta.learnable_labels())}
    failure = None
    try:
        _start(writer, cfg, policy)
        best_J, best_theta, final_policy = float("nan"), policy.theta.learnable_values(), policy
        extra = {}
        try:
            if cfg.learner in ("reinforce", "dpg"):
                train = train_reinforce if cfg.learner == "reinforce" else train_dpg
                curve = train(env, policy, cfg.pg_config(), _pg_event(writer))
                final_policy = curve.policy
                best = max(curve.records, key=lambda r: r.estimate.mean)
                best_J, best_theta = best.estimate.mean, best.theta
                if curve.critic is not None:
                    writer.write_text("critic.txt", curve.critic.to_text())
            elif cfg.learner == "bo":
                curve = train_bo(env, policy, cfg.bo_config(policy), _bo_event(writer))
                final_policy = curve.policy
                inc = curve.state.incumbent
                if inc is not None:
                    best_J, best_theta = inc.y, inc.theta
                writer.write_text(DATASET, bo_dataset_csv(curve.state, policy.theta.learnable_labels()))
            elif cfg.learner == "bc":
                collect, bc_cfg = cfg.bc_settings()
                expert = expert_policy(cfg, policy)
                data = collect_expert(env, expert, int(collect.get("n_pairs", 200)), RNGStream.from_seed(cfg.seed).child(2),
                                      int(collect.get("collect_T", 20)), float(collect.get("holdout_fraction", 0.2)))
                writer.write_text(DATASET, data.to_csv())
                res = train_bc(data, policy, bc_cfg, _bc_event(writer))
                final_policy = res.policy
                ident = res.identifiability
                extra = {"reason": res.reason, "identified": bool(ident.identified), "jacobian_rank": ident.rank}
        except LearnerFailure as exc:
            failure = exc
            log.error("%s", exc)
        except ROLLOUT_FAILURES as exc:
            failure = exc
            log.error("run failed: %s", exc)

        if failure is None:
            ev = evaluate_final(env, final_policy, cfg)
            if cfg.learner in ("bc", "none"):
                best_J, best_theta = ev.mean, final_policy.theta.learnable_values()
            writer.event(event="evaluation", J_mean=ev.mean, J_stderr=ev.std_error,
                         violation_steps=ev.violation_steps, violation_episodes=ev.violation_episodes,
                         theta=final_policy.theta.learnable_values())
            writer.event(event="end", status="ok", best_J=best_J, best_theta=best_theta, **extra)
            writer.write_text(THETA, _theta_text(final_policy))
            summary.update(status="ok", best_J=best_J, best_theta=best_theta, final_J=ev.mean,
                           final_J_stderr=ev.std_error, violation_steps=ev.violation_steps,
                           violation_episodes=ev.violation_episodes, **extra)
        else:
            writer.event(event="end", status="failed", message=str(failure))
            summary.update(status="failed", message=str(failure))
        summary["wall_time"] = time.perf_counter() - t0
        path = writer.commit(summary)
    except BaseException:
        writer.abort()
        raise
    record = RunRecord.load(path)
    if failure is not None:
        raise RunFailure(f"run failed: {failure}", record) from failure
    return record


# -- grid scan -------------------------------------------------------------------

def load_grid(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        grid = path_or_dict
    else:
        try:
            grid = yaml.safe_load(Path(path_or_dict).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"grid: cannot read {path_or_dict} ({exc})"]) from exc
    if not isinstance(grid, dict) or "axes" not in grid:
        raise ConfigError(["grid: must be a mapping with an 'axes' list"])
    return grid


def grid_axes(grid: dict, n_learnable: int) -> list[np.ndarray]:
    """Each axis is ``{values: [...]}`` or ``{linspace: [lo, hi, n]}``, one per learnable coordinate."""
    errs, axes = [], []
    for k, ax in enumerate(grid["axes"]):
        if isinstance(ax, dict) and "values" in ax:
            axes.append(np.asarray(ax["values"], dtype=float).ravel())
        elif isinstance(ax, dict) and "linspace" in ax and len(ax["linspace"]) == 3:
            lo, hi, n = ax["linspace"]
            axes.append(np.linspace(float(lo), float(hi), int(n)))
        else:
            errs.append(f"grid.axes[{k}]: need 'values' or 'linspace: [lo, hi, n]'")
            continue
        if axes[-1].size == 0:
            errs.append(f"grid.axes[{k}]: empty axis")
    if len(grid["axes"]) != n_learnable:
        errs.append(f"grid.axes: {len(grid['axes'])} axes for {n_learnable} learnable coordinates")
    if errs:
        raise ConfigError(errs)
    return axes


def sweep(cfg: ExperimentConfig, grid, compare: str | Path | None = None) -> RunRecord:
    """Evaluate the policy at every grid point on shared evaluation episodes.

    One record holds the whole grid: a ``point`` event per grid point, the
    argmax in the ``end`` event, and with ``compare`` (a BO run directory)
    a ``comparison`` event against that run's incumbent.
    """
    cfg.validate()
    grid = load_grid(grid)
    env = cfg.build_env()
    policy = cfg.build_policy(env)
    axes = grid_axes(grid, policy.theta.n_learnable)
    points = [np.array(p) for p in itertools.product(*axes)]
    seeds = eval_streams(cfg)

    def one(theta):
        try:
            pol = policy.with_theta(policy.theta.with_learnable(theta))
            est = estimate_performance(env, pol, cfg.gamma, cfg.T, seeds=seeds)
            return est.mean, est.std_error, est.violation_mean, False
        except ROLLOUT_FAILURES as exc:
            log.info("grid point %s failed: %s", theta.tolist(), exc)
            return float("nan"), float("nan"), float("nan"), True

    writer = RunWriter(cfg.output, cfg.text)
    t0 = time.perf_counter()
    try:
        _start(writer, cfg, policy)
        writer.event(event="grid", shape=[a.size for a in axes], axes=axes)
        results = ordered_map(one, points, cfg.threads)
        labels = list(policy.theta.learnable_labels())
        table = [",".join(labels + ["J_mean", "J_stderr", "violation_mean", "failed"])]
        for i, (theta, (J, se, viol, failed)) in enumerate(zip(points, results)):
            writer.event(event="point", index=i, theta=theta, J_mean=J, J_stderr=se, violation_mean=viol, failed=failed)
            table.append(",".join([repr(float(v)) for v in theta] + [repr(J), repr(se), repr(viol), str(int(failed))]))
        writer.write_text(DATASET, "\n".join(table) + "\n")
        Js = np.array([r[0] for r in results])
        ok = np.isfinite(Js)
        summary = {"config_hash": cfg.hash, "toolkit_version": __version__, "learner": "sweep",
                   "env": cfg.env_id, "seed": cfg.seed, "labels": " ".join(labels), "n_points": len(points)}
        if ok.any():
            k = int(np.flatnonzero(ok)[np.argmax(Js[ok])])
            best_J, best_theta = float(Js[k]), points[k]
            writer.event(event="end", status="ok", best_J=best_J, best_theta=best_theta, argmax=k,
                         n_points=len(points), n_failed=int((~ok).sum()))
            summary.update(status="ok", best_J=best_J, best_theta=best_theta, n_failed=int((~ok).sum()))
            if compare is not None:
                other = RunRecord.load(compare)
                gap = relative_gap(other.best_J, best_J)
                writer.event(event="comparison", run=str(Path(compare)), run_best_J=other.best_J,
                             run_best_theta=other.best_theta, grid_best_J=best_J, relative_gap=gap)
                summary.update(compare_run=str(Path(compare)), compare_best_J=other.best_J, relative_gap=gap)
        else:
            writer.event(event="end", status="failed", message="every grid point failed")
            summary.update(status="failed")
        summary["wall_time"] = time.perf_counter() - t0
        path = writer.commit(summary)
    except BaseException:
        writer.abort()
        raise
    return RunRecord.load(path)


def relative_gap(value: float, optimum: float) -> float:
    """(optimum - value) / |optimum|: how far a maximiser's value falls short of the optimum."""
    if not (math.isfinite(value) and math.isfinite(optimum)):
        return float("nan")
    return (optimum - value) / max(abs(optimum), 1e-12)

