"""Command-line entry point: ``mpcrl <command> [options]``.

Exit codes: 0 success, 2 invalid input (config, grid, file), 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .. import __version__
from .checks import check_grad
from .config import ConfigError, ExperimentConfig
from .records import RecordError
from .run import RunFailure, run, sweep
from .tools import dp_oracle, plot_data

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 2, 3

LEARNER_COMMANDS = {"run-pg": ("reinforce", "dpg"), "run-bo": ("bo",), "run-bc": ("bc",)}
CHECK_GRAD_KEYS = {"n_instances", "delta", "seed"}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _run_flags(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, type=Path, help="experiment YAML file")
    p.add_argument("--seed", type=_u64, help="override the master seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--threads", type=_positive, help="rollout workers (default: available CPUs)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpcrl", description="MPC policy learning toolkit")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_ in [("run", "train the configured learner"),
                        ("run-pg", "train with reinforce or dpg (config must say so)"),
                        ("run-bo", "train with Bayesian optimisation"),
                        ("run-bc", "behavioural cloning from a configured expert")]:
        _run_flags(sub.add_parser(name, help=help_))

    p = sub.add_parser("check-grad", help="finite-difference checks of every analytic gradient")
    _run_flags(p, config_required=False)
    p.add_argument("--n-instances", type=_positive, help="random QPs in the FD batch (default 100)")

    p = sub.add_parser("dp-oracle", help="value iteration and policy enumeration on an 'mdp v1' file")
    p.add_argument("--mdp", required=True, type=Path)
    p.add_argument("--gamma", type=float, help="override the file's discount")
    p.add_argument("--out", help="write q_table.csv and v_table.csv here")

    p = sub.add_parser("plot-data", help="export CSV tables from a run directory")
    p.add_argument("run_dir", type=Path)

    p = sub.add_parser("sweep", help="grid-scan the learnable coordinates")
    _run_flags(p)
    p.add_argument("--grid", required=True, help="grid YAML: axes: [{linspace: [lo, hi, n]} | {values: [...]}]")
    p.add_argument("--compare", type=Path, help="run directory whose best J is compared with the grid optimum")
    return ap


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, output=args.out, threads=args.threads)


def _cmd_run(args) -> int:
    cfg = _load(args)
    allowed = LEARNER_COMMANDS.get(args.command)
    if allowed and cfg.learner not in allowed:
        raise ConfigError([f"learner.id: '{args.command}' needs one of {', '.join(allowed)}, config has '{cfg.learner}'"])
    rec = run(cfg)
    print(f"{rec.path}: best J {rec.summary.get('best_J')} at theta [{rec.summary.get('best_theta')}]")
    return EXIT_OK


def _cmd_check_grad(args) -> int:
    opts = {}
    if args.config is not None:
        try:
            opts = yaml.safe_load(args.config.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"config: cannot read {args.config} ({exc})"]) from exc
        if not isinstance(opts, dict):
            raise ConfigError(["config: top level must be a mapping"])
        bad = sorted(set(opts) - CHECK_GRAD_KEYS)
        if bad:
            raise ConfigError([f"{k}: unknown check-grad key (known: {', '.join(sorted(CHECK_GRAD_KEYS))})" for k in bad])
    n = args.n_instances or int(opts.get("n_instances", 100))
    seed = args.seed if args.seed is not None else int(opts.get("seed", 0))
    report = check_grad(n, seed, float(opts.get("delta", 1e-6)), args.out)
    print("\n".join(report.summary_lines()))
    print("all checks passed" if report.passed else "SOME CHECKS FAILED")
    return EXIT_OK if report.passed else EXIT_FAILURE


def _cmd_dp_oracle(args) -> int:
    if args.gamma is not None and not 0.0 <= args.gamma < 1.0:
        raise ConfigError([f"--gamma: must lie in [0, 1), got {args.gamma}"])
    try:
        tables = dp_oracle(args.mdp, args.gamma, out=args.out)
    except OSError as exc:
        raise ConfigError([f"--mdp: cannot read {args.mdp} ({exc.strerror})"]) from exc
    except (ValueError, KeyError, IndexError) as exc:
        raise ConfigError([f"--mdp: {exc}"]) from exc
    print(tables.v_csv(), end="")
    print(f"bellman residual {tables.residual:.3e}")
    if tables.agree is None:
        print("policy enumeration skipped (too many policies)")
        return EXIT_OK
    print("greedy policy matches enumeration" if tables.agree else "greedy policy DIFFERS from enumeration")
    return EXIT_OK if tables.agree else EXIT_FAILURE


def _cmd_plot_data(args) -> int:
    for name, path in plot_data(args.run_dir).items():
        print(f"{name}: {path}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    rec = sweep(_load(args), args.grid, args.compare)
    print(f"{rec.path}: {rec.summary.get('n_points')} points, best J {rec.summary.get('best_J')} "
          f"at theta [{rec.summary.get('best_theta')}]")
    if "relative_gap" in rec.summary:
        print(f"relative gap of {args.compare}: {rec.summary['relative_gap']}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "run-pg": _cmd_run, "run-bo": _cmd_run, "run-bc": _cmd_run,
            "check-grad": _cmd_check_grad, "dp-oracle": _cmd_dp_oracle, "plot-data": _cmd_plot_data,
            "sweep": _cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which is our validation code too
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, RecordError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RunFailure as exc:
        where = f" (partial record at {exc.record.path})" if exc.record is not None else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
