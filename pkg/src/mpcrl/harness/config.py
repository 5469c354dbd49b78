"""Experiment configuration: one YAML file per experiment, validated in full before a run.

Layout (every top-level key is required except ``threads``)::

    env:
      id: linear_gaussian            # see ENV_IDS
      params: {A: [[1.05]], B: [[1.0]], noise_std: 0.1, action_bound: 2.0}
    policy:
      family: mpc                    # mpc | mlp
      ocp: {H: 5, input_box: true}   # mpc only; n and m come from the environment
      theta: {Q: [1.0], R: [0.1], A: [[1.05]], B: [[0.5]], u_lo: -2, u_hi: 2}
      learnable: [dyn_B]
      bounds: {dyn_B: [0.05, 5.0]}   # validity interval per block
      hidden: [32, 32]               # mlp only
    learner:
      id: reinforce                  # reinforce | dpg | bo | bc | none
      config: {eta: 0.1, max_iterations: 30}
    gamma: 0.95
    T: 30
    n_episodes: 50                   # evaluation episodes (BO: episodes per oracle query)
    seed: 0
    output: runs/mismatch

Only the output directory and the worker count may be overridden from the
environment (``MPCRL_OUT``, ``MPCRL_THREADS``) or the command line.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import inspect
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ..agents import MlpPolicy, MpcPolicy
from ..learners.bo import BOConfig
from ..learners.offline import BCConfig
from ..learners.pg import PGConfig
from ..mdp.envs import ENV_IDS, make_env
from ..ocp.problem import OCPSpec
from ..rng import AUX_LANE, RNGStream

LEARNERS = ("reinforce", "dpg", "bo", "bc", "none")
FAMILIES = ("mpc", "mlp")
TOP_KEYS = {"env", "policy", "learner", "gamma", "T", "n_episodes", "seed", "output", "threads"}
REQUIRED = TOP_KEYS - {"threads"}

# keys of the learner configs that are owned by the top level
_SHARED = {"gamma", "T", "seed", "threads", "eval_episodes"}
BC_COLLECT_KEYS = {"expert", "n_pairs", "holdout_fraction", "collect_T"}


class ConfigError(ValueError):
    """Every problem found in a config, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


def default_threads() -> int:
    """Worker count: MPCRL_THREADS if set, else the CPUs available to this process."""
    env = os.environ.get("MPCRL_THREADS")
    if env:
        return max(1, int(env))
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


THETA_KEYS = set(inspect.signature(OCPSpec.theta).parameters) - {"self", "learnable"}


@dataclass
class ExperimentConfig:
    data: dict
    text: str = ""               # the file's bytes, decoded; hashed and copied verbatim
    source: str = "<memory>"

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<memory>") -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError([f"{source}: not valid YAML ({exc})"]) from exc
        if not isinstance(data, dict):
            raise ConfigError([f"{source}: top level must be a mapping"])
        cfg = cls(data, text, source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        try:
            raw = p.read_bytes()
        except OSError as exc:
            raise ConfigError([f"config: cannot read {p} ({exc.strerror})"]) from exc
        return cls.from_text(raw.decode("utf-8"), str(p))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls.from_text(yaml.safe_dump(data, sort_keys=False))

    def with_overrides(self, seed: int | None = None, output: str | None = None,
                       threads: int | None = None) -> "ExperimentConfig":
        """Copy with command-line overrides applied; ``text`` stays the original file."""
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["seed"] = seed
        if output is not None:
            data["output"] = output
        if threads is not None:
            data["threads"] = threads
        cfg = ExperimentConfig(data, self.text, self.source)
        cfg.validate()
        return cfg

    # -- accessors ------------------------------------------------------------

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    @property
    def env_id(self) -> str:
        return self.data["env"]["id"]

    @property
    def learner(self) -> str:
        return self.data["learner"]["id"]

    @property
    def learner_config(self) -> dict:
        return dict(self.data["learner"].get("config") or {})

    @property
    def gamma(self) -> float:
        return float(self.data["gamma"])

    @property
    def T(self) -> int:
        return int(self.data["T"])

    @property
    def n_episodes(self) -> int:
        return int(self.data["n_episodes"])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output(self) -> Path:
        return Path(os.environ.get("MPCRL_OUT") or self.data["output"])

    @property
    def threads(self) -> int:
        t = self.data.get("threads")
        return default_threads() if t is None else int(t)

    # -- validation -----------------------------------------------------------

    def validate(self) -> None:
        errs = validate_dict(self.data)
        if errs:
            raise ConfigError(errs)

    # -- builders -------------------------------------------------------------

    def build_env(self):
        return make_env(self.env_id, self.data["env"].get("params") or {})

    def build_policy(self, env=None):
        env = env if env is not None else self.build_env()
        return build_policy(self.data["policy"], env, self.seed)

    def pg_config(self) -> PGConfig:
        kw = self.learner_config
        return PGConfig(gamma=self.gamma, T=self.T, seed=self.seed, eval_episodes=self.n_episodes,
                        threads=self.threads, **kw)

    def bo_config(self, policy) -> BOConfig:
        kw = self.learner_config
        if "lower" not in kw or "upper" not in kw:
            th = policy.theta
            kw.setdefault("lower", th.lower[th.learnable_mask].tolist())
            kw.setdefault("upper", th.upper[th.learnable_mask].tolist())
        return BOConfig(gamma=self.gamma, T=self.T, seed=self.seed, eval_episodes=self.n_episodes,
                        threads=self.threads, **kw)

    def bc_settings(self) -> tuple[dict, BCConfig]:
        kw = self.learner_config
        collect = {k: kw.pop(k) for k in list(kw) if k in BC_COLLECT_KEYS}
        return collect, BCConfig(threads=self.threads, **kw)


def build_policy(pol: dict, env, seed: int):
    family = pol["family"]
    if family == "mpc":
        ocp = dict(pol.get("ocp") or {})
        spec = OCPSpec(n=env.n, m=env.m, **ocp)
        theta = spec.theta(**(pol.get("theta") or {}), learnable=list(pol.get("learnable") or []))
        for name, (lo, hi) in (pol.get("bounds") or {}).items():
            theta = theta.with_bounds(name, float(lo), float(hi))
        return MpcPolicy(spec, theta.project(), pol.get("tol"))
    rng = RNGStream.from_seed(seed).child(9).generator(AUX_LANE)
    net = MlpPolicy.initialized(env.n, env.m, tuple(pol.get("hidden") or (32, 32)), rng)
    if pol.get("learnable") is not None:
        net = net.with_theta(net.theta.with_flags(list(pol["learnable"])))
    return net


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_dict(d: dict) -> list[str]:
    """All problems with a config mapping, each naming its field."""
    errs: list[str] = []
    for k in sorted(REQUIRED - set(d)):
        errs.append(f"{k}: missing")
    for k in sorted(set(d) - TOP_KEYS):
        errs.append(f"{k}: unknown key")

    g = d.get("gamma")
    if "gamma" in d and not (_is_num(g) and 0.0 < g < 1.0):
        errs.append(f"gamma: must lie in (0, 1), got {g!r}")
    for k in ("T", "n_episodes"):
        if k in d and not (_is_int(d[k]) and d[k] >= 1):
            errs.append(f"{k}: must be an integer >= 1, got {d[k]!r}")
    if "seed" in d and not (_is_int(d["seed"]) and 0 <= d["seed"] < 2**64):
        errs.append(f"seed: must be an unsigned 64-bit integer, got {d['seed']!r}")
    if "output" in d and not (isinstance(d["output"], str) and d["output"]):
        errs.append("output: must be a non-empty path")
    if d.get("threads") is not None and not (_is_int(d["threads"]) and d["threads"] >= 1):
        errs.append(f"threads: must be an integer >= 1, got {d['threads']!r}")

    env = _check_env(d.get("env"), errs) if "env" in d else None
    policy = _check_policy(d.get("policy"), env, errs) if "policy" in d else None
    if "learner" in d:
        _check_learner(d["learner"], d, env, policy, errs)
    return errs


def _check_env(e, errs):
    if not isinstance(e, dict):
        errs.append("env: must be a mapping with 'id' and 'params'")
        return None
    for k in sorted(set(e) - {"id", "params"}):
        errs.append(f"env.{k}: unknown key")
    eid = e.get("id")
    if eid not in ENV_IDS:
        errs.append(f"env.id: unknown environment {eid!r} (known: {', '.join(ENV_IDS)})")
        return None
    params = e.get("params") or {}
    if not isinstance(params, dict):
        errs.append("env.params: must be a mapping")
        return None
    try:
        return make_env(eid, params)
    except Exception as exc:
        errs.append(f"env.params: {type(exc).__name__}: {exc}")
        return None


def _check_policy(p, env, errs):
    if not isinstance(p, dict):
        errs.append("policy: must be a mapping")
        return None
    family = p.get("family")
    allowed = {"family", "learnable", "bounds", "tol"}
    allowed |= {"ocp", "theta"} if family == "mpc" else {"hidden"}
    if family not in FAMILIES:
        errs.append(f"policy.family: unknown family {family!r} (known: {', '.join(FAMILIES)})")
        return None
    for k in sorted(set(p) - allowed):
        errs.append(f"policy.{k}: unknown key for family {family!r}")
    theta = p.get("theta") or {}
    if family == "mpc":
        if not isinstance(theta, dict):
            errs.append("policy.theta: must be a mapping")
            theta = {}
        for k in sorted(set(theta) - THETA_KEYS):
            errs.append(f"policy.theta.{k}: unknown theta entry (known: {', '.join(sorted(THETA_KEYS))})")
    learnable = p.get("learnable") or []
    if not isinstance(learnable, list) or not all(isinstance(x, str) for x in learnable):
        errs.append("policy.learnable: must be a list of block names")
        learnable = []
    bounds = p.get("bounds") or {}
    if not isinstance(bounds, dict):
        errs.append("policy.bounds: must map block names to [lower, upper]")
        bounds = {}
    for name, b in bounds.items():
        if not (isinstance(b, list) and len(b) == 2 and all(_is_num(x) for x in b) and b[0] < b[1]):
            errs.append(f"policy.bounds.{name}: must be [lower, upper] with lower < upper")
    if env is None:
        return None
    if getattr(env, "action_low", None) is None and not hasattr(env, "m"):
        errs.append("policy: environment has no continuous action space")
        return None
    if type(env).__name__ == "TabularEnv":
        errs.append("policy: tabular environments have no continuous policy family (use dp-oracle)")
        return None
    try:
        if family == "mpc":
            ocp = p.get("ocp") or {}
            if not isinstance(ocp, dict):
                errs.append("policy.ocp: must be a mapping")
                return None
            for k in sorted({"n", "m"} & set(ocp)):
                errs.append(f"policy.ocp.{k}: taken from the environment, do not set it")
            if "H" not in ocp:
                errs.append("policy.ocp.H: missing")
                return None
            layout = {b.name for b in OCPSpec(n=env.n, m=env.m, **{k: v for k, v in ocp.items() if k not in ("n", "m")}).layout()}
        else:
            layout = {b.name for b in MlpPolicy(env.n, env.m, tuple(p.get("hidden") or (32, 32))).layout()}
    except Exception as exc:
        errs.append(f"policy.ocp: {type(exc).__name__}: {exc}" if family == "mpc" else f"policy.hidden: {exc}")
        return None
    for name in learnable:
        if name not in layout:
            errs.append(f"policy.learnable: unknown block {name!r}")
    for name in bounds:
        if name not in layout:
            errs.append(f"policy.bounds: unknown block {name!r}")
    if any(e.startswith("policy") for e in errs):
        return None
    try:
        pol = build_policy(p, env, 0)
    except Exception as exc:
        errs.append(f"policy.theta: {type(exc).__name__}: {exc}")
        return None
    th = pol.theta
    if np.any(th.values[th.learnable_mask] != th.project().values[th.learnable_mask]):
        errs.append("policy.theta: initial learnable values lie outside their bounds")
    return pol


def _check_keys(cfg: dict, allowed: set[str], where: str, errs):
    for k in sorted(set(cfg) - allowed):
        if k in _SHARED:
            errs.append(f"{where}.{k}: set at the top level, not in the learner config")
        else:
            errs.append(f"{where}.{k}: unknown key")


def _check_learner(lr, d, env, policy, errs):
    if not isinstance(lr, dict):
        errs.append("learner: must be a mapping with 'id' and 'config'")
        return
    for k in sorted(set(lr) - {"id", "config"}):
        errs.append(f"learner.{k}: unknown key")
    lid = lr.get("id")
    if lid not in LEARNERS:
        errs.append(f"learner.id: unknown learner {lid!r} (known: {', '.join(LEARNERS)})")
        return
    cfg = lr.get("config") or {}
    if not isinstance(cfg, dict):
        errs.append("learner.config: must be a mapping")
        return
    where = "learner.config"
    if lid in ("reinforce", "dpg"):
        _check_keys(cfg, _fields(PGConfig) - _SHARED, where, errs)
        good = {k: v for k, v in cfg.items() if k in _fields(PGConfig) - _SHARED}
        try:
            PGConfig(**good)
        except ValueError as exc:
            # PGConfig validates on construction and joins its messages with '; '
            errs.extend(f"{where}: {e}" for e in str(exc).split("; "))
        except TypeError as exc:
            errs.append(f"{where}: {exc}")
    elif lid == "bo":
        _check_keys(cfg, _fields(BOConfig) - _SHARED, where, errs)
        good = {k: v for k, v in cfg.items() if k in _fields(BOConfig) - _SHARED}
        if policy is not None:
            th = policy.theta
            if th.n_learnable == 0:
                errs.append("policy.learnable: BO needs at least one learnable block")
            lo = good.get("lower", th.lower[th.learnable_mask].tolist())
            hi = good.get("upper", th.upper[th.learnable_mask].tolist())
            good["lower"], good["upper"] = lo, hi
            if np.size(lo) != th.n_learnable:
                errs.append(f"{where}.lower: has {np.size(lo)} entries, policy has {th.n_learnable} learnable coordinates")
            if not (np.all(np.isfinite(np.asarray(lo, dtype=float))) and np.all(np.isfinite(np.asarray(hi, dtype=float)))):
                errs.append(f"{where}: BO needs a finite search box (set lower/upper or policy.bounds)")
                return
            try:
                bc = BOConfig(**good)
                errs.extend(f"{where}: {e}" for e in bc.validate())
            except (TypeError, ValueError) as exc:
                errs.append(f"{where}: {exc}")
    elif lid == "bc":
        _check_keys(cfg, (_fields(BCConfig) - {"threads"}) | BC_COLLECT_KEYS, where, errs)
        good = {k: v for k, v in cfg.items() if k in _fields(BCConfig) - {"threads"}}
        try:
            errs.extend(f"{where}: {e}" for e in BCConfig(**good).validate())
        except (TypeError, ValueError) as exc:
            errs.append(f"{where}: {exc}")
        n_pairs = cfg.get("n_pairs", 200)
        if not (_is_int(n_pairs) and n_pairs >= 1):
            errs.append(f"{where}.n_pairs: must be an integer >= 1")
        hf = cfg.get("holdout_fraction", 0.2)
        if not (_is_num(hf) and 0.0 <= hf < 1.0):
            errs.append(f"{where}.holdout_fraction: must lie in [0, 1)")
        expert = cfg.get("expert")
        if not isinstance(expert, dict):
            errs.append(f"{where}.expert: missing (theta entries of the expert MPC)")
        elif policy is not None:
            if not isinstance(policy, MpcPolicy):
                errs.append("policy.family: behavioural cloning onto an MPC expert needs family 'mpc'")
            else:
                for k in sorted(set(expert) - THETA_KEYS):
                    errs.append(f"{where}.expert.{k}: unknown theta entry")
        if policy is not None and policy.theta.n_learnable == 0:
            errs.append("policy.learnable: BC needs at least one learnable block")
    elif cfg:
        errs.append(f"{where}: learner 'none' takes no options")
    if lid in ("reinforce", "dpg") and policy is not None and policy.theta.n_learnable == 0:
        errs.append(f"policy.learnable: {lid} needs at least one learnable block")


def expert_policy(cfg: ExperimentConfig, learner_policy: MpcPolicy) -> MpcPolicy:
    """The learner's MPC with the expert's theta entries applied on top of the config's."""
    collect, _ = cfg.bc_settings()
    pol = cfg.data["policy"]
    theta_kw = {**(pol.get("theta") or {}), **collect["expert"]}
    spec = learner_policy.spec
    return MpcPolicy(spec, spec.theta(**theta_kw), learner_policy.tol)

