"""Episodic policy search by Bayesian optimisation over a box of learnable theta coordinates."""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from ..mdp.core import PerformanceEstimate, RolloutError, episode_streams, estimate_performance
from ..ocp.problem import NonConvexOCPError
from ..ocp.solver import OCPInfeasibleError
from ..rng import AUX_LANE, RNGStream
from .gp import constrained_ei, expected_improvement, gp_fit, maximize_acquisition, ucb
from .pg import IterationRecord, LearnerFailure, LearningCurve

log = logging.getLogger(__name__)

MAX_DIMS = 10
ACQUISITIONS = ("ei", "ucb", "cei")


@dataclass(frozen=True)
class OracleResult:
    y: float
    violation: float = 0.0
    failed: bool = False
    estimate: object = None


@dataclass(frozen=True)
class Observation:
    theta: np.ndarray
    y: float                 # penalised value for failed queries
    violation: float
    failed: bool
    feasible: bool


@dataclass(frozen=True)
class BOState:
    lower: np.ndarray
    upper: np.ndarray
    kind: str = "ei"
    beta: float = 2.0
    budget: int = 40                        # remaining oracle queries
    data: tuple[Observation, ...] = ()
    violation_tol: float = 0.0

    def __post_init__(self):
        if self.kind not in ACQUISITIONS:
            raise ValueError(f"unknown acquisition {self.kind!r}")
        if self.lower.shape != self.upper.shape or not np.all(self.upper > self.lower):
            raise ValueError("search box needs upper > lower")
        if self.lower.size > MAX_DIMS:
            raise ValueError(f"BO search space has {self.lower.size} dimensions; at most {MAX_DIMS} are supported")

    @property
    def X(self) -> np.ndarray:
        return np.array([o.theta for o in self.data]).reshape(len(self.data), self.lower.size)

    @property
    def y(self) -> np.ndarray:
        return np.array([o.y for o in self.data])

    @property
    def incumbent(self) -> Observation | None:
        """Best observation; in constrained mode only feasible ones compete."""
        pool = [o for o in self.data if not o.failed and (o.feasible or self.kind != "cei")]
        if not pool:
            return None
        return max(pool, key=lambda o: o.y)

    def penalty(self) -> float:
        """y for a failed query: worst observed minus three times the observed range."""
        ys = [o.y for o in self.data if not o.failed]
        if not ys:
            return -1e6
        rng = max(ys) - min(ys)
        if rng <= 0:
            rng = max(1.0, abs(ys[0]))
        return min(ys) - 3.0 * rng

    def append(self, theta, res: OracleResult) -> "BOState":
        theta = np.asarray(theta, dtype=float).reshape(self.lower.shape)
        y = self.penalty() if res.failed or not math.isfinite(res.y) else float(res.y)
        failed = res.failed or not math.isfinite(res.y)
        obs = Observation(theta, y, float(res.violation), failed, (not failed) and res.violation <= self.violation_tol)
        return replace(self, data=self.data + (obs,), budget=self.budget - 1)


def initial_design(lower, upper, n: int, rng: np.random.Generator) -> np.ndarray:
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    if n <= 0:
        return np.zeros((0, lower.size))
    with warnings.catch_warnings():
        # small designs are rarely a power of two; the balance warning is expected
        warnings.filterwarnings("ignore", message=".*balance properties of Sobol")
        U = qmc.Sobol(lower.size, scramble=True, seed=int(rng.integers(2**63))).random(n)
    return lower + U * (upper - lower)


def propose(state: BOState, rng: np.random.Generator) -> np.ndarray:
    X = state.X
    model = gp_fit(X, state.y, state.lower, state.upper)
    inc = state.incumbent
    inc_y = inc.y if inc is not None else float(np.min(model.y_mean + model.y_std * model.y))
    if state.kind == "ei":
        acq = lambda T: expected_improvement(model, T, inc_y)
    elif state.kind == "ucb":
        acq = lambda T: ucb(model, T, state.beta)
    else:
        # feasibility GP on the violation magnitude minus the tolerance (<= 0 is feasible)
        # failed queries count as violating by the largest finite amount seen
        worst = max([o.violation for o in state.data if not o.failed] + [1.0])
        viol = np.array([worst if o.failed else o.violation for o in state.data])
        feas = gp_fit(X, viol - state.violation_tol, state.lower, state.upper)
        acq = lambda T: constrained_ei(model, [feas], T, inc_y)
    return maximize_acquisition(acq, state.lower, state.upper, rng)


def bo_step(state: BOState, oracle: Callable[[np.ndarray], OracleResult], rng: np.random.Generator) -> BOState:
    """Fit, maximise the acquisition, query the oracle once, append.  Budget 0 returns ``state``."""
    if state.budget <= 0:
        return state
    if not state.data:
        theta = initial_design(state.lower, state.upper, 1, rng)[0]
    else:
        theta = propose(state, rng)
    return state.append(theta, oracle(theta))


@dataclass
class BOConfig:
    lower: Sequence[float]
    upper: Sequence[float]
    budget: int = 40              # total oracle queries, initial design included
    n_initial: int = 5
    acquisition: str = "ei"
    beta: float = 2.0
    gamma: float = 0.95
    T: int = 30
    eval_episodes: int = 20
    common_random_numbers: bool = True
    violation_tol: float = 0.0
    seed: int = 0
    oracle_seed: int | None = None   # episode seeds of the oracle; None -> derived from ``seed``
    threads: int = 1

    def validate(self) -> list[str]:
        errs = []
        lo, hi = np.asarray(self.lower, dtype=float), np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            errs.append("lower and upper must be vectors of equal length")
        elif not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or not np.all(hi > lo):
            errs.append("search box must be finite with upper > lower")
        elif lo.size > MAX_DIMS:
            errs.append(f"BO supports at most {MAX_DIMS} dimensions, got {lo.size}")
        if self.budget < 0:
            errs.append("budget must be >= 0")
        if self.n_initial < 1:
            errs.append("n_initial must be >= 1")
        if self.acquisition not in ACQUISITIONS:
            errs.append(f"unknown acquisition {self.acquisition!r}")
        if not 0.0 < self.gamma < 1.0:
            errs.append("gamma must lie in (0, 1)")
        if self.T < 1 or self.eval_episodes < 1:
            errs.append("T and eval_episodes must be >= 1")
        return errs


def policy_oracle(env, policy, config: BOConfig, stream: RNGStream) -> Callable[[np.ndarray], OracleResult]:
    """Closed-loop return of the policy at theta (learnable coordinates).

    With common random numbers every query sees the same episode seeds, so
    the oracle noise is shared across theta; otherwise query ``i`` draws
    fresh episodes.
    """
    if config.oracle_seed is not None:
        stream = RNGStream.from_seed(config.oracle_seed)
    shared = episode_streams(stream.child(1), config.eval_episodes)
    counter = [0]

    def oracle(theta: np.ndarray) -> OracleResult:
        counter[0] += 1
        seeds = shared if config.common_random_numbers else episode_streams(stream.child(3, counter[0]), config.eval_episodes)
        try:
            pol = policy.with_theta(policy.theta.with_learnable(theta))
            est = estimate_performance(env, pol, config.gamma, config.T, seeds=seeds, threads=config.threads)
        except (RolloutError, OCPInfeasibleError, NonConvexOCPError) as exc:
            log.info("oracle failure at theta=%s: %s", np.asarray(theta).tolist(), exc)
            return OracleResult(float("nan"), float("inf"), True)
        return OracleResult(est.mean, est.violation_mean, False, est)

    return oracle


def train_bo(env, policy, config: BOConfig, callback: Callable | None = None,
             oracle: Callable | None = None) -> LearningCurve:
    """Quasi-random initial design followed by acquisition-driven queries.

    One curve record per query; ``estimate`` holds the incumbent's observed
    value, so the recorded means are monotone by construction.
    """
    errs = config.validate()
    if errs:
        raise ValueError("; ".join(errs))
    lower, upper = np.asarray(config.lower, dtype=float), np.asarray(config.upper, dtype=float)
    if policy.theta.n_learnable != lower.size:
        raise ValueError(f"search box has {lower.size} dims, policy has {policy.theta.n_learnable} learnable")
    stream = RNGStream.from_seed(config.seed)
    rng = stream.child(0).generator(AUX_LANE)
    oracle = oracle if oracle is not None else policy_oracle(env, policy, config, stream)
    state = BOState(lower, upper, config.acquisition, config.beta, config.budget, (), config.violation_tol)
    curve = LearningCurve(labels=tuple(policy.theta.learnable_labels()))
    t0 = time.perf_counter()
    init = initial_design(lower, upper, min(config.n_initial, config.budget), rng)
    try:
        for it in range(config.budget):
            if it < len(init):
                state = state.append(init[it], oracle(init[it]))
            else:
                state = bo_step(state, oracle, rng)
            inc = state.incumbent
            inc_y = inc.y if inc is not None else float("-inf")
            last = state.data[-1]
            est = PerformanceEstimate(inc_y, 0.0, config.eval_episodes, config.gamma, True)
            rec = IterationRecord(it, est, float("nan"), int(last.failed), int(not last.failed),
                                  time.perf_counter() - t0, last.theta.copy(), False)
            curve.add(rec)
            if callback is not None:
                callback(rec, state)
    except Exception as exc:
        raise LearnerFailure(f"train_bo aborted: {exc}", curve) from exc
    inc = state.incumbent
    curve.policy = policy.with_theta(policy.theta.with_learnable(inc.theta)) if inc is not None else policy
    curve.state = state
    return curve
