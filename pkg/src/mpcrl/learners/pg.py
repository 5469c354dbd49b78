"""Policy-gradient learners: REINFORCE with a Monte-Carlo baseline and deterministic PG.

Both perform gradient *ascent* on the expected discounted return,
theta <- proj(theta + eta_i * clip(g)), with eta_i = eta / sqrt(i + 1) under
the default decay.  States are sampled from undiscounted finite rollouts, so
the gradient estimate weights late steps as heavily as early ones.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..critics import LinearQ, QuadraticFeatures, ReplayBuffer, lstd_q
from ..mdp.core import (Environment, PerformanceEstimate, Trajectory, Transition, episode_streams,
                        estimate_performance, ordered_map, rewards_to_go, rollout)
from ..ocp.solver import OCPInfeasibleError
from ..ocp.theta import ThetaVector
from ..rng import ENV_LANE, POLICY_LANE, RNGStream
from ..sensitivity import SensitivityError

log = logging.getLogger(__name__)

# failures that make a single gradient sample unavailable; the sample is dropped
DROPPABLE = (SensitivityError, OCPInfeasibleError)


class AllSamplesDropped(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class LearnerFailure(RuntimeError):
    """Raised when a training loop aborts; ``curve`` holds the records so far."""

    def __init__(self, msg: str, curve: "LearningCurve"):
        super().__init__(msg)
        self.curve = curve


@dataclass
class PGConfig:
    gamma: float = 0.95
    episodes_per_iteration: int = 20
    T: int = 30
    eta: float = 0.01
    eta_decay: str = "inv_sqrt"        # "inv_sqrt" | "none"
    baseline: str = "mc_value"         # "none" | "mc_value" | "critic"
    clip: float | None = None
    max_iterations: int = 20
    seed: int = 0
    sigma: float | Sequence[float] | None = None   # exploration std; None -> 0.1 x action range
    eval_episodes: int = 50
    threads: int = 1
    # deterministic PG only
    update_every: int = 100            # transitions between updates
    batch_size: int = 200              # transitions per critic fit / states per gradient
    buffer_capacity: int = 50_000
    critic_eps: float = 1e-8

    def __post_init__(self):
        errs = self.validate()
        if errs:
            raise ValueError("; ".join(errs))

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 < self.gamma < 1.0:
            errs.append("gamma must lie in (0, 1)")
        if self.eta < 0 or not math.isfinite(self.eta):
            errs.append("eta must be finite and >= 0")
        if self.eta_decay not in ("inv_sqrt", "none"):
            errs.append(f"unknown eta_decay {self.eta_decay!r}")
        if self.baseline not in ("none", "mc_value", "critic"):
            errs.append(f"unknown baseline {self.baseline!r}")
        if self.clip is not None and not self.clip > 0:
            errs.append("clip must be > 0")
        for name in ("episodes_per_iteration", "T", "max_iterations", "eval_episodes", "threads",
                     "update_every", "batch_size", "buffer_capacity"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        return errs

    def step_size(self, iteration: int) -> float:
        return self.eta / math.sqrt(iteration + 1) if self.eta_decay == "inv_sqrt" else self.eta


@dataclass
class IterationRecord:
    iteration: int
    estimate: PerformanceEstimate
    grad_norm: float
    dropped: int
    used: int
    wall_time: float
    theta: np.ndarray
    rejected: bool = False


@dataclass
class LearningCurve:
    records: list[IterationRecord] = field(default_factory=list)
    labels: tuple[str, ...] = ()
    policy: object = None         # final deterministic policy
    critic: object = None         # final critic (deterministic PG only)
    state: object = None          # final BO state (Bayesian optimisation only)

    def add(self, rec: IterationRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration indices must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    def means(self) -> np.ndarray:
        return np.array([r.estimate.mean for r in self.records])


@dataclass
class GradientEstimate:
    grad: np.ndarray
    per_episode: np.ndarray       # (N, p) contributions; their mean is ``grad``
    dropped: int
    used: int

    @property
    def total(self) -> int:
        return self.dropped + self.used

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


# -- baselines ---------------------------------------------------------------

class MCValueBaseline:
    """b(s, t) = w' [onehot(t), s, s_i s_j (i <= j)], fitted to rewards-to-go."""

    def __init__(self, w: np.ndarray, T: int, n: int, ridge: float = 0.0):
        self.w, self.T, self.n, self.ridge = w, T, n, ridge
        self._iu = np.triu_indices(n)

    @staticmethod
    def features(s, t: int, T: int, n: int, iu=None) -> np.ndarray:
        s = np.asarray(s, dtype=float).reshape(n)
        iu = np.triu_indices(n) if iu is None else iu
        onehot = np.zeros(T)
        onehot[min(max(t, 0), T - 1)] = 1.0
        return np.concatenate([onehot, s, np.outer(s, s)[iu]])

    def __call__(self, s, t: int) -> float:
        return float(self.w @ self.features(s, t, self.T, self.n, self._iu))


def mc_value_baseline(trajectories: Sequence[Trajectory], gamma: float, ridge: float = 1e-8) -> MCValueBaseline:
    """Least-squares fit of reward-to-go on (time one-hot, quadratic state) features.

    Falls back to ridge regression when the design matrix is rank deficient,
    e.g. when every episode visits the same states.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    T = max(len(tr) for tr in trajectories)
    n = np.asarray(trajectories[0].transitions[0].s).size
    iu = np.triu_indices(n)
    X, y = [], []
    for tr in trajectories:
        g = rewards_to_go(tr.rewards, gamma)
        for k, trn in enumerate(tr.transitions):
            X.append(MCValueBaseline.features(trn.s, k, T, n, iu))
            y.append(g[k])
    X, y = np.array(X), np.array(y)
    # feature scaling keeps the rank test meaningful
    scale = np.maximum(np.max(np.abs(X), axis=0), 1e-300)
    Xs = X / scale
    rank = np.linalg.matrix_rank(Xs)
    if rank == Xs.shape[1]:
        w, *_ = np.linalg.lstsq(Xs, y, rcond=None)
        used_ridge = 0.0
    else:
        used_ridge = ridge * max(1.0, float(np.trace(Xs.T @ Xs)) / Xs.shape[1])
        w = np.linalg.solve(Xs.T @ Xs + used_ridge * np.eye(Xs.shape[1]), Xs.T @ y)
        log.debug("baseline design rank %d < %d, ridge %.1e", rank, Xs.shape[1], used_ridge)
    return MCValueBaseline(w / scale, T, n, used_ridge)


def critic_baseline(q: LinearQ, policy) -> Callable:
    """b(s, t) = Q(s, pi(s)) for a deterministic ``policy``."""
    return lambda s, t: q(s, policy.deterministic_act(s))


# -- estimators --------------------------------------------------------------

def _baseline_values(baseline, trajectories) -> list[np.ndarray]:
    if baseline is None:
        return [np.zeros(len(tr)) for tr in trajectories]
    if callable(baseline):
        return [np.array([baseline(trn.s, trn.t) for trn in tr.transitions]) for tr in trajectories]
    vals = [np.asarray(b, dtype=float) for b in baseline]
    if len(vals) != len(trajectories) or any(v.shape != (len(tr),) for v, tr in zip(vals, trajectories)):
        raise ValueError("per-episode baseline arrays must match the trajectories")
    return vals


def reinforce_gradient(trajectories: Sequence[Trajectory], policy, gamma: float, baseline=None,
                       threads: int = 1) -> GradientEstimate:
    """(1/N) sum_i sum_t gamma^t grad log pi(a_t | s_t) (G_t - b(s_t)).

    The gamma^t weight makes this unbiased for the gradient of the discounted
    return from the initial-state distribution (states are weighted by the
    discounted visitation measure).  ``baseline`` is None, a callable
    b(s, t), or one array per trajectory.  Steps whose policy Jacobian is
    unavailable are dropped and counted.
    """
    if not trajectories:
        raise ValueError("no trajectories")
    p = policy.theta.n_learnable
    bvals = _baseline_values(baseline, trajectories)

    def one(i):
        tr = trajectories[i]
        adv = (rewards_to_go(tr.rewards, gamma) - bvals[i]) * gamma ** np.arange(len(tr))
        c = np.zeros(p)
        dropped = 0
        for k, trn in enumerate(tr.transitions):
            if adv[k] == 0.0:
                continue
            try:
                g = policy.grad_log_prob(trn.s, trn.a)
            except DROPPABLE as exc:
                log.debug("dropped sample t=%d: %s", trn.t, exc)
                dropped += 1
                continue
            c += g * adv[k]
        return c, dropped

    out = ordered_map(one, range(len(trajectories)), threads)
    per = np.array([c for c, _ in out]).reshape(len(trajectories), p)
    dropped = sum(d for _, d in out)
    total = sum(len(tr) for tr in trajectories)
    if dropped == total:
        raise AllSamplesDropped(f"all {total} samples dropped")
    return GradientEstimate(per.mean(axis=0), per, dropped, total - dropped)


def dpg_gradient(states, policy, critic: LinearQ) -> GradientEstimate:
    """(1/N) sum_s J_pi(s)' grad_a Q(s, a)|_{a = pi(s)} for a deterministic MPC policy."""
    states = list(states)
    if not states:
        raise ValueError("no states")
    p = policy.theta.n_learnable
    rows, dropped = [], 0
    for s in states:
        try:
            mu, J = policy.mean_and_jacobian(s)
        except DROPPABLE as exc:
            log.debug("dropped state: %s", exc)
            dropped += 1
            continue
        rows.append(J.T @ critic.grad_a(s, mu))
    if not rows:
        raise AllSamplesDropped(f"all {len(states)} samples dropped")
    per = np.array(rows).reshape(len(rows), p)
    return GradientEstimate(per.mean(axis=0), per, dropped, len(rows))


def gradient_step(theta: ThetaVector, grad, eta: float, clip: float | None = None) -> ThetaVector:
    """Ascent step on the learnable coordinates, norm-clipped, then projected onto block bounds."""
    grad = np.asarray(grad, dtype=float).reshape(-1)
    if grad.size != theta.n_learnable:
        raise ValueError(f"gradient has {grad.size} entries, theta has {theta.n_learnable} learnable")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("non-finite gradient; step rejected")
    norm = float(np.linalg.norm(grad))
    if clip is not None and norm > clip:
        grad = grad * (clip / norm)
    return theta.with_learnable(theta.learnable_values() + eta * grad).project()


# -- training loops ----------------------------------------------------------

def _exploration(policy, env: Environment, sigma):
    from ..agents import GaussianPerturbedPolicy

    if isinstance(policy, GaussianPerturbedPolicy):
        return policy if sigma is None else policy.with_sigma(sigma)
    if sigma is None:
        if env.action_low is None or env.action_high is None:
            raise ValueError("sigma must be given when the environment has no action bounds")
        return GaussianPerturbedPolicy.from_action_range(policy, env.action_low, env.action_high)
    return GaussianPerturbedPolicy(policy, sigma)


def _evaluate(env, policy, config: PGConfig, eval_seeds) -> PerformanceEstimate:
    return estimate_performance(env, policy, config.gamma, config.T, seeds=eval_seeds, threads=config.threads)


def _check_frozen(before: ThetaVector, after: ThetaVector) -> None:
    frozen = ~before.learnable_mask
    if not np.array_equal(before.values[frozen], after.values[frozen]):
        raise AssertionError("a frozen theta block was modified")


def _record(curve, it, est, gnorm, dropped, used, t0, theta, rejected, callback):
    rec = IterationRecord(it, est, gnorm, dropped, used, time.perf_counter() - t0,
                          theta.learnable_values().copy(), rejected)
    curve.add(rec)
    if callback is not None:
        callback(rec)


def train_reinforce(env: Environment, policy, config: PGConfig, callback: Callable | None = None) -> LearningCurve:
    """Rollouts -> REINFORCE gradient -> ascent step -> evaluation, repeated.

    Record ``i`` holds the evaluation of the parameters *before* step ``i``;
    one extra record evaluates the final parameters.
    """
    stream = RNGStream.from_seed(config.seed)
    eval_seeds = episode_streams(stream.child(1), config.eval_episodes)
    behaviour = _exploration(policy, env, config.sigma)
    curve = LearningCurve(labels=tuple(behaviour.theta.learnable_labels()))
    t0 = time.perf_counter()
    try:
        for it in range(config.max_iterations):
            est = _evaluate(env, behaviour.base, config, eval_seeds)
            streams = episode_streams(stream.child(0, it), config.episodes_per_iteration)
            trajs = ordered_map(lambda st: rollout(env, behaviour, config.T, st), streams, config.threads)
            if config.baseline == "mc_value":
                base = mc_value_baseline(trajs, config.gamma)
            elif config.baseline == "critic":
                q = lstd_q(trajs, QuadraticFeatures(env.n, env.m), config.gamma, behaviour.base, config.critic_eps)
                base = critic_baseline(q, behaviour.base)
            else:
                base = None
            g = reinforce_gradient(trajs, behaviour, config.gamma, base, config.threads)
            rejected = False
            theta = behaviour.theta
            try:
                new = gradient_step(theta, g.grad, config.step_size(it), config.clip)
            except NonFiniteGradient:
                log.warning("iteration %d: non-finite gradient, step rejected", it)
                new, rejected = theta, True
            _check_frozen(theta, new)
            _record(curve, it, est, g.norm, g.dropped, g.used, t0, theta, rejected, callback)
            behaviour = behaviour.with_theta(new)
        est = _evaluate(env, behaviour.base, config, eval_seeds)
        _record(curve, config.max_iterations, est, float("nan"), 0, 0, t0, behaviour.theta, False, callback)
    except Exception as exc:
        raise LearnerFailure(f"train_reinforce aborted: {exc}", curve) from exc
    curve.policy = behaviour.base
    return curve


def train_dpg(env: Environment, policy, config: PGConfig, callback: Callable | None = None) -> LearningCurve:
    """Off-policy deterministic PG with an LSTD-Q critic on quadratic features.

    The environment is stepped continuously (episodes of length ``T`` restart
    from a fresh initial state); every ``update_every`` transitions the critic
    is refitted on a replay sample against the current deterministic policy
    and one actor step is taken.  ``max_iterations`` counts actor updates.
    """
    stream = RNGStream.from_seed(config.seed)
    eval_seeds = episode_streams(stream.child(1), config.eval_episodes)
    behaviour = _exploration(policy, env, config.sigma)
    buffer = ReplayBuffer(config.buffer_capacity, stream.child(2))
    env_rng = stream.child(0).generator(ENV_LANE)
    pol_rng = stream.child(0).generator(POLICY_LANE)
    feats = QuadraticFeatures(env.n, env.m)
    curve = LearningCurve(labels=tuple(behaviour.theta.learnable_labels()))
    t0 = time.perf_counter()
    s = np.asarray(env.sample_initial(env_rng), dtype=float)
    t = 0
    try:
        for it in range(config.max_iterations):
            est = _evaluate(env, behaviour.base, config, eval_seeds)
            for _ in range(config.update_every):
                a = np.asarray(behaviour.act(s, pol_rng), dtype=float).reshape(env.m)
                a_env, _ = env.clip_action(a)
                s_next, r = env.step(s, a_env, env_rng)
                s_next = np.asarray(s_next, dtype=float)
                # store the applied action: the critic models the environment's response
                buffer.add(Transition(s, a_env, float(r), s_next, t, env.constraint_violation(s, a_env)))
                t += 1
                if t >= config.T:
                    s, t = np.asarray(env.sample_initial(env_rng), dtype=float), 0
                else:
                    s = s_next
            batch = buffer.sample(min(config.batch_size, len(buffer)))
            critic = lstd_q(batch, feats, config.gamma, behaviour.base, config.critic_eps)
            g = dpg_gradient([tr.s for tr in batch], behaviour.base, critic)
            theta = behaviour.theta
            rejected = False
            try:
                new = gradient_step(theta, g.grad, config.step_size(it), config.clip)
            except NonFiniteGradient:
                log.warning("iteration %d: non-finite gradient, step rejected", it)
                new, rejected = theta, True
            _check_frozen(theta, new)
            _record(curve, it, est, g.norm, g.dropped, g.used, t0, theta, rejected, callback)
            behaviour = behaviour.with_theta(new)
        est = _evaluate(env, behaviour.base, config, eval_seeds)
        _record(curve, config.max_iterations, est, float("nan"), 0, 0, t0, behaviour.theta, False, callback)
    except Exception as exc:
        raise LearnerFailure(f"train_dpg aborted: {exc}", curve) from exc
    curve.policy = behaviour.base
    curve.critic = critic
    return curve
