"""Environments, trajectories and Monte-Carlo returns."""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..rng import ENV_LANE, POLICY_LANE, RNGStream, as_stream


class RolloutError(RuntimeError):
    """A policy or environment failed mid-episode; ``t`` is the step index."""

    def __init__(self, t: int, cause: BaseException):
        super().__init__(f"rollout failed at t={t}: {cause}")
        self.t = t
        self.cause = cause


class Environment(ABC):
    """Markov environment with continuous-vector states and actions.

    ``step`` must depend only on ``(s, a, rng)``.  Rewards are emitted by the
    environment; controllers that minimise a stage cost see its negative.
    """

    n: int
    m: int
    action_low: np.ndarray | None = None
    action_high: np.ndarray | None = None

    @abstractmethod
    def sample_initial(self, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def step(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]: ...

    def constraint_violation(self, s: np.ndarray, a: np.ndarray) -> float:
        """Nonnegative magnitude of state/input constraint violation at (s, a)."""
        return 0.0

    def clip_action(self, a: np.ndarray) -> tuple[np.ndarray, bool]:
        if self.action_low is None and self.action_high is None:
            return a, False
        lo = -np.inf if self.action_low is None else self.action_low
        hi = np.inf if self.action_high is None else self.action_high
        c = np.clip(a, lo, hi)
        return c, bool(np.any(c != a))


class PolicyInterface(ABC):
    """``act`` may be stochastic; ``deterministic_act`` is the noise-free map."""

    m: int

    @abstractmethod
    def deterministic_act(self, s: np.ndarray) -> np.ndarray: ...

    def act(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.deterministic_act(s)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    t: int
    violation: float = 0.0


@dataclass
class Trajectory:
    transitions: list[Transition]
    seed: int
    T: int
    n_clipped: int = 0

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.r for tr in self.transitions], dtype=float)

    @property
    def states(self) -> np.ndarray:
        return np.array([tr.s for tr in self.transitions])

    @property
    def actions(self) -> np.ndarray:
        return np.array([tr.a for tr in self.transitions])

    def violation_total(self) -> float:
        return float(sum(tr.violation for tr in self.transitions))


@dataclass(frozen=True)
class PerformanceEstimate:
    mean: float
    std_error: float
    n_episodes: int
    gamma: float
    degenerate: bool = False  # single episode: std_error is not an estimate
    violation_mean: float = 0.0
    returns: tuple[float, ...] = field(default=(), repr=False)


def rollout(env: Environment, policy: PolicyInterface, T: int, rng: RNGStream | int) -> Trajectory:
    """Run one closed-loop episode of exactly ``T`` transitions.

    The environment and the policy draw from separate lanes of the same
    stream so common-random-number comparisons stay aligned when the policy
    changes.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if policy.m != env.m:
        raise ValueError(f"policy action dim {policy.m} != env action dim {env.m}")
    stream = as_stream(rng)
    env_rng = stream.generator(ENV_LANE)
    pol_rng = stream.generator(POLICY_LANE)
    s = np.asarray(env.sample_initial(env_rng), dtype=float)
    transitions = []
    n_clipped = 0
    for t in range(T):
        try:
            a = np.asarray(policy.act(s, pol_rng), dtype=float).reshape(env.m)
        except Exception as exc:  # noqa: BLE001 - re-raised with the step index
            raise RolloutError(t, exc) from exc
        a_env, clipped = env.clip_action(a)
        n_clipped += clipped
        s_next, r = env.step(s, a_env, env_rng)
        s_next = np.asarray(s_next, dtype=float)
        viol = env.constraint_violation(s, a_env)
        transitions.append(Transition(s, a, float(r), s_next, t, viol))
        s = s_next
    return Trajectory(transitions, stream.key, T, n_clipped)


def discounted_return(traj: Trajectory | Sequence[float], gamma: float) -> float:
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    rewards = traj.rewards if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


def reward_to_go(traj: Trajectory | Sequence[float], t: int, gamma: float) -> float:
    """Discounted sum of rewards from step ``t`` to the end of the episode."""
    rewards = traj.rewards if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if not 0 <= t < len(rewards):
        raise IndexError(f"t={t} outside [0, {len(rewards) - 1}]")
    tail = rewards[t:]
    return float(np.sum(tail * gamma ** np.arange(len(tail))))


def rewards_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """All reward-to-go values at once via the backward recursion G_t = r_t + gamma G_{t+1}."""
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def ordered_map(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """Map preserving input order regardless of completion order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def episode_streams(master: RNGStream | int, n_episodes: int) -> list[RNGStream]:
    base = as_stream(master)
    return [base.child(i) for i in range(n_episodes)]


def estimate_performance(
    env: Environment,
    policy: PolicyInterface,
    gamma: float,
    T: int,
    n_episodes: int | None = None,
    rng: RNGStream | int | None = None,
    *,
    seeds: Sequence[RNGStream | int] | None = None,
    threads: int = 1,
) -> PerformanceEstimate:
    """Monte-Carlo estimate of the expected discounted return.

    Pass ``seeds`` (common random numbers) to evaluate different policies on
    the same noise realisations; otherwise episode ``i`` uses ``rng.child(i)``.
    """
    if seeds is None:
        if n_episodes is None or n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if rng is None:
            raise ValueError("either rng or seeds is required")
        streams = episode_streams(rng, n_episodes)
    else:
        streams = [as_stream(s) for s in seeds]
        if not streams:
            raise ValueError("seed list is empty")
    trajs = ordered_map(lambda st: rollout(env, policy, T, st), streams, threads)
    returns = np.array([discounted_return(tr, gamma) for tr in trajs])
    n = len(returns)
    if n == 1:
        se, degenerate = 0.0, True
    else:
        se, degenerate = float(np.std(returns, ddof=1) / math.sqrt(n)), False
    viol = float(np.mean([tr.violation_total() for tr in trajs]))
    return PerformanceEstimate(float(returns.mean()), se, n, gamma, degenerate, viol, tuple(returns.tolist()))
