"""Bundled desk-scale environments.

* ``chainworld``: discrete chain, actions left/right with optional slip,
  reward 1 while sitting in the rightmost state.
* ``linear_gaussian``: x' = A x + B u + w, w ~ N(0, W), reward
  -(x'Qx + u'Ru).  ``nominal_model`` returns a deliberately biased (A, B)
  for model-mismatch experiments.
* ``constrained_integrator``: double integrator with state/input boxes; the
  boxes are reported as violations, not enforced by the plant.
* ``pendulum``: deterministic torque-limited inverted pendulum, upright at 0.

Initial states are uniform over the documented box of each environment.
"""
from __future__ import annotations

import numpy as np

from .core import Environment
from .dp import DiscreteMDP


class TabularEnv(Environment):
    """Wraps a :class:`DiscreteMDP`; state and action are 1-vectors of indices."""

    n = 1
    m = 1

    def __init__(self, mdp: DiscreteMDP, initial: np.ndarray | None = None):
        self.mdp = mdp
        if initial is None:
            initial = np.full(mdp.n_states, 1.0 / mdp.n_states)
        self.initial = np.asarray(initial, dtype=float)

    def sample_initial(self, rng):
        return np.array([float(rng.choice(self.mdp.n_states, p=self.initial))])

    def step(self, s, a, rng):
        si, ai = int(s[0]), int(round(float(a[0])))
        if not 0 <= ai < self.mdp.n_actions:
            raise ValueError(f"action {ai} out of range")
        s_next = rng.choice(self.mdp.n_states, p=self.mdp.P[si, ai])
        return np.array([float(s_next)]), float(self.mdp.R[si, ai])


def chainworld_mdp(n_states: int = 5, slip: float = 0.0, gamma: float = 0.9, goal_reward: float = 1.0) -> DiscreteMDP:
    """Action 0 moves left, action 1 moves right; with prob. ``slip`` the move reverses."""
    P = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        left, right = max(s - 1, 0), min(s + 1, n_states - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    R = np.zeros((n_states, 2))
    R[n_states - 1, :] = goal_reward
    return DiscreteMDP(P, R, gamma)


def chainworld(n_states: int = 5, slip: float = 0.0, gamma: float = 0.9, start: int | None = 0) -> TabularEnv:
    mdp = chainworld_mdp(n_states, slip, gamma)
    if start is None:
        return TabularEnv(mdp)
    init = np.zeros(n_states)
    init[start] = 1.0
    return TabularEnv(mdp, init)


class LinearGaussianEnv(Environment):
    def __init__(self, A, B, Q=None, R=None, noise_std=0.0, x0_box=1.0,
                 model_A=None, model_B_scale=1.0, model_A_bias=0.0, action_bound=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.n, self.m = self.B.shape
        self.Q = np.eye(self.n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.eye(self.m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
        self.noise_std = np.broadcast_to(np.asarray(noise_std, dtype=float), (self.n,)).copy()
        self.x0_box = np.broadcast_to(np.asarray(x0_box, dtype=float), (self.n,)).copy()
        self.model_B_scale = float(model_B_scale)
        self.model_A_bias = float(model_A_bias)
        if action_bound is not None:
            b = np.broadcast_to(np.asarray(action_bound, dtype=float), (self.m,))
            self.action_low, self.action_high = -b.copy(), b.copy()

    def sample_initial(self, rng):
        return rng.uniform(-self.x0_box, self.x0_box)

    def step(self, s, a, rng):
        r = -(s @ self.Q @ s + a @ self.R @ a)
        w = self.noise_std * rng.standard_normal(self.n)
        return self.A @ s + self.B @ a + w, float(r)

    def nominal_model(self) -> tuple[np.ndarray, np.ndarray]:
        """The (possibly biased) model handed to a model-based controller."""
        return self.A + self.model_A_bias * np.eye(self.n), self.B * self.model_B_scale


class ConstrainedIntegratorEnv(Environment):
    n = 2
    m = 1

    def __init__(self, dt=0.1, x_max=(1.0, 1.0), u_max=1.0, noise_std=0.0, x0_box=(0.8, 0.5),
                 q=(1.0, 0.1), r=0.01):
        self.dt = dt
        self.A = np.array([[1.0, dt], [0.0, 1.0]])
        self.B = np.array([[0.5 * dt * dt], [dt]])
        self.x_max = np.asarray(x_max, dtype=float)
        self.u_max = float(u_max)
        self.action_low, self.action_high = np.array([-u_max]), np.array([u_max])
        self.noise_std = float(noise_std)
        self.x0_box = np.asarray(x0_box, dtype=float)
        self.Q = np.diag(q)
        self.R = np.array([[r]])

    def sample_initial(self, rng):
        return rng.uniform(-self.x0_box, self.x0_box)

    def step(self, s, a, rng):
        r = -(s @ self.Q @ s + a @ self.R @ a)
        w = self.noise_std * rng.standard_normal(2)
        return self.A @ s + self.B @ a + w, float(r)

    def constraint_violation(self, s, a):
        return float(np.sum(np.maximum(np.abs(s) - self.x_max, 0.0)))


class PendulumEnv(Environment):
    n = 2
    m = 1

    def __init__(self, dt=0.05, g=9.81, length=1.0, mass=1.0, damping=0.1, torque_max=2.0,
                 x0_box=(0.3, 0.3), q=(1.0, 0.1), r=0.01):
        self.dt, self.g, self.length, self.mass, self.damping = dt, g, length, mass, damping
        self.action_low, self.action_high = np.array([-torque_max]), np.array([torque_max])
        self.x0_box = np.asarray(x0_box, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.r = float(r)

    def sample_initial(self, rng):
        return rng.uniform(-self.x0_box, self.x0_box)

    def step(self, s, a, rng):
        th, om = s
        r = -(self.q[0] * th * th + self.q[1] * om * om + self.r * float(a[0]) ** 2)
        acc = (self.g / self.length) * np.sin(th) - self.damping * om + float(a[0]) / (self.mass * self.length ** 2)
        om_next = om + self.dt * acc
        th_next = th + self.dt * om_next
        return np.array([th_next, om_next]), float(r)

    def linearization(self) -> tuple[np.ndarray, np.ndarray]:
        """Euler-discretised model linearised about the upright equilibrium."""
        dt, c = self.dt, self.g / self.length
        k = 1.0 / (self.mass * self.length ** 2)
        A = np.array([[1.0 + dt * dt * c, dt * (1 - dt * self.damping)], [dt * c, 1.0 - dt * self.damping]])
        B = np.array([[dt * dt * k], [dt * k]])
        return A, B


def make_env(env_id: str, params: dict | None = None) -> Environment:
    params = dict(params or {})
    if env_id == "chainworld":
        return chainworld(**params)
    if env_id == "linear_gaussian":
        return LinearGaussianEnv(**params)
    if env_id == "constrained_integrator":
        return ConstrainedIntegratorEnv(**params)
    if env_id == "pendulum":
        return PendulumEnv(**params)
    raise KeyError(env_id)


ENV_IDS = ("chainworld", "linear_gaussian", "constrained_integrator", "pendulum")
