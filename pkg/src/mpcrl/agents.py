"""Policies: the deterministic MPC law, a Gaussian exploration wrapper and an MLP baseline.

Every differentiable policy exposes ``mean_and_jacobian(s)`` returning the
deterministic action and its Jacobian with respect to the *learnable*
coordinates of ``policy.theta`` (shape m x n_learnable).
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .mdp.core import PolicyInterface
from .ocp.problem import OCPSpec
from .ocp.solver import OCPInfeasibleError, OCPSolution, Status, mpc_action, solve_ocp
from .ocp.theta import Block, ThetaVector
from .sensitivity import PolicyJacobian, policy_jacobian


class MpcPolicy(PolicyInterface):
    """pi_theta(s) = u*_{0|t}: the first input of the parametric OCP at s."""

    def __init__(self, spec: OCPSpec, theta: ThetaVector, tol: float | None = None):
        if len(theta) != sum(b.size for b in spec.layout()):
            raise ValueError("theta does not match the OCP layout")
        self.spec = spec
        self.theta = theta
        self.tol = tol
        self.m = spec.m
        self.n = spec.n

    def __repr__(self) -> str:
        return f"MpcPolicy(n={self.n}, m={self.m}, H={self.spec.H}, learnable={self.theta.n_learnable})"

    def with_theta(self, theta: ThetaVector) -> "MpcPolicy":
        return MpcPolicy(self.spec, theta, self.tol)

    def solve(self, s) -> OCPSolution:
        return solve_ocp(self.spec, self.theta, s, self.tol)

    def deterministic_act(self, s) -> np.ndarray:
        return mpc_action(self.spec, self.theta, s, self.tol)

    def jacobian(self, s, solution: OCPSolution | None = None) -> PolicyJacobian:
        return policy_jacobian(self.spec, self.theta, s, solution if solution is not None else self.solve(s))

    def mean_and_jacobian(self, s) -> tuple[np.ndarray, np.ndarray]:
        sol = self.solve(s)
        if sol.status == Status.INFEASIBLE:
            raise OCPInfeasibleError(np.asarray(s))
        return sol.u0, self.jacobian(s, sol).matrix


class GaussianPerturbedPolicy(PolicyInterface):
    """a = pi_base(s) + eps, eps ~ N(0, diag(sigma^2)), independent per dimension.

    ``grad_log_prob`` differentiates the unclipped Gaussian density; clipping
    to actuator bounds happens in the environment and is counted there.
    """

    def __init__(self, base: PolicyInterface, sigma, _null: bool = False):
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (base.m,)).copy()
        if not _null and not np.all(sigma > 0):
            raise ValueError("sigma entries must be > 0 (use GaussianPerturbedPolicy.null for no noise)")
        self.base = base
        self.sigma = sigma
        self.is_null = _null
        self.m = base.m

    @classmethod
    def null(cls, base: PolicyInterface) -> "GaussianPerturbedPolicy":
        return cls(base, 0.0, _null=True)

    @classmethod
    def from_action_range(cls, base: PolicyInterface, low, high, fraction: float = 0.1) -> "GaussianPerturbedPolicy":
        return cls(base, fraction * (np.asarray(high, dtype=float) - np.asarray(low, dtype=float)))

    @property
    def theta(self) -> ThetaVector:
        return self.base.theta

    def with_theta(self, theta: ThetaVector) -> "GaussianPerturbedPolicy":
        return GaussianPerturbedPolicy(self.base.with_theta(theta), self.sigma, self.is_null)

    def with_sigma(self, sigma) -> "GaussianPerturbedPolicy":
        return GaussianPerturbedPolicy(self.base, sigma)

    def deterministic_act(self, s) -> np.ndarray:
        return self.base.deterministic_act(s)

    def act(self, s, rng: np.random.Generator) -> np.ndarray:
        mu = self.base.deterministic_act(s)
        if self.is_null:
            return mu
        return mu + self.sigma * rng.standard_normal(self.m)

    def log_prob(self, s, a) -> float:
        if self.is_null:
            raise ValueError("null wrapper has no density")
        z = (np.asarray(a, dtype=float) - self.base.deterministic_act(s)) / self.sigma
        return float(-0.5 * z @ z - np.sum(np.log(self.sigma)) - 0.5 * self.m * math.log(2 * math.pi))

    def grad_log_prob(self, s, a) -> np.ndarray:
        """J(s)' diag(sigma)^-2 (a - pi_base(s)) over the learnable coordinates."""
        if self.is_null:
            raise ValueError("null wrapper has no density")
        mu, J = self.base.mean_and_jacobian(s)
        return J.T @ ((np.asarray(a, dtype=float) - mu) / self.sigma**2)


class MlpPolicy(PolicyInterface):
    """Feed-forward tanh network with an affine output layer.

    Weights live in a ThetaVector of category "network" so the learners and
    checkpoint format treat it exactly like the MPC parameters.
    """

    def __init__(self, n: int, m: int, hidden: Sequence[int] = (32, 32), theta: ThetaVector | None = None):
        self.n, self.m = n, m
        self.sizes = [n, *hidden, m]
        if theta is None:
            theta = ThetaVector(self.layout())
        if [b.name for b in theta.blocks] != [b.name for b in self.layout()] or len(theta) != self.n_params:
            raise ValueError("theta does not match the declared layer shapes")
        self.theta = theta

    def layout(self) -> list[Block]:
        out = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            out.append(Block(f"W{i}", "network", a * b, learnable=True))
            out.append(Block(f"b{i}", "network", b, learnable=True))
        return out

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    @classmethod
    def initialized(cls, n: int, m: int, hidden: Sequence[int] = (32, 32), rng: np.random.Generator | None = None) -> "MlpPolicy":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(0) if rng is None else rng
        net = cls(n, m, hidden)
        vals = []
        for a, b in zip(net.sizes[:-1], net.sizes[1:]):
            lim = math.sqrt(6.0 / (a + b))
            vals.append(rng.uniform(-lim, lim, a * b))
            vals.append(np.zeros(b))
        return net.with_theta(net.theta.with_values(np.concatenate(vals)))

    def with_theta(self, theta: ThetaVector) -> "MlpPolicy":
        return MlpPolicy(self.n, self.m, self.sizes[1:-1], theta)

    def _layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            layers.append((self.theta[f"W{i}"].reshape(b, a), self.theta[f"b{i}"]))
        return layers

    def forward(self, s) -> np.ndarray:
        h = np.asarray(s, dtype=float).reshape(-1)
        if h.size != self.n:
            raise ValueError(f"state has {h.size} entries, expected {self.n}")
        layers = self._layers()
        for W, b in layers[:-1]:
            h = np.tanh(W @ h + b)
        W, b = layers[-1]
        return W @ h + b

    def deterministic_act(self, s) -> np.ndarray:
        return self.forward(s)

    def mean_and_jacobian(self, s) -> tuple[np.ndarray, np.ndarray]:
        h = np.asarray(s, dtype=float).reshape(-1)
        if h.size != self.n:
            raise ValueError(f"state has {h.size} entries, expected {self.n}")
        layers = self._layers()
        acts = [h]
        for W, b in layers[:-1]:
            h = np.tanh(W @ h + b)
            acts.append(h)
        W, b = layers[-1]
        out = W @ h + b
        # reverse accumulation, one sweep per output dimension
        full = np.zeros((self.m, self.n_params))
        offsets = []
        off = 0
        for a, b_ in zip(self.sizes[:-1], self.sizes[1:]):
            offsets.append((off, off + a * b_, off + a * b_ + b_))
            off += a * b_ + b_
        L = len(layers)
        for i in range(self.m):
            g = np.zeros(self.m)
            g[i] = 1.0
            for k in range(L - 1, -1, -1):
                w0, w1, b1 = offsets[k]
                full[i, w0:w1] = np.outer(g, acts[k]).ravel()
                full[i, w1:b1] = g
                if k:
                    g = (layers[k][0].T @ g) * (1.0 - acts[k] ** 2)
        return out, full[:, self.theta.learnable_index]


def save_policy_parameters(policy, path) -> None:
    """Flat vector plus block manifest, in the ThetaVector text format."""
    policy.theta.save(path)


def load_policy_parameters(policy, path):
    theta = ThetaVector.load(path)
    if [b.name for b in theta.blocks] != [b.name for b in policy.theta.blocks]:
        raise ValueError("parameter manifest does not match the policy")
    return policy.with_theta(theta)
