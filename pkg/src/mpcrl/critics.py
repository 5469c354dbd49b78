"""Linear-in-features Q critics: LSTD-Q, fitted-Q and a replay buffer."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .mdp.core import Trajectory, Transition
from .rng import AUX_LANE, RNGStream, as_stream

log = logging.getLogger(__name__)

EPS_DEFAULT = 1e-8
COND_MAX = 1e14


class CriticSingularError(np.linalg.LinAlgError):
    def __init__(self, msg: str, condition: float):
        super().__init__(f"{msg} (condition {condition:.3e})")
        self.condition = condition


class TabularFeatures:
    """Indicator of the (state, action) pair; states and actions are index 1-vectors."""

    def __init__(self, n_states: int, n_actions: int):
        self.n_states, self.n_actions = n_states, n_actions
        self.dim = n_states * n_actions

    def __call__(self, s, a) -> np.ndarray:
        i, j = int(np.asarray(s).reshape(-1)[0]), int(np.asarray(a).reshape(-1)[0])
        if not (0 <= i < self.n_states and 0 <= j < self.n_actions):
            raise IndexError(f"(s, a) = ({i}, {j}) outside the table")
        phi = np.zeros(self.dim)
        phi[i * self.n_actions + j] = 1.0
        return phi

    def table(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w).reshape(self.n_states, self.n_actions)


class QuadraticFeatures:
    """Monomials [1, s, a, s_i s_j (i<=j), s_i a_k, a_k a_l (k<=l)]."""

    def __init__(self, n: int, m: int):
        self.n, self.m = n, m
        self._iss = np.triu_indices(n)
        self._iaa = np.triu_indices(m)
        self.dim = 1 + n + m + len(self._iss[0]) + n * m + len(self._iaa[0])

    def __call__(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=float).reshape(self.n)
        a = np.asarray(a, dtype=float).reshape(self.m)
        ss = np.outer(s, s)[self._iss]
        aa = np.outer(a, a)[self._iaa]
        return np.concatenate([[1.0], s, a, ss, np.outer(s, a).ravel(), aa])

    def grad_a(self, s, a) -> np.ndarray:
        """d phi / d a, shape (dim, m)."""
        s = np.asarray(s, dtype=float).reshape(self.n)
        a = np.asarray(a, dtype=float).reshape(self.m)
        n, m = self.n, self.m
        J = np.zeros((self.dim, m))
        off = 1 + n
        J[off:off + m] = np.eye(m)
        off += m + len(self._iss[0])
        for i in range(n):
            for k in range(m):
                J[off + i * m + k, k] = s[i]
        off += n * m
        for r, (k, l) in enumerate(zip(*self._iaa)):
            J[off + r, k] += a[l]
            J[off + r, l] += a[k]
        return J


@dataclass
class LinearQ:
    w: np.ndarray
    features: object
    eps: float = EPS_DEFAULT
    condition: float = float("nan")

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (self.features.dim,):
            raise ValueError(f"weights have shape {self.w.shape}, features have dim {self.features.dim}")
        if not np.all(np.isfinite(self.w)):
            raise ValueError("non-finite critic weights")

    def __call__(self, s, a) -> float:
        return float(self.w @ self.features(s, a))

    value = __call__

    def grad_a(self, s, a) -> np.ndarray:
        return self.features.grad_a(s, a).T @ self.w

    def to_text(self) -> str:
        lines = ["critic v1", f"{type(self.features).__name__} {self.features.dim}", f"eps {self.eps!r}"]
        lines += [repr(float(x)) for x in self.w]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path, features) -> "LinearQ":
        lines = Path(path).read_text().split("\n")
        if lines[0].strip() != "critic v1":
            raise ValueError("not a critic file")
        kind, dim = lines[1].split()
        if kind != type(features).__name__ or int(dim) != features.dim:
            raise ValueError("critic file does not match the feature map")
        eps = float(lines[2].split()[1])
        w = [float(x) for x in lines[3:] if x.strip()]
        return cls(np.array(w), features, eps)


class ReplayBuffer:
    """Bounded FIFO of transitions with a uniform sampler on its own stream."""

    def __init__(self, capacity: int = 50_000, rng: RNGStream | int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: deque[Transition] = deque(maxlen=capacity)
        self._rng = as_stream(rng).generator(AUX_LANE)

    def __len__(self) -> int:
        return len(self._data)

    def __iter__(self):
        return iter(self._data)

    def add(self, tr: Transition) -> None:
        self._data.append(tr)

    def extend(self, items: Trajectory | Iterable[Transition]) -> None:
        for tr in (items.transitions if isinstance(items, Trajectory) else items):
            self._data.append(tr)

    def sample(self, k: int) -> list[Transition]:
        if not self._data:
            raise ValueError("cannot sample from an empty buffer")
        idx = self._rng.integers(0, len(self._data), size=k)
        return [self._data[i] for i in idx]


def _transitions(data) -> list[Transition]:
    if isinstance(data, Trajectory):
        return list(data.transitions)
    out = []
    for item in data:
        if isinstance(item, Trajectory):
            out.extend(item.transitions)
        else:
            out.append(item)
    return out


def _target_action(target_policy, s):
    if hasattr(target_policy, "deterministic_act"):
        return target_policy.deterministic_act(s)
    return target_policy(s)


def _solve_regularised(A: np.ndarray, b: np.ndarray, eps: float, what: str, strict: bool):
    M = A + eps * np.eye(A.shape[0])
    cond = float(np.linalg.cond(M))
    if not np.isfinite(cond) or cond > COND_MAX:
        if strict:
            raise CriticSingularError(f"{what}: system singular after regularisation eps={eps}", cond)
        log.warning("%s: ill-conditioned normal equations (cond %.2e), using ridge eps=%g", what, cond, eps)
        M = A + max(eps, 1e-6) * np.eye(A.shape[0])
    return np.linalg.solve(M, b), cond


def lstd_q(data, features, gamma: float, target_policy, eps: float = EPS_DEFAULT) -> LinearQ:
    """Solve (A + eps I) w = b, A = sum phi (phi - gamma phi'(s', pi(s')))', b = sum phi r.

    Off-policy: the next action comes from ``target_policy``, not from the data.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    trs = _transitions(data)
    if not trs:
        raise ValueError("no transitions")
    d = features.dim
    A = np.zeros((d, d))
    b = np.zeros(d)
    for tr in trs:
        phi = features(tr.s, tr.a)
        nxt = features(tr.s_next, _target_action(target_policy, tr.s_next)) if gamma else 0.0
        A += np.outer(phi, phi - gamma * nxt)
        b += phi * tr.r
    w, cond = _solve_regularised(A, b, eps, "lstd_q", strict=True)
    return LinearQ(w, features, eps, cond)


def fitted_q_step(data, q: LinearQ, gamma: float, action_grid: Sequence, eps: float = EPS_DEFAULT) -> LinearQ:
    """One regression of w onto r + gamma max_{a' in grid} q(s', a'); ``q`` is the frozen target."""
    grid = [np.atleast_1d(np.asarray(a, dtype=float)) for a in action_grid]
    if not grid:
        raise ValueError("action grid is empty")
    trs = _transitions(data)
    if not trs:
        raise ValueError("no transitions")
    feats = q.features
    Phi = np.array([feats(tr.s, tr.a) for tr in trs])
    targets = np.array([tr.r + gamma * max(q(tr.s_next, a) for a in grid) for tr in trs])
    w, cond = _solve_regularised(Phi.T @ Phi, Phi.T @ targets, eps, "fitted_q_step", strict=False)
    return LinearQ(w, feats, eps, cond)


def fitted_q_iteration(data, features, gamma: float, action_grid, n_iter: int = 500, tol: float = 1e-10,
                       q0: LinearQ | None = None) -> tuple[LinearQ, int]:
    q = q0 if q0 is not None else LinearQ(np.zeros(features.dim), features)
    for k in range(1, n_iter + 1):
        nq = fitted_q_step(data, q, gamma, action_grid)
        if np.max(np.abs(nq.w - q.w)) <= tol:
            return nq, k
        q = nq
    return q, n_iter


def policy_value(q: LinearQ, policy) -> Callable:
    """V(s) = Q(s, pi(s))."""
    return lambda s: q(s, _target_action(policy, s))


def advantage(q: LinearQ, v_baseline: Callable, s, a) -> float:
    return q(s, a) - float(v_baseline(s))
