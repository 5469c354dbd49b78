"""Exact dynamic programming on small discrete MDPs.

These routines are the ground truth that the sampling-based learners are
checked against.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class DiscreteMDP:
    """Tabular MDP: ``P[s, a, s']`` transition probabilities, ``R[s, a]`` rewards."""

    P: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"P must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValueError(f"R must have shape {P.shape[:2]}, got {R.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("each P[s, a] must be a probability distribution")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @classmethod
    def random(cls, n_states: int, n_actions: int, gamma: float, rng: np.random.Generator) -> "DiscreteMDP":
        P = rng.random((n_states, n_actions, n_states)) + 1e-3
        P /= P.sum(axis=2, keepdims=True)
        R = rng.normal(size=(n_states, n_actions))
        return cls(P, R, gamma)


def bellman_optimality(mdp: DiscreteMDP, Q: np.ndarray) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ Q.max(axis=1)


def bellman_residual(mdp: DiscreteMDP, Q: np.ndarray) -> float:
    return float(np.max(np.abs(bellman_optimality(mdp, Q) - Q)))


def value_iteration(mdp: DiscreteMDP, tol: float = 1e-10, *, max_iter: int = 100_000,
                    history: list | None = None) -> np.ndarray:
    """Optimal Q-table with sup-norm Bellman residual at most ``tol``.

    Stops once gamma * ||Q_{k+1} - Q_k|| <= tol, which bounds the residual of
    the returned iterate by contraction.  ``history`` collects the successive
    sup-norm differences when given.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q = np.zeros_like(mdp.R)
    for _ in range(max_iter):
        Q_new = bellman_optimality(mdp, Q)
        diff = float(np.max(np.abs(Q_new - Q)))
        if history is not None:
            history.append(diff)
        Q = Q_new
        if mdp.gamma * diff <= tol:
            return Q
    raise RuntimeError("value iteration did not converge")  # unreachable for gamma < 1


def _as_policy_table(mdp: DiscreteMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.ndim == 1:
        table = np.zeros((mdp.n_states, mdp.n_actions))
        table[np.arange(mdp.n_states), policy.astype(int)] = 1.0
        return table
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy table has the wrong shape")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-12:
        raise ValueError("policy rows must be distributions")
    return policy.astype(float)


def policy_evaluation(mdp: DiscreteMDP, policy: np.ndarray, tol: float = 1e-12,
                      *, max_iter: int = 1_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Iterative evaluation of V and Q for a (possibly stochastic) policy.

    ``policy`` is either an (S, A) table of action probabilities or an (S,)
    vector of deterministic action indices.  The returned V is computed from
    the returned Q, so V[s] = sum_a pi(a|s) Q[s, a] holds exactly.
    """
    pi = _as_policy_table(mdp, policy)
    r_pi = np.sum(pi * mdp.R, axis=1)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        V_new = r_pi + mdp.gamma * P_pi @ V
        diff = float(np.max(np.abs(V_new - V)))
        V = V_new
        if mdp.gamma * diff <= tol * (1 - mdp.gamma):
            break
    Q = mdp.R + mdp.gamma * mdp.P @ V
    V = np.sum(pi * Q, axis=1)
    return V, Q


def policy_value_direct(mdp: DiscreteMDP, policy: np.ndarray) -> np.ndarray:
    """Solve (I - gamma P_pi) V = r_pi directly."""
    pi = _as_policy_table(mdp, policy)
    r_pi = np.sum(pi * mdp.R, axis=1)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def finite_horizon_value(mdp: DiscreteMDP, policy: np.ndarray, T: int) -> np.ndarray:
    """Expected discounted return of ``T`` steps from each start state."""
    pi = _as_policy_table(mdp, policy)
    r_pi = np.sum(pi * mdp.R, axis=1)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    V = np.zeros(mdp.n_states)
    for _ in range(T):
        V = r_pi + mdp.gamma * P_pi @ V
    return V


def greedy_from_q(Q: np.ndarray) -> np.ndarray:
    """Deterministic greedy policy table; ties go to the lowest action index."""
    Q = np.asarray(Q, dtype=float)
    if not np.all(np.isfinite(Q)):
        raise ValueError("Q must be finite")
    table = np.zeros_like(Q)
    table[np.arange(Q.shape[0]), np.argmax(Q, axis=1)] = 1.0
    return table


def policy_actions(table: np.ndarray) -> np.ndarray:
    return np.argmax(table, axis=1)


def enumerate_optimal_policy(mdp: DiscreteMDP) -> tuple[np.ndarray, np.ndarray]:
    """Brute force over all A**S deterministic policies.

    Returns the action vector whose value dominates and that value.  Among
    policies with equal value the lexicographically first one wins.
    """
    best_actions, best_V = None, None
    for actions in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        V = policy_value_direct(mdp, np.array(actions))
        if best_V is None or np.sum(V) > np.sum(best_V) + 1e-12:
            best_actions, best_V = np.array(actions), V
    return best_actions, best_V


# -- plain-text tensor format ---------------------------------------------
#
#   mdp v1
#   n_states S
#   n_actions A
#   gamma g
#   P
#   S*A lines, line (s*A + a) holds P[s, a, 0..S-1]
#   R
#   S lines, line s holds R[s, 0..A-1]

def save_mdp(mdp: DiscreteMDP, path: str | Path) -> None:
    lines = ["mdp v1", f"n_states {mdp.n_states}", f"n_actions {mdp.n_actions}", f"gamma {mdp.gamma!r}", "P"]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            lines.append(" ".join(repr(float(x)) for x in mdp.P[s, a]))
    lines.append("R")
    for s in range(mdp.n_states):
        lines.append(" ".join(repr(float(x)) for x in mdp.R[s]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mdp(path: str | Path, gamma: float | None = None) -> DiscreteMDP:
    rows = [ln.strip() for ln in Path(path).read_text().splitlines()]
    rows = [ln for ln in rows if ln and not ln.startswith("#")]
    if not rows or rows[0] != "mdp v1":
        raise ValueError("not an 'mdp v1' file")
    header = dict(r.split(None, 1) for r in rows[1:4])
    S, A = int(header["n_states"]), int(header["n_actions"])
    g = float(header["gamma"]) if gamma is None else gamma
    if rows[4] != "P" or rows[5 + S * A] != "R":
        raise ValueError("malformed MDP file sections")
    P = np.array([[float(x) for x in r.split()] for r in rows[5:5 + S * A]]).reshape(S, A, S)
    R = np.array([[float(x) for x in r.split()] for r in rows[6 + S * A:6 + S * A + S]])
    return DiscreteMDP(P, R, g)
