"""Behavioural cloning of an expert onto the learnable blocks of an MPC policy.

Loss: mean squared action error, L(theta) = mean ||pi_theta(s) - a||^2, with
gradient (2/N) sum J(s)'(pi_theta(s) - a) through the policy Jacobian.  Only
the theta coordinates that move u*_{0|t} on the visited states can be
recovered; ``identifiability`` reports the rank of the stacked Jacobians.
"""
from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..mdp.core import Environment, episode_streams, ordered_map, rollout
from ..rng import AUX_LANE, RNGStream, as_stream
from .pg import DROPPABLE, AllSamplesDropped, LearnerFailure

log = logging.getLogger(__name__)


@dataclass
class DemoDataset:
    states: np.ndarray               # (N, n)
    actions: np.ndarray              # (N, m)
    expert: str = "expert"
    seed: int = 0
    train_idx: np.ndarray = None
    test_idx: np.ndarray = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        N = self.states.shape[0]
        if self.actions.shape[0] != N:
            raise ValueError("states and actions must have the same number of rows")
        if self.train_idx is None:
            self.train_idx = np.arange(N)
        if self.test_idx is None:
            self.test_idx = np.zeros(0, dtype=int)
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.size != N or not np.array_equal(np.sort(both), np.arange(N)):
            raise ValueError("train/held-out split must be disjoint and cover every pair")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.actions.shape[1]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("# demo v1\n")
        out.write(f"# expert: {self.expert}\n")
        out.write(f"# seed: {self.seed}\n")
        out.write(f"# n: {self.n}\n# m: {self.m}\n")
        cols = [f"s{i}" for i in range(self.n)] + [f"a{j}" for j in range(self.m)] + ["split"]
        out.write(",".join(cols) + "\n")
        split = np.empty(len(self), dtype=object)
        split[self.train_idx] = "train"
        split[self.test_idx] = "test"
        for k in range(len(self)):
            vals = [repr(float(v)) for v in self.states[k]] + [repr(float(v)) for v in self.actions[k]]
            out.write(",".join(vals + [split[k]]) + "\n")
        return out.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "DemoDataset":
        lines = text.splitlines()
        meta = {}
        k = 0
        while k < len(lines) and lines[k].startswith("#"):
            body = lines[k][1:].strip()
            if ":" in body:
                key, val = body.split(":", 1)
                meta[key.strip()] = val.strip()
            elif body != "demo v1":
                raise ValueError(f"unexpected header line {lines[k]!r}")
            k += 1
        if lines[0].strip() != "# demo v1":
            raise ValueError("not a demo dataset (missing '# demo v1')")
        n, m = int(meta["n"]), int(meta["m"])
        header = lines[k].split(",")
        if len(header) != n + m + 1:
            raise ValueError("column header does not match n and m")
        S, A, train, test = [], [], [], []
        for i, line in enumerate(l for l in lines[k + 1:] if l.strip()):
            parts = line.split(",")
            S.append([float(x) for x in parts[:n]])
            A.append([float(x) for x in parts[n:n + m]])
            (train if parts[-1].strip() == "train" else test).append(i)
        return cls(np.array(S).reshape(-1, n), np.array(A).reshape(-1, m), meta.get("expert", "expert"),
                   int(meta.get("seed", 0)), np.array(train, dtype=int), np.array(test, dtype=int))

    @classmethod
    def load(cls, path: str | Path) -> "DemoDataset":
        return cls.from_csv(Path(path).read_text())


def collect_expert(env: Environment, expert, n_pairs: int, rng: RNGStream | int, T: int = 20,
                   holdout_fraction: float = 0.2, expert_id: str = "expert") -> DemoDataset:
    """States from closed-loop expert rollouts; actions are the expert's noise-free outputs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in [0, 1)")
    stream = as_stream(rng)
    n_eps = -(-n_pairs // T)
    trajs = [rollout(env, expert, T, st) for st in episode_streams(stream.child(0), n_eps)]
    S = np.array([tr.s for traj in trajs for tr in traj.transitions])[:n_pairs]
    A = np.array([tr.a for traj in trajs for tr in traj.transitions])[:n_pairs]
    perm = stream.child(1).generator(AUX_LANE).permutation(n_pairs)
    n_test = int(round(holdout_fraction * n_pairs))
    return DemoDataset(S, A, expert_id, stream.key, np.sort(perm[n_test:]), np.sort(perm[:n_test]))


@dataclass
class BCEvaluation:
    loss: float
    grad: np.ndarray | None
    dropped: int
    used: int
    jacobians: np.ndarray | None = None     # (used * m, p)


def _select(dataset: DemoDataset, indices):
    idx = dataset.train_idx if indices is None else np.asarray(indices, dtype=int)
    return dataset.states[idx], dataset.actions[idx]


def bc_loss(policy, dataset: DemoDataset, indices=None, threads: int = 1) -> float:
    """mean ||pi(s) - a||^2 over the chosen pairs (training split by default)."""
    return bc_evaluate(policy, dataset, indices, with_grad=False, threads=threads).loss


def bc_gradient(policy, dataset: DemoDataset, indices=None, threads: int = 1) -> np.ndarray:
    return bc_evaluate(policy, dataset, indices, with_grad=True, threads=threads).grad


def bc_evaluate(policy, dataset: DemoDataset, indices=None, with_grad: bool = True, threads: int = 1) -> BCEvaluation:
    S, A = _select(dataset, indices)
    if len(S) == 0:
        raise ValueError("no pairs selected")

    def one(k):
        try:
            if with_grad:
                mu, J = policy.mean_and_jacobian(S[k])
            else:
                mu, J = policy.deterministic_act(S[k]), None
        except DROPPABLE as exc:
            log.debug("dropped pair %d: %s", k, exc)
            return None
        return mu - A[k], J

    out = ordered_map(one, range(len(S)), threads)
    kept = [o for o in out if o is not None]
    dropped = len(out) - len(kept)
    if not kept:
        raise AllSamplesDropped(f"all {len(out)} pairs dropped")
    loss = float(np.mean([float(r @ r) for r, _ in kept]))
    grad = jac = None
    if with_grad:
        grad = 2.0 * np.mean([J.T @ r for r, J in kept], axis=0)
        jac = np.vstack([J for _, J in kept])
    return BCEvaluation(loss, grad, dropped, len(kept), jac)


@dataclass
class IdentifiabilityReport:
    rank: int
    n_learnable: int
    singular_values: np.ndarray
    state_spread: float
    low_diversity: bool

    @property
    def identified(self) -> bool:
        return self.rank == self.n_learnable and not self.low_diversity


def identifiability(jacobians: np.ndarray, states: np.ndarray, rtol: float = 1e-8, spread_tol: float = 1e-8) -> IdentifiabilityReport:
    sv = np.linalg.svd(jacobians, compute_uv=False) if jacobians.size else np.zeros(0)
    rank = int(np.sum(sv > rtol * max(1.0, float(sv[0]) if sv.size else 0.0)))
    spread = float(np.max(np.std(states, axis=0))) if len(states) > 1 else 0.0
    return IdentifiabilityReport(rank, jacobians.shape[1], sv, spread, spread <= spread_tol)


@dataclass
class BCConfig:
    max_iterations: int = 200
    step0: float = 1.0
    grad_tol: float = 1e-10
    loss_tol: float = 1e-14
    backtrack: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 40
    threads: int = 1

    def validate(self) -> list[str]:
        errs = []
        if self.max_iterations < 0:
            errs.append("max_iterations must be >= 0")
        if not self.step0 > 0:
            errs.append("step0 must be > 0")
        if not 0 < self.backtrack < 1:
            errs.append("backtrack must lie in (0, 1)")
        if not 0 < self.armijo < 1:
            errs.append("armijo must lie in (0, 1)")
        return errs


@dataclass
class BCRecord:
    iteration: int
    train_mse: float
    heldout_mse: float
    grad_norm: float
    step: float
    dropped: int
    used: int
    wall_time: float
    theta: np.ndarray


@dataclass
class BCResult:
    records: list[BCRecord] = field(default_factory=list)
    policy: object = None
    reason: str = ""
    identifiability: IdentifiabilityReport | None = None
    labels: tuple[str, ...] = ()

    @property
    def final(self) -> BCRecord:
        return self.records[-1]


def _heldout(policy, dataset, threads) -> float:
    if dataset.test_idx.size == 0:
        return float("nan")
    return bc_loss(policy, dataset, dataset.test_idx, threads)


def train_bc(dataset: DemoDataset, policy, config: BCConfig | None = None, callback: Callable | None = None) -> BCResult:
    """Full-batch gradient descent with Armijo backtracking on the training loss.

    Stops when the gradient norm or the loss falls below tolerance, when no
    step along the negative gradient decreases the loss, or at
    ``max_iterations``.
    """
    config = config or BCConfig()
    errs = config.validate()
    if errs:
        raise ValueError("; ".join(errs))
    if policy.theta.n_learnable == 0:
        raise ValueError("policy has no learnable blocks")
    res = BCResult(labels=tuple(policy.theta.learnable_labels()))
    t0 = time.perf_counter()
    step = config.step0
    try:
        ev = bc_evaluate(policy, dataset, threads=config.threads)
        res.identifiability = identifiability(ev.jacobians, dataset.states[dataset.train_idx])
        if not res.identifiability.identified:
            log.warning("low state diversity or rank-deficient Jacobians: rank %d of %d, state spread %.2e",
                        res.identifiability.rank, res.identifiability.n_learnable, res.identifiability.state_spread)
        for it in range(config.max_iterations + 1):
            gnorm = float(np.linalg.norm(ev.grad))
            rec = BCRecord(it, ev.loss, _heldout(policy, dataset, config.threads), gnorm, step if it else 0.0,
                           ev.dropped, ev.used, time.perf_counter() - t0, policy.theta.learnable_values().copy())
            res.records.append(rec)
            if callback is not None:
                callback(rec)
            if gnorm <= config.grad_tol:
                res.reason = "gradient norm below tolerance"
                break
            if ev.loss <= config.loss_tol:
                res.reason = "loss below tolerance"
                break
            if it == config.max_iterations:
                res.reason = "max iterations"
                break
            # backtracking from twice the last accepted step
            step = min(step * 2.0, 1e6)
            theta = policy.theta
            accepted = None
            for _ in range(config.max_backtracks):
                cand = theta.with_learnable(theta.learnable_values() - step * ev.grad).project()
                trial = policy.with_theta(cand)
                try:
                    new_ev = bc_evaluate(trial, dataset, threads=config.threads)
                except (AllSamplesDropped, *DROPPABLE):
                    new_ev = None
                decrease = config.armijo * step * gnorm**2
                if new_ev is not None and new_ev.loss <= ev.loss - decrease:
                    accepted = (trial, new_ev)
                    break
                step *= config.backtrack
            if accepted is None:
                res.reason = "line search failed"
                break
            policy, ev = accepted
            res.identifiability = identifiability(ev.jacobians, dataset.states[dataset.train_idx])
    except Exception as exc:
        raise LearnerFailure(f"train_bc aborted: {exc}", res) from exc
    res.policy = policy
    return res
