"""Flat parameter vector with a named block manifest."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CATEGORIES = ("cost_weights", "terminal_weights", "dynamics_params", "constraint_params", "network")


@dataclass(frozen=True)
class Block:
    name: str
    category: str
    size: int
    learnable: bool = False
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown block category {self.category!r}")
        if self.size < 0:
            raise ValueError("block size must be >= 0")


class ThetaVector:
    """Immutable flat vector whose slices are named blocks.

    Learners only ever see and update the learnable coordinates; every
    modifier returns a new instance.
    """

    __slots__ = ("blocks", "_values", "_slices")

    def __init__(self, blocks: Sequence[Block], values: Iterable[float] | None = None):
        self.blocks = tuple(blocks)
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names")
        self._slices = {}
        start = 0
        for b in self.blocks:
            self._slices[b.name] = slice(start, start + b.size)
            start += b.size
        vals = np.zeros(start) if values is None else np.array(values, dtype=float).reshape(-1)
        if vals.size != start:
            raise ValueError(f"expected {start} values, got {vals.size}")
        vals.setflags(write=False)
        self._values = vals

    def __len__(self) -> int:
        return self._values.size

    def __repr__(self) -> str:
        parts = ", ".join(f"{b.name}{'*' if b.learnable else ''}={self[b.name].tolist()}" for b in self.blocks)
        return f"ThetaVector({parts})"

    def __eq__(self, other) -> bool:
        return (isinstance(other, ThetaVector) and self.blocks == other.blocks
                and np.array_equal(self._values, other._values))

    def __hash__(self):
        return hash((self.blocks, self._values.tobytes()))

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[self._slices[name]]

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    def slice(self, name: str) -> slice:
        return self._slices[name]

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def learnable_mask(self) -> np.ndarray:
        mask = np.zeros(len(self), dtype=bool)
        for b in self.blocks:
            if b.learnable:
                mask[self._slices[b.name]] = True
        return mask

    @property
    def learnable_index(self) -> np.ndarray:
        return np.flatnonzero(self.learnable_mask)

    @property
    def n_learnable(self) -> int:
        return int(self.learnable_mask.sum())

    def learnable_values(self) -> np.ndarray:
        return self._values[self.learnable_mask].copy()

    def learnable_labels(self) -> list[str]:
        out = []
        for b in self.blocks:
            if b.learnable:
                out += [f"{b.name}[{i}]" for i in range(b.size)]
        return out

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([np.full(b.size, b.lower) for b in self.blocks]) if self.blocks else np.zeros(0)

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([np.full(b.size, b.upper) for b in self.blocks]) if self.blocks else np.zeros(0)

    def with_values(self, values) -> "ThetaVector":
        return ThetaVector(self.blocks, values)

    def with_block(self, name: str, value) -> "ThetaVector":
        vals = self._values.copy()
        vals[self._slices[name]] = np.asarray(value, dtype=float).reshape(-1)
        return ThetaVector(self.blocks, vals)

    def with_learnable(self, values) -> "ThetaVector":
        vals = self._values.copy()
        vals[self.learnable_mask] = np.asarray(values, dtype=float).reshape(-1)
        return ThetaVector(self.blocks, vals)

    def with_flags(self, learnable: dict[str, bool] | Iterable[str]) -> "ThetaVector":
        """Set learnable flags; an iterable of names marks exactly those blocks learnable."""
        if not isinstance(learnable, dict):
            names = set(learnable)
            unknown = names - set(self._slices)
            if unknown:
                raise KeyError(f"unknown blocks {sorted(unknown)}")
            learnable = {b.name: b.name in names for b in self.blocks}
        blocks = [replace(b, learnable=learnable.get(b.name, b.learnable)) for b in self.blocks]
        return ThetaVector(blocks, self._values)

    def with_bounds(self, name: str, lower: float = -math.inf, upper: float = math.inf) -> "ThetaVector":
        blocks = [replace(b, lower=lower, upper=upper) if b.name == name else b for b in self.blocks]
        return ThetaVector(blocks, self._values)

    def project(self) -> "ThetaVector":
        """Clamp every coordinate into its block's validity interval."""
        return ThetaVector(self.blocks, np.clip(self._values, self.lower, self.upper))

    def expand(self, learnable_vec: np.ndarray) -> np.ndarray:
        """Scatter a learnable-coordinate vector (or matrix columns) into full width with zeros."""
        learnable_vec = np.asarray(learnable_vec)
        out = np.zeros(learnable_vec.shape[:-1] + (len(self),))
        out[..., self.learnable_mask] = learnable_vec
        return out

    # -- text checkpoint -------------------------------------------------
    #   theta v1
    #   block <name> <category> <size> <learnable 0|1> <lower> <upper>
    #   ...
    #   values
    #   one value per line, full round-trip precision

    def to_text(self) -> str:
        lines = ["theta v1"]
        for b in self.blocks:
            lines.append(f"block {b.name} {b.category} {b.size} {int(b.learnable)} {b.lower!r} {b.upper!r}")
        lines.append("values")
        lines += [repr(float(v)) for v in self._values]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ThetaVector":
        rows = [r.strip() for r in text.splitlines() if r.strip()]
        if rows[0] != "theta v1":
            raise ValueError("not a 'theta v1' manifest")
        blocks, i = [], 1
        while rows[i].startswith("block "):
            _, name, cat, size, learn, lo, hi = rows[i].split()
            blocks.append(Block(name, cat, int(size), bool(int(learn)), float(lo), float(hi)))
            i += 1
        if rows[i] != "values":
            raise ValueError("missing 'values' section")
        return cls(blocks, [float(v) for v in rows[i + 1:]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "ThetaVector":
        return cls.from_text(Path(path).read_text())
