"""Counter-based random streams.

Every random draw in the toolkit comes from a Philox generator keyed by a
64-bit stream key.  Keys are derived from ``(master seed, *stream ids)`` so a
rollout's randomness depends only on its identity, never on scheduling order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# second Philox key word, one per consumer inside a rollout
ENV_LANE = 0
POLICY_LANE = 1
AUX_LANE = 2


def derive_key(master: int, *ids: int) -> int:
    """Mix a master seed and a path of stream ids into one 64-bit key."""
    if not ids:
        return int(master) & _MASK64
    ss = np.random.SeedSequence(int(master) & _MASK64, spawn_key=tuple(int(i) for i in ids))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class RNGStream:
    """A named, reproducible source of randomness.

    ``generator(lane)`` always returns a fresh generator positioned at the start
    of the stream, so two calls with the same lane replay identical draws.
    """

    key: int

    @classmethod
    def from_seed(cls, master: int, *ids: int) -> "RNGStream":
        return cls(derive_key(master, *ids))

    def child(self, *ids: int) -> "RNGStream":
        return RNGStream(derive_key(self.key, *ids))

    def generator(self, lane: int = AUX_LANE) -> np.random.Generator:
        bitgen = np.random.Philox(key=np.array([self.key & _MASK64, lane], dtype=np.uint64))
        return np.random.Generator(bitgen)


def as_stream(rng: "RNGStream | int") -> RNGStream:
    if isinstance(rng, RNGStream):
        return rng
    return RNGStream(int(rng) & _MASK64)
