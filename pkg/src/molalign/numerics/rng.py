"""Seeded random streams.

All randomness goes through :class:`Rng`, a thin wrapper over numpy's PCG64
bit generator. PCG64 output for a given seed is fixed across platforms and
numpy releases, so a seed fully determines every draw.
"""
from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "numpy.PCG64"


def _tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


class Rng:
    algorithm = ALGORITHM

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = tuple(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, tag: str) -> "Rng":
        """Independent stream derived from this seed and a name."""
        return Rng(self.seed, self.stream + (_tag_key(tag),))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True, p=None):
        return self._gen.choice(seq, size=size, replace=replace, p=p)

    def random(self) -> float:
        return float(self._gen.random())

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream}, algorithm={ALGORITHM!r})"
