"""Counter-based random streams.

Philox is a counter-based generator, so a stream is fully determined by its
key; derived streams (one per sample, per cell, ...) never share state.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed) & MASK64
        self.stream = tuple(int(s) & MASK64 for s in stream)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def derive(self, *index: int) -> "Rng":
        """Independent child stream keyed by ``index`` (e.g. a sample id)."""
        return Rng(self.seed, self.stream + tuple(index))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
