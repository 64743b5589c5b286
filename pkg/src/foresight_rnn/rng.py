"""Deterministic, splittable random streams.

Built on numpy's Philox counter-based generator seeded through SeedSequence,
so any (seed, path) pair maps to the same stream on every platform and
child streams never overlap with their parents or siblings.
"""

from __future__ import annotations

import zlib

import numpy as np


def _to_key(index) -> int:
    if isinstance(index, str):
        return zlib.crc32(index.encode("utf-8"))
    return int(index)


class RngStream:
    """Random stream identified by (seed, path), advanced by a draw counter.

    Two streams constructed with the same seed and path produce identical
    draw sequences.  ``child(...)`` derives an independent substream; use one
    substream per consumer instead of sharing a stream across consumers.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_to_key(p) for p in path)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )
        self.draws = 0  # scalar values drawn so far

    def child(self, *indices) -> "RngStream":
        """Independent substream; indices may be ints or short strings."""
        return RngStream(self.seed, self.path + tuple(_to_key(i) for i in indices))

    def normal(self, shape=None) -> np.ndarray:
        """Standard normal draw(s) of the given shape (scalar if None)."""
        out = self._gen.standard_normal(shape)
        self.draws += int(np.size(out))
        return out

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        out = self._gen.uniform(low, high, shape)
        self.draws += int(np.size(out))
        return out

    def integers(self, low: int, high: int, shape=None):
        out = self._gen.integers(low, high, shape)
        self.draws += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        out = self._gen.permutation(n)
        self.draws += n
        return out

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path}, draws={self.draws})"
