"""Deterministic random-number streams.

Every stochastic component in the package draws from an RngStream owned by
its caller. A stream is fully determined by (seed, stream_id), so any run is
reproducible from its seed alone, and independent components can be given
independent streams without coordinating draw order.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RngStream"]

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # splitmix64 finalizer; decorrelates sequential ids into child stream ids.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """A named PCG64 generator derived from (seed, stream_id).

    Streams with equal (seed, stream_id) produce identical draw sequences;
    distinct stream ids are statistically independent. ``derive`` builds a
    child stream whose id mixes the parent id with a key, so components can
    hand out sub-streams without risking collisions between siblings.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id) & _MASK64
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, key: int) -> "RngStream":
        child = _splitmix64((self.stream_id * 0x9E3779B97F4A7C15 + key + 1) & _MASK64)
        return RngStream(self.seed, child)

    # Draw helpers; all return float64 / int64 numpy values.

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size=size, dtype=np.float64)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def sample_standard_normal(shape, rng: RngStream) -> np.ndarray:
    """Standard normal draws as a float64 array of the given shape."""
    return rng.standard_normal(size=shape)
