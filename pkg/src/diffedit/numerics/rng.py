"""Counter-based random streams keyed by ``(master_seed, stream_id)``.

Backed by numpy's Philox4x64 bit generator: the 128-bit key is the pair
``(master_seed, stream_id)`` and the 256-bit counter starts at zero, so any
stream can be rebuilt anywhere without replaying other streams.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class RngError(ValueError):
    pass


class RngStream:
    """Single-owner random stream; split instead of sharing across workers."""

    def __init__(self, master_seed: int, stream_id: int = 0):
        self.master_seed = int(master_seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        # an explicit uint64 array: a list of Python ints would round through float64
        key = np.array([self.master_seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key, counter=0)
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def counter(self) -> int:
        """Low 64 bits of the Philox block counter."""
        return int(self._bitgen.state["state"]["counter"][0])

    def split(self, child: int) -> "RngStream":
        """Independent child stream, derived from the key alone."""
        sub = (self.stream_id * 0x9E3779B97F4A7C15 + int(child) + 1) & _MASK64
        return RngStream(self.master_seed, sub)

    def gaussian(self, shape) -> np.ndarray:
        return gaussian(self, shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        _check_shape(shape)
        return self._gen.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self._gen.random(size) < p


def _check_shape(shape) -> tuple[int, ...]:
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    if len(shape) == 0 or any(int(n) <= 0 for n in shape):
        raise RngError(f"invalid shape {shape}: extents must be positive")
    return shape


def gaussian(rng: RngStream, shape) -> np.ndarray:
    """I.i.d. standard normal draws; advances the stream counter."""
    return rng._gen.standard_normal(_check_shape(shape))
