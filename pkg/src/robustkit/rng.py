"""Deterministic counter-based random number generation.

The generator is SplitMix64: draw ``i`` of a stream keyed by ``k`` is
``mix64(k + (i+1) * GAMMA)`` where ``mix64`` is the standard SplitMix64
finalizer and GAMMA is the 64-bit golden-ratio constant.  Because each draw
is a pure function of (key, index), streams are reproducible bit-for-bit
regardless of how many values are requested per call.

Normal variates use the Box-Muller transform on pairs of uniforms, so a
seeded stream of normals is as reproducible as the uniform stream it is
derived from.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64_int(z: int) -> int:
    """SplitMix64 finalizer on a Python int (mod 2**64)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    """Vectorized SplitMix64 finalizer on a uint64 array."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _fold(key: int, part) -> int:
    """Mix one derivation component (int or str) into a stream key."""
    if isinstance(part, str):
        h = 0xCBF29CE484222325  # FNV-1a over UTF-8 bytes
        for b in part.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK
        part = h
    return _mix64_int((key ^ (int(part) & _MASK)) + _GAMMA)


class Rng:
    """Seeded deterministic stream of uniforms, normals and Rademacher signs.

    Two instances with the same seed produce bit-identical draw sequences.
    ``derive`` creates an independent stream keyed by the parent seed and a
    list of tags; derivation depends only on the seed, never on how many
    draws the parent has produced.
    """

    def __init__(self, seed: int):
        self._key = _mix64_int(int(seed))
        self._counter = 0

    def derive(self, *parts) -> "Rng":
        """Return a new independent stream keyed by this seed plus ``parts``."""
        key = self._key
        for p in parts:
            key = _fold(key, p)
        child = Rng.__new__(Rng)
        child._key = key
        child._counter = 0
        return child

    def _raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words of the stream."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64_array(np.uint64(self._key) + idx * np.uint64(_GAMMA))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws in [low, high) with 53-bit mantissas."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + (high - low) * u
        return out.reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Normal draws via Box-Muller on consecutive uniform pairs."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = self.uniform((half,))
        u2 = self.uniform((half,))
        # 1-u1 lies in (0, 1], so the log is finite.
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape)

    def rademacher(self, shape=()) -> np.ndarray:
        """Draws from {-1.0, +1.0} with equal probability."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        bits = (self._raw(n) >> np.uint64(63)).astype(np.float64)
        return (2.0 * bits - 1.0).reshape(shape)

    def randint(self, n: int) -> int:
        """One integer uniform over [0, n); uses the modulo reduction of one raw word."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return int(self._raw(1)[0] % np.uint64(n))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n), driven by the raw word stream."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = int(self._raw(1)[0] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def substream_seed(seed: int, *parts) -> int:
    """Stable integer key for an independent stream named by ``parts``."""
    return Rng(seed).derive(*parts)._key

