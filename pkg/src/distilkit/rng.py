"""Seeded random number generation shared by every component.

The generator is xorshift64* (Vigna 2014): state update
``x ^= x >> 12; x ^= x << 25; x ^= x >> 27`` followed by the output
multiply ``x * 0x2545F4914F6CDD1D``.  Lane states are derived from the
user seed with splitmix64 (increment ``0x9E3779B97F4A7C15``, mix constants
``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``).

Draws are produced in blocks by ``LANES`` independent xorshift lanes that
advance together, which keeps generation vectorised while staying fully
deterministic for a given seed and call sequence.
"""

from __future__ import annotations

import numpy as np

LANES = 256

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_STAR = np.uint64(0x2545F4914F6CDD1D)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """Return ``n`` splitmix64 outputs starting from ``seed``."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * np.arange(1, n + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    # xorshift must never hold an all-zero state
    z[z == 0] = _GOLDEN
    return z


class Rng:
    """xorshift64* generator with block-vectorised lanes."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._state = splitmix64(self.seed, LANES)

    def _step(self) -> np.ndarray:
        x = self._state
        x ^= x >> np.uint64(12)
        x ^= x << np.uint64(25)
        x ^= x >> np.uint64(27)
        self._state = x
        with np.errstate(over="ignore"):
            return x * _STAR

    def bits(self, n: int) -> np.ndarray:
        """``n`` raw 64-bit outputs."""
        blocks = -(-n // LANES)
        out = np.empty(blocks * LANES, dtype=np.uint64)
        for b in range(blocks):
            out[b * LANES:(b + 1) * LANES] = self._step()
        return out[:n]

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws on the open interval (0, 1), float64, 53-bit resolution."""
        n = int(np.prod(shape, dtype=np.int64))
        u = ((self.bits(n) >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller."""
        n = int(np.prod(shape, dtype=np.int64))
        half = -(-n // 2)
        u1 = self.uniform((half,))
        u2 = self.uniform((half,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``; modulo bias is below 2**-40 for the ranges used here."""
        n = int(np.prod(shape, dtype=np.int64))
        span = np.uint64(high - low)
        return (self.bits(n) % span).astype(np.int64).reshape(shape) + low

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self.uniform(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of ``range(n)`` by sorting uniform keys (stable)."""
        return np.argsort(self.uniform((n,)), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices out of ``n``, returned sorted."""
        return np.sort(self.permutation(n)[:k])

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream keyed by ``tag``."""
        child_seed = int(splitmix64(self.seed ^ (tag * 0x5851F42D4C957F2D & 0xFFFFFFFFFFFFFFFF), 1)[0])
        return Rng(child_seed)
