"""Portable counter-based random stream.

The generator is SplitMix64: the n-th 64-bit output is the SplitMix64
finalizer applied to ``seed + (n + 1) * 0x9E3779B97F4A7C15`` (mod 2**64).
Because every output depends only on ``(seed, counter)`` the stream can be
produced in vectorized blocks and reproduced exactly in any language.
Uniforms use the top 53 bits; Gaussians use the Box-Muller transform on
consecutive uniform pairs.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar SplitMix64 finalizer, used to derive independent sub-seeds."""
    z = value & _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


class Rng:
    """Deterministic stream of uint64 / uniform / Gaussian variates."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Rng) and (self.seed, self.counter) == (other.seed, other.counter)

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream keyed by ``tag``; does not advance self."""
        return Rng(mix64(self.seed ^ mix64(tag + 1)))

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
            out = _mix(z)
        self.counter += n
        return out

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """``n`` uniforms on [lo, hi)."""
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        if lo == 0.0 and hi == 1.0:
            return u
        return lo + (hi - lo) * u

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normals; consumes ``2 * ceil(n / 2)`` uniforms."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """``n`` integers uniform on the closed range [lo, hi]."""
        span = hi - lo + 1
        k = np.floor(self.uniform(n) * span).astype(np.int64)
        return lo + np.minimum(k, span - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n), drawing n - 1 uniforms."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
