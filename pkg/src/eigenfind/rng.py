"""Deterministic splitmix64 random number generation.

All randomness in the package flows through `Rng`, a stateful splitmix64
stream. The raw 64-bit outputs are pure integer arithmetic, so identical
seeds give identical streams on every platform. Vectorized fills produce
exactly the same values as repeated scalar calls.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53


def mix64(z: int) -> int:
    """splitmix64 output function applied to a single 64-bit state word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Derive an independent child seed from a parent seed and integer tags."""
    s = seed & _MASK64
    for t in tags:
        s = mix64((s + _GOLDEN + (t & _MASK64) * 0xD6E8FEB86659FD93) & _MASK64)
    return mix64((s + _GOLDEN) & _MASK64)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 generator: state advances by the golden gamma per draw.

    `fill_u64(n)` is bit-identical to `n` consecutive `next_u64()` calls.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return mix64(self._state)

    def fill_u64(self, n: int) -> np.ndarray:
        base = self._state
        self._state = (self._state + n * _GOLDEN) & _MASK64
        with np.errstate(over="ignore"):
            lanes = np.uint64(base) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
            return _mix64_array(lanes)

    def spawn(self, tag: int) -> "Rng":
        """Child stream decorrelated from this one; does not advance self."""
        return Rng(derive_seed(self._state, tag))

    # float draws: 53-bit mantissas from the top bits of the u64 stream

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size: int | None = None):
        if size is None:
            u = (self.next_u64() >> 11) * _INV_2_53
            return lo + (hi - lo) * u
        u = (self.fill_u64(size) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return lo + (hi - lo) * u

    def normal(self, size: int | None = None):
        """Standard normal via Box-Muller; consumes 2*ceil(n/2) raw draws."""
        n = 1 if size is None else size
        pairs = (n + 1) // 2
        u = (self.fill_u64(2 * pairs) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log1p(-u[:pairs]))
        theta = (2.0 * math.pi) * u[pairs:]
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if size is None:
            return float(out[0])
        return out

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi); modulo bias is negligible for our ranges."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        return lo + self.next_u64() % (hi - lo)

    def shuffle(self, items: np.ndarray) -> None:
        """Fisher-Yates shuffle in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        self.shuffle(idx)
        return idx
