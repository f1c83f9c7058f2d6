"""SplitMix64 pseudo-random stream.

All randomness that must be portable (weight init, task generation, sampling)
flows through this generator so results are reproducible bit-for-bit from a
seed, independent of numpy version or platform.

Draw ``i`` (1-based) from seed ``s`` is ``mix64(s + i * GOLDEN_GAMMA)``, which
lets block fills be vectorized while matching the sequential stream exactly.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 2**64 as a float, for mapping draws to [0, 1)
_TWO64 = float(2**64)


def mix64(z: int) -> int:
    """SplitMix64 output mix of a 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential generator; state advances by the golden gamma per draw."""

    __slots__ = ("state", "_drawn")

    def __init__(self, seed: int):
        self.state = seed & MASK64
        self._drawn = 0

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        self._drawn += 1
        return mix64(self.state)

    def next_float(self) -> float:
        """Uniform in [0, 1): the 64-bit draw divided by 2**64."""
        return self.next_u64() / _TWO64

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        # floor of u*n; the clamp guards the measure-zero rounding to 1.0
        return min(int(self.next_float() * n), n - 1)

    def choice(self, seq):
        return seq[self.next_below(len(seq))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in ascending order."""
        if k > n:
            raise ValueError("sample larger than population")
        pool = list(range(n))
        self.shuffle(pool)
        return sorted(pool[:k])

    def letters(self, length: int, alphabet: str = "abcdefghijklmnopqrstuvwxyz") -> str:
        return "".join(self.choice(alphabet) for _ in range(length))


def fill_u64(seed: int, start: int, count: int) -> np.ndarray:
    """Draws start+1 .. start+count of the stream seeded with ``seed``.

    Equivalent to skipping ``start`` draws of SplitMix64(seed) and taking the
    next ``count`` outputs, computed without the sequential dependency.
    """
    with np.errstate(over="ignore"):
        idx = np.arange(start + 1, start + 1 + count, dtype=np.uint64)
        z = np.uint64(seed) + idx * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z ^= z >> np.uint64(31)
    return z


def fill_uniform(seed: int, start: int, count: int, low: float, high: float) -> np.ndarray:
    """Uniform float64 draws in [low, high) from the same indexed stream."""
    u = fill_u64(seed, start, count).astype(np.float64) / _TWO64
    return low + u * (high - low)
