"""Deterministic random source: xoshiro256** seeded via splitmix64.

A single fixed generator keeps weight initialization, data synthesis, and
shuffling bit-reproducible from one u64 seed, independent of numpy's own
RNG versioning.
"""
from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64_next(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """xoshiro256** stream with uniform, normal, integer, and shuffle draws."""

    def __init__(self, seed: int):
        if not 0 <= seed <= _MASK64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        sm = seed
        state = []
        for _ in range(4):
            sm, out = _splitmix64_next(sm)
            state.append(out)
        self._s = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK64
        result = (((x << 7) | (x >> 57)) & _MASK64) * 9 & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def _u64_block(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.uint64)
        # Inlined step: this loop dominates bulk generation, keep it tight.
        s0, s1, s2, s3 = self._s
        mask = _MASK64
        for i in range(count):
            x = (s1 * 5) & mask
            out[i] = (((x << 7) | (x >> 57)) & mask) * 9 & mask
            t = (s1 << 17) & mask
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & mask
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self, count: int) -> np.ndarray:
        """`count` doubles uniform in [0, 1), 53-bit resolution."""
        bits = self._u64_block(count)
        return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, count: int) -> np.ndarray:
        """`count` standard-normal doubles via Box-Muller.

        Draws ceil(count/2) uniform pairs per call; a leftover half-pair is
        discarded rather than carried, so the consumed stream length depends
        only on `count`.
        """
        pairs = (count + 1) // 2
        bits = self._u64_block(2 * pairs)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = ((bits[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (bits[1::2] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count]

    def exponential(self, count: int) -> np.ndarray:
        """`count` unit-mean exponential doubles (inverse transform)."""
        u = self.uniform(count)
        return -np.log1p(-u)

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
