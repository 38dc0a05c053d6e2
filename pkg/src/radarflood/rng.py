"""Portable seeded random numbers.

The generator is xoshiro256** (Blackman and Vigna) seeded by splitmix64, both
written out below so any language can reproduce a stream bit-for-bit:

    splitmix64(x):
        x += 0x9E3779B97F4A7C15
        z = x
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)                  # all arithmetic mod 2**64

    state s[0..3] = four successive splitmix64 outputs from x = seed

    next():
        result = rotl(s[1] * 5, 7) * 9
        t = s[1] << 17
        s[2] ^= s[0]; s[3] ^= s[1]; s[1] ^= s[2]; s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        return result

Derived draws: ``random() = (next() >> 11) * 2**-53``; ``below(n)`` rejects
``next()`` values at or above ``2**64 - (2**64 % n)`` and returns the
remainder mod ``n``; ``normal()`` is the Box-Muller cosine branch
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
"""
from __future__ import annotations

import math

import numpy as np

MASK = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """Return ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK


class Xoshiro256:
    def __init__(self, seed: int):
        x = int(seed) & MASK
        s = []
        for _ in range(4):
            x, out = splitmix64(x)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK, 7) * 9) & MASK
        t = (s1 << 17) & MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, shape, lo: float, hi: float) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = np.array([self.next_u64() >> 11 for _ in range(n)], dtype=np.float64)
        return (lo + (hi - lo) * (u * (1.0 / (1 << 53)))).reshape(shape)

    def normal_array(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the top down."""
        p = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            p[i], p[j] = p[j], p[i]
        return np.array(p, dtype=np.int64)


def derive_seed(seed: int, *labels: int | str) -> int:
    """Deterministic child seed for a (seed, label...) path."""
    x = int(seed) & MASK
    for label in labels:
        if isinstance(label, str):
            label = int.from_bytes(label.encode(), "little") & MASK
        x, out = splitmix64(x ^ (int(label) & MASK))
        x = out
    return x
