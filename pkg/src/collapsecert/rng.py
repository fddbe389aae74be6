"""Seeded, fully specified PRNG used everywhere randomness is needed.

The generator is xoshiro256** seeded through splitmix64, with gaussians via
Box-Muller. No platform RNG is involved, so every stream is bit-reproducible
from an integer seed on any machine.
"""
from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_TWO_PI = 2.0 * math.pi


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output)."""
    state = (state + _GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, tag: int) -> int:
    """Deterministically derive an independent stream seed from (seed, tag)."""
    _, a = splitmix64(seed & _MASK64)
    _, b = splitmix64((a ^ (tag & _MASK64)) & _MASK64)
    return b


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** stream with explicit state for checkpointing."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        if not any(s):  # all-zero state is the one forbidden fixed point
            s[0] = 1
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def gaussians(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller.

        Always draws two uniforms per pair and discards the spare value when
        n is odd, so the stream position depends only on n.
        """
        out = np.empty(n if n % 2 == 0 else n + 1, dtype=np.float64)
        for i in range(0, out.size, 2):
            u1 = 1.0 - self.uniform()  # (0, 1], keeps log finite
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(_TWO_PI * u2)
            out[i + 1] = r * math.sin(_TWO_PI * u2)
        return out[:n]

    def integer(self, bound: int) -> int:
        """One integer in [0, bound). Modulo reduction; bias is irrelevant here,
        determinism is what matters."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def shuffle(self, values: np.ndarray) -> None:
        """In-place Fisher-Yates with a fixed draw order."""
        for i in range(values.shape[0] - 1, 0, -1):
            j = self.integer(i + 1)
            values[i], values[j] = values[j], values[i]

    def choice_weighted(self, weights: np.ndarray) -> int:
        """Index drawn proportionally to nonnegative weights (one uniform)."""
        total = float(weights.sum())
        if total <= 0.0:
            raise ValueError("weights must have positive total")
        r = self.uniform() * total
        acc = 0.0
        last = weights.shape[0] - 1
        for i in range(last):
            acc += float(weights[i])
            if r < acc:
                return i
        return last

    def get_state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def set_state(self, state) -> None:
        s = [int(x) & _MASK64 for x in state]
        if len(s) != 4:
            raise ValueError("xoshiro256 state must have 4 words")
        self._s = s
