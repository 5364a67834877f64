"""Portable counter-based random numbers (SplitMix64).

The generator is SplitMix64 (Steele, Lea & Flood 2014, constants as in
Vigna's reference C code).  Its state is a single 64-bit counter, so a block
of ``n`` outputs is a pure function of ``(seed, counter)`` and can be computed
with vectorized unsigned arithmetic.  The raw stream is bit-identical on every
platform; test vectors live in ``tests/test_rng.py``.
"""

from __future__ import annotations

import math

import numpy as np

from diffcd.errors import ShapeError

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_TWO_POW_M53 = 2.0 ** -53


def splitmix64_mix(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(MIX2)
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """A SplitMix64 stream.

    ``seed`` is the initial state; each draw advances ``counter``.  The i-th
    raw output is ``mix(seed + (i + 1) * GOLDEN_GAMMA)`` modulo 2**64.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ShapeError(f"cannot draw {n} values")
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        state = np.uint64(self.seed) + idx * np.uint64(GOLDEN_GAMMA)
        self.counter += n
        return splitmix64_mix(state)

    def fork(self, stream: int) -> "Rng":
        """Independent child stream; does not advance this one."""
        mixed = splitmix64_mix(
            np.array([(self.seed + (int(stream) + 1) * GOLDEN_GAMMA) & _MASK], dtype=np.uint64)
        )
        return Rng(int(mixed[0]) ^ self.seed)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits of each output."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def uniform_range(self, low: float, high: float, n: int | None = None):
        u = self.uniform(1 if n is None else n)
        out = low + (high - low) * u
        return float(out[0]) if n is None else out

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers in [low, high] inclusive."""
        span = high - low + 1
        return low + np.floor(self.uniform(n) * span).astype(np.int64)


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"shape extents must be positive, got {shape}")
    return shape


def standard_normal(rng: Rng, shape) -> np.ndarray:
    """Box-Muller normals as a plain array (used by non-graph code)."""
    shape = _check_shape(shape)
    n = math.prod(shape)
    pairs = (n + 1) // 2
    raw = rng.next_u64(2 * pairs)
    # u1 in (0, 1] keeps log finite
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_POW_M53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:n].reshape(shape)
