"""Deterministic random streams built on the splitmix64 generator.

Every stochastic choice in the package (weight init, noise draws, token
sampling, dataset construction) flows through :class:`RngStream` so that a
single 64-bit master seed pins the whole pipeline bit-for-bit. Substreams are
derived by tag, never by sharing state, so call order in one component cannot
perturb another.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Inverse of 2**53, for mapping the top 53 bits of a draw onto [0, 1).
_U53 = 1.0 / (1 << 53)


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; return (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, z ^ (z >> 31)


class RngStream:
    """A splitmix64 stream with tagged, order-independent substreams."""

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        if not isinstance(seed, int):
            raise TypeError(f"seed must be an int, got {type(seed).__name__}")
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state, out = splitmix64_next(self.state)
        return out

    def next_block(self, count: int) -> np.ndarray:
        """The next `count` outputs as uint64, bit-equal to repeated next_u64.

        splitmix64's state walks by a fixed constant, so the k-th output is a
        pure function of seed + k*constant; that closed form vectorizes.
        """
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        out = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * _GOLDEN) & _MASK64
        return out

    def child(self, tag: int) -> "RngStream":
        """Derive an independent stream from the current state and a tag.

        Pure in (state, tag): the parent is not advanced, and the same tag
        always yields the same child until the parent itself is advanced.
        """
        _, seed = splitmix64_next((self.state ^ (tag & _MASK64)) & _MASK64)
        return RngStream(seed)

    def randint_below(self, n: int) -> int:
        """Uniform int in [0, n). Reduction is next_u64() % n by contract."""
        if n <= 0:
            raise ValueError(f"randint_below requires n > 0, got {n}")
        return self.next_u64() % n

    def uniform(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """Uniform float64 draws in [0, 1) from the top 53 bits."""
        if isinstance(shape, int):
            shape = (shape,)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        bits = self.next_block(count) >> np.uint64(11)
        vals = bits.astype(np.float64) * _U53
        return vals.reshape(shape) if shape else vals.reshape(())

    def normal(
        self, shape: tuple[int, ...] | int = (), dtype=np.float32
    ) -> np.ndarray:
        """Standard normal draws via Box-Muller on paired uniforms."""
        if isinstance(shape, int):
            shape = (shape,)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (count + 1) // 2
        u = self.uniform((2 * pairs,))
        u1 = u[0::2]
        u2 = u[1::2]
        # Guard log(0): shift a zero draw to the smallest representable step.
        u1 = np.where(u1 == 0.0, _U53, u1)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        out = z.astype(dtype)
        return out.reshape(shape) if shape else out.reshape(())

    def partial_shuffle(self, pool_size: int, count: int) -> list[int]:
        """First `count` entries of a Fisher-Yates shuffle of range(pool_size).

        The returned order is the shuffle order, so prefixes are consistent:
        the same stream state and pool always yield the same leading indices.
        """
        if count < 0 or count > pool_size:
            raise ValueError(
                f"count must lie in [0, pool_size]; got count={count}, "
                f"pool_size={pool_size}"
            )
        indices = list(range(pool_size))
        for i in range(count):
            j = i + self.randint_below(pool_size - i)
            indices[i], indices[j] = indices[j], indices[i]
        return indices[:count]
