"""Counter-based random number generation.

Every random draw in the package goes through a Philox4x64 generator keyed
by ``(seed, counter)``. Philox is a counter-based algorithm whose output is
fixed by its key, so identical ``RngState`` values produce identical draws
across runs and platforms. Each draw call consumes one counter value and
returns the advanced state; states are plain values owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    """Immutable position in a seeded random stream."""

    seed: int
    counter: int = 0

    def advance(self, n: int = 1) -> "RngState":
        return replace(self, counter=self.counter + n)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.counter & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def gaussian_sample(state: RngState, n: int, dim: int) -> tuple[np.ndarray, RngState]:
    """Draw an ``(n, dim)`` matrix of standard normals.

    Returns the matrix together with the advanced state.
    """
    if n < 1 or dim < 1:
        raise ValueError(f"n and dim must be >= 1, got n={n} dim={dim}")
    draws = state.generator().standard_normal((n, dim))
    return draws, state.advance()


def normal(state: RngState, shape) -> tuple[np.ndarray, RngState]:
    """Standard normal draws of an arbitrary shape."""
    return state.generator().standard_normal(shape), state.advance()


def integers(state: RngState, low: int, high: int, size) -> tuple[np.ndarray, RngState]:
    """Uniform integers in ``[low, high)``."""
    return state.generator().integers(low, high, size=size), state.advance()


def permutation(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    return state.generator().permutation(n), state.advance()


def choice(state: RngState, n: int, k: int) -> tuple[np.ndarray, RngState]:
    """Sample ``k`` distinct indices from ``range(n)`` without replacement."""
    picked = state.generator().choice(n, size=k, replace=False)
    return picked, state.advance()
