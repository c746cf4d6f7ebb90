"""Deterministic RNG stream derivation.

Every random draw in the harness comes from a stream derived from
(master seed, purpose tag, ...context). Streams for folds, parameter
init, bootstrap resampling, dropout, and augmentation therefore never
share state, and parallel execution order cannot change any draw.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int | str) -> int:
    """Mix integer/string parts into one 64-bit seed (splitmix64 absorption)."""
    state = 0x8EBC6AF09C88C6E3
    for part in parts:
        if isinstance(part, str):
            for byte in part.encode("utf-8"):
                state = _splitmix64(state ^ byte)
        else:
            state = _splitmix64(state ^ (int(part) & _MASK64))
    return _splitmix64(state)


def stream(*parts: int | str) -> np.random.Generator:
    """PCG64 generator for the stream identified by `parts`."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
