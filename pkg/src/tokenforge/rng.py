"""Seed derivation.

All randomness descends from one root seed. A child seed is

    child = mix64(mix64(root ^ fnv1a64(label)) + GOLDEN * (index + 1))

with ``mix64`` the splitmix64 finalizer. Children feed numpy's PCG64, whose
output is platform independent.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(label: str) -> int:
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def child_seed(root: int, label: str, index: int = 0) -> int:
    if root < 0 or index < 0:
        raise ValueError("seeds and indices must be non-negative")
    return mix64((mix64(int(root) ^ fnv1a64(label)) + GOLDEN * (int(index) + 1)) & MASK64)


def stream(root: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent generator for the ``(root, label, index)`` triple."""
    return np.random.Generator(np.random.PCG64(child_seed(root, label, index)))
