"""IEEE binary16 helpers.

Arithmetic is evaluated in float64 and rounded once to binary16 (round to
nearest even).  For the operand ranges used here (small integers, 1024-biased
codes, binary16 scales) the float64 intermediate is exact, so each helper is
the correctly rounded binary16 operation.
"""
from __future__ import annotations

import numpy as np

HALF_1024 = 0x6400  # bit pattern of 1024.0


def to_half(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).astype(np.float16)


def bits(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float16).view(np.uint16)


def from_bits(b) -> np.ndarray:
    return np.asarray(b, dtype=np.uint16).view(np.float16)


def lanes(reg) -> np.ndarray:
    """Split uint32 registers into (..., 2) binary16 lanes, low half first."""
    reg = np.asarray(reg, dtype=np.uint32)
    lo = (reg & 0xFFFF).astype(np.uint16)
    hi = (reg >> 16).astype(np.uint16)
    return from_bits(np.stack([lo, hi], axis=-1))


def hsub(a, b) -> np.ndarray:
    return to_half(np.asarray(a, np.float64) - np.asarray(b, np.float64))


def hmul(a, b) -> np.ndarray:
    return to_half(np.asarray(a, np.float64) * np.asarray(b, np.float64))


def hfma(a, b, c) -> np.ndarray:
    return to_half(np.asarray(a, np.float64) * np.asarray(b, np.float64) + np.asarray(c, np.float64))
