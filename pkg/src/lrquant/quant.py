"""Grouped asymmetric b-bit quantization and the half-quadratic zero-point solver.

Groups are ``group_size`` consecutive columns of one row, so scales and zeros
have shape ``(rows, cols // group_size)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError
from .tensor_store import read_container, write_container

EPS = 1e-8


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 3
    group_size: int = 64
    p: float = 0.7
    beta0: float = 10.0
    beta_growth: float = 1.01
    inner_iters: int = 20
    rounding: str = "half-away-from-zero"

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if not 0 < self.p < 1:
            raise ConfigError(f"p must be in (0, 1), got {self.p}")
        if self.beta0 <= 0 or self.beta_growth <= 1:
            raise ConfigError("beta0 must be > 0 and beta_growth > 1")
        if self.inner_iters < 0:
            raise ConfigError("inner_iters must be >= 0")
        if self.rounding != "half-away-from-zero":
            raise ConfigError(f"unsupported rounding {self.rounding!r}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantizedMatrix:
    codes: np.ndarray  # (rows, cols) uint8
    scales: np.ndarray  # (rows, cols // group_size) float32
    zeros: np.ndarray  # same shape as scales
    bits: int = 3
    group_size: int = 64

    def __post_init__(self):
        rows, cols = self.codes.shape
        if cols % self.group_size:
            raise ShapeError(f"group size {self.group_size} does not divide {cols} columns")
        gshape = (rows, cols // self.group_size)
        if self.scales.shape != gshape or self.zeros.shape != gshape:
            raise ShapeError(f"scales/zeros must have shape {gshape}")
        if self.codes.size and int(self.codes.max()) > (1 << self.bits) - 1:
            raise ShapeError("code outside the b-bit range")
        if not (self.scales > 0).all():
            raise ShapeError("scales must be strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero (np.round rounds ties to even)."""
    a = np.abs(x)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.copysign(r, x)


def _grouped(x: np.ndarray, group_size: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {x.shape}")
    rows, cols = x.shape
    if x.size == 0:
        raise ShapeError("empty matrix")
    if cols % group_size:
        raise ShapeError(f"group size {group_size} does not divide {cols} columns")
    return x.reshape(rows, cols // group_size, group_size)


def init_quant_params(target, cfg: QuantConfig = QuantConfig()):
    """Min-max scale and zero-point per group."""
    g = _grouped(np.asarray(target, dtype=np.float32), cfg.group_size)
    lo = g.min(axis=-1)
    hi = g.max(axis=-1)
    s = np.maximum((hi - lo) / np.float32(cfg.qmax), np.float32(EPS)).astype(np.float32)
    z = (-lo / s).astype(np.float32)
    return s, z


def _check_params(g: np.ndarray, s, z):
    s = np.asarray(s, dtype=np.float32)
    z = np.asarray(z, dtype=np.float32)
    if s.shape != g.shape[:2] or z.shape != g.shape[:2]:
        raise ShapeError(f"scale/zero shape {s.shape}/{z.shape} does not match groups {g.shape[:2]}")
    return s[..., None], z[..., None]


def _codes(g, s, z, qmax):
    return np.clip(round_half_away(g / s + z), 0, qmax)


def quantize(target, s, z, cfg: QuantConfig = QuantConfig()) -> QuantizedMatrix:
    g = _grouped(np.asarray(target, dtype=np.float32), cfg.group_size)
    s3, z3 = _check_params(g, s, z)
    codes = _codes(g, s3, z3, cfg.qmax).astype(np.uint8).reshape(g.shape[0], -1)
    return QuantizedMatrix(codes, s3[..., 0].copy(), z3[..., 0].copy(), cfg.bits, cfg.group_size)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    g = q.codes.reshape(q.codes.shape[0], -1, q.group_size).astype(np.float32)
    out = q.scales[..., None] * (g - q.zeros[..., None])
    return out.reshape(q.codes.shape)


def shrink_lp(x, beta: float, p: float) -> np.ndarray:
    """Generalized soft-thresholding for the l_p (p < 1) penalty; maps 0 to 0."""
    x = np.asarray(x)
    a = np.abs(x)
    safe = np.where(a > 0, a, 1)
    return np.sign(x) * np.maximum(a - safe ** (p - 1) / beta, 0)


def _frob(x) -> float:
    return float(np.sqrt(np.sum(np.square(x, dtype=np.float64))))


def hqq_solve(target, cfg: QuantConfig, s, z) -> QuantizedMatrix:
    """Optimize zero-points against ``target`` with the scales held fixed.

    Alternates the shrinkage step on the reconstruction residual with a
    closed-form per-group zero-point update.  Stops early at the first
    iteration that fails to lower the Frobenius error and returns the best
    zero-point seen (the initial one included), so the result is never worse
    than round-to-nearest with the initial parameters.
    """
    g = _grouped(np.asarray(target, dtype=np.float32), cfg.group_size)
    s3, z3 = _check_params(g, s, z)
    qmax = cfg.qmax
    beta = cfg.beta0

    def error(zz):
        return _frob(g - s3 * (_codes(g, s3, zz, qmax) - zz))

    best_z, best_err = z3, error(z3)
    zk = z3
    for _ in range(cfg.inner_iters):
        wq = _codes(g, s3, zk, qmax)
        wdq = s3 * (wq - zk)
        m = shrink_lp(g - wdq, beta, cfg.p)
        zk = np.mean(wq - (g - m) / s3, axis=-1, keepdims=True, dtype=np.float32)
        beta *= cfg.beta_growth
        if not np.isfinite(zk).all():
            raise NumericError("non-finite zero-point in half-quadratic solve")
        err = error(zk)
        if err < best_err:
            best_z, best_err = zk, err
        else:
            break
    return quantize(target, s3[..., 0], best_z[..., 0], cfg)


# -- serialization ---------------------------------------------------------

def save_quantized(q: QuantizedMatrix, path, name: str = "") -> None:
    """Codes as one byte each, then float32 scales and zeros."""
    rows, cols = q.shape
    header = {"name": name, "rows": rows, "cols": cols, "dtype": "u8-asym",
              "bits": q.bits, "group_size": q.group_size}
    payload = q.codes.astype(np.uint8).tobytes() + q.scales.astype("<f4").tobytes() + q.zeros.astype("<f4").tobytes()
    write_container(path, header, payload)


def load_quantized(path) -> QuantizedMatrix:
    header, payload = read_container(path)
    if header.get("dtype") != "u8-asym":
        raise FormatError(f"{path}: expected dtype u8-asym")
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
        bits, gs = int(header["bits"]), int(header["group_size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete header") from exc
    ng = rows * (cols // gs) if gs > 0 else 0
    if gs <= 0 or cols % gs or len(payload) != rows * cols + 8 * ng:
        raise FormatError(f"{path}: payload size mismatch")
    codes = np.frombuffer(payload[: rows * cols], np.uint8).reshape(rows, cols).copy()
    rest = np.frombuffer(payload[rows * cols :], "<f4").astype(np.float32)
    scales, zeros = rest[:ng].reshape(rows, -1), rest[ng:].reshape(rows, -1)
    try:
        return QuantizedMatrix(codes, scales, zeros, bits, gs)
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
