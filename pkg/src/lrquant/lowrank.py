"""Truncated-SVD residual compensation and symmetric INT3 factor quantization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, RankError, ShapeError
from .quant import EPS, round_half_away
from .tensor_store import decode_f32, read_container, write_container

FACTOR_GROUP = 64


@dataclass(frozen=True)
class Compensator:
    """Rank-r factor pair with ``U @ V`` approximating a quantization residual.

    With ``storage == "symm-int3"`` the factors live in the code/scale fields
    and ``u``/``v`` hold their dequantized values.
    """

    u: np.ndarray  # (rows, r)
    v: np.ndarray  # (r, cols)
    storage: str = "real"
    u_codes: np.ndarray | None = None
    u_scales: np.ndarray | None = None
    v_codes: np.ndarray | None = None
    v_scales: np.ndarray | None = None
    group_size: int = FACTOR_GROUP

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[1] != self.v.shape[0]:
            raise ShapeError(f"factor shapes {self.u.shape} and {self.v.shape} do not chain")
        if self.rank > min(self.rows, self.cols):
            raise RankError(f"rank {self.rank} exceeds min{self.shape}")
        if self.storage not in ("real", "symm-int3"):
            raise ShapeError(f"unknown compensator storage {self.storage!r}")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def rows(self) -> int:
        return self.u.shape[0]

    @property
    def cols(self) -> int:
        return self.v.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @classmethod
    def zero(cls, rows: int, cols: int) -> "Compensator":
        return cls(np.zeros((rows, 0), np.float32), np.zeros((0, cols), np.float32))


# -- truncated SVD ---------------------------------------------------------

def _randomized_svd(e: np.ndarray, r: int, oversample: int, power_iters: int, seed: int):
    m, n = e.shape
    k = min(r + oversample, m, n)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(e @ rng.standard_normal((n, k)))
    for _ in range(power_iters):
        q, _ = np.linalg.qr(e.T @ q)
        q, _ = np.linalg.qr(e @ q)
    ub, s, vt = np.linalg.svd(q.T @ e, full_matrices=False)
    return q @ ub, s, vt


def truncated_svd(e, r: int, method: str = "full", oversample: int = 8,
                  power_iters: int = 16, seed: int = 0) -> Compensator:
    """Best rank-r approximation of ``e`` with the singular values split evenly.

    ``method="randomized"`` uses subspace iteration; ``"full"`` truncates an
    exact decomposition.
    """
    e = np.asarray(e, dtype=np.float64)
    m, n = e.shape
    if r < 0 or r > min(m, n):
        raise RankError(f"rank {r} outside [0, {min(m, n)}] for {m}x{n}")
    if r == 0:
        return Compensator.zero(m, n)
    try:
        if method == "full":
            ub, s, vt = np.linalg.svd(e, full_matrices=False)
        elif method == "randomized":
            ub, s, vt = _randomized_svd(e, r, oversample, power_iters, seed)
        else:
            raise ValueError(f"unknown SVD method {method!r}")
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed: {exc}") from exc
    root = np.sqrt(s[:r])
    u = (ub[:, :r] * root).astype(np.float32)
    v = (root[:, None] * vt[:r]).astype(np.float32)
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NumericError("non-finite SVD factors")
    return Compensator(u, v)


# -- symmetric INT3 --------------------------------------------------------

def symm_int3_quantize(factor, group_size: int):
    """Quantize groups of ``group_size`` consecutive entries along the last axis.

    Returns uint8 codes in [0, 7] and one scale (group max |w|) per group.
    """
    x = np.asarray(factor, dtype=np.float32)
    if x.shape[-1] % group_size:
        raise ShapeError(f"group size {group_size} does not divide axis length {x.shape[-1]}")
    g = x.reshape(*x.shape[:-1], x.shape[-1] // group_size, group_size)
    s = np.maximum(np.abs(g).max(axis=-1), np.float32(EPS)).astype(np.float32)
    codes = np.clip(round_half_away(7 * g / (2 * s[..., None])) + 4, 0, 7)
    return codes.astype(np.uint8).reshape(x.shape), s


def symm_int3_dequantize(codes, scales, group_size: int) -> np.ndarray:
    c = np.asarray(codes)
    s = np.asarray(scales, dtype=np.float32)
    g = c.reshape(*c.shape[:-1], c.shape[-1] // group_size, group_size).astype(np.float32)
    return ((g - 4) * (2 * s[..., None] / 7)).reshape(c.shape).astype(np.float32)


def _factor_group(rank: int, group_size: int) -> int:
    return min(rank, group_size)


def _quantize_rank_axis(f: np.ndarray, group: int):
    # f has the rank on its last axis; a short final group is zero-padded,
    # which leaves its max |w| unchanged.
    r = f.shape[-1]
    pad = -r % group
    fp = np.pad(f, [(0, 0)] * (f.ndim - 1) + [(0, pad)])
    codes, scales = symm_int3_quantize(fp, group)
    return codes[..., :r], scales


def _dequantize_rank_axis(codes: np.ndarray, scales: np.ndarray, group: int) -> np.ndarray:
    r = codes.shape[-1]
    pad = -r % group
    cp = np.pad(codes, [(0, 0)] * (codes.ndim - 1) + [(0, pad)], constant_values=4)
    return symm_int3_dequantize(cp, scales, group)[..., :r]


def quantize_compensator(c: Compensator, group_size: int = FACTOR_GROUP) -> Compensator:
    """Symmetric INT3 storage, grouping each factor along the rank axis."""
    if c.rank == 0:
        return Compensator(c.u, c.v, "symm-int3", c.u.astype(np.uint8), np.zeros((c.rows, 0), np.float32),
                           c.v.astype(np.uint8), np.zeros((c.cols, 0), np.float32), group_size)
    group = _factor_group(c.rank, group_size)
    u_codes, u_scales = _quantize_rank_axis(c.u, group)
    vt_codes, v_scales = _quantize_rank_axis(c.v.T, group)
    return _from_codes(u_codes, u_scales, vt_codes.T, v_scales, group_size)


def _from_codes(u_codes, u_scales, v_codes, v_scales, group_size) -> Compensator:
    group = _factor_group(u_codes.shape[1], group_size)
    u = _dequantize_rank_axis(u_codes, u_scales, group)
    v = _dequantize_rank_axis(v_codes.T, v_scales, group).T
    return Compensator(np.ascontiguousarray(u), np.ascontiguousarray(v), "symm-int3",
                       u_codes, u_scales, np.ascontiguousarray(v_codes), v_scales, group_size)


def compensator_apply(c: Compensator) -> np.ndarray:
    """Materialize ``U @ V`` (float32)."""
    if c.rank == 0:
        return np.zeros(c.shape, np.float32)
    return (c.u.astype(np.float64) @ c.v.astype(np.float64)).astype(np.float32)


# -- serialization ---------------------------------------------------------

def save_compensator(c: Compensator, u_path, v_path, name: str = "") -> None:
    """Write U and V as two containers tagged with role, rank and storage.

    Real factors use dtype ``f32``.  INT3 factors use dtype ``u8-symm3``:
    one byte per code (rank axis last, so V is stored transposed) followed by
    the float32 group scales.
    """
    base = {"rank": c.rank, "storage": c.storage, "name": name, "group_size": c.group_size}
    parts = [("compensator-U", c.u, c.u_codes, c.u_scales),
             ("compensator-V", c.v, None if c.v_codes is None else c.v_codes.T, c.v_scales)]
    for path, (role, real, codes, scales) in zip((u_path, v_path), parts):
        if c.storage == "real":
            header = {**base, "role": role, "rows": real.shape[0], "cols": real.shape[1], "dtype": "f32"}
            payload = real.astype("<f4").tobytes()
        else:
            header = {**base, "role": role, "rows": codes.shape[0], "cols": codes.shape[1],
                      "dtype": "u8-symm3", "scale_cols": scales.shape[1]}
            payload = codes.astype(np.uint8).tobytes() + scales.astype("<f4").tobytes()
        write_container(path, header, payload)


def load_compensator(u_path, v_path) -> Compensator:
    hu, pu = read_container(u_path)
    hv, pv = read_container(v_path)
    if hu.get("role") != "compensator-U" or hv.get("role") != "compensator-V":
        raise FormatError(f"{u_path}/{v_path}: not a compensator pair")
    storage = hu.get("storage")
    if storage == "real":
        return Compensator(decode_f32(hu, pu, u_path), decode_f32(hv, pv, v_path))
    if storage != "symm-int3":
        raise FormatError(f"{u_path}: unknown storage {storage!r}")

    def codes_and_scales(h, p, path):
        rows, cols, sc = int(h["rows"]), int(h["cols"]), int(h["scale_cols"])
        if len(p) != rows * cols + rows * sc * 4:
            raise FormatError(f"{path}: payload size mismatch")
        codes = np.frombuffer(p[: rows * cols], np.uint8).reshape(rows, cols)
        if codes.size and codes.max() > 7:
            raise FormatError(f"{path}: code outside [0, 7]")
        scales = np.frombuffer(p[rows * cols :], "<f4").astype(np.float32).reshape(rows, sc)
        return codes.copy(), scales

    uc, us = codes_and_scales(hu, pu, u_path)
    vtc, vs = codes_and_scales(hv, pv, v_path)
    gs = int(hu.get("group_size", FACTOR_GROUP))
    if uc.shape[1] == 0:
        return quantize_compensator(Compensator.zero(uc.shape[0], vtc.shape[0]), gs)
    return _from_codes(uc, us, vtc.T, vs, gs)
