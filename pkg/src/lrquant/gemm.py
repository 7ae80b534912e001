"""Tiled W3A16 GeMM reference: C = A @ (dequant(Wp) + U V).

Weights are a packed ``k x n`` INT3 matrix with groups of 64 along ``n``.
Activations are rounded to binary16 on entry; every tile product accumulates
in float32.  The reduction axis is walked in pipeline stages of four tiles,
with a short final stage when ``k / tile_k`` is not a multiple of four.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fp16
from .errors import ConfigError, ShapeError
from .lowrank import Compensator
from .packing import MODES, PackedInt3Matrix, dequant_rows_f32

TILE_SHAPES = ((64, 256), (128, 128), (256, 64))
GROUP_SIZE = 64
BATCH_MULTIPLE = 16
REL_ERROR_GATE = 0.005


@dataclass(frozen=True)
class GemmConfig:
    tile_shape: tuple[int, int] = (128, 128)
    group_size: int = GROUP_SIZE
    mode: str = "asymmetric"
    pipeline_depth: int = 4
    materialize_uv: bool = False

    def validate(self) -> None:
        if self.group_size != GROUP_SIZE:
            raise ConfigError(f"group size must be {GROUP_SIZE}, got {self.group_size}")
        if tuple(self.tile_shape) not in TILE_SHAPES:
            raise ConfigError(f"tile shape {tuple(self.tile_shape)} not in {TILE_SHAPES}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.pipeline_depth < 1:
            raise ConfigError("pipeline_depth must be >= 1")


@dataclass(frozen=True)
class Schedule:
    stages: tuple[tuple[int, ...], ...]  # reduction-tile indices per stage
    tail_tiles: int  # size of the short final stage, 0 if none

    @property
    def full_stages(self) -> int:
        return len(self.stages) - (1 if self.tail_tiles else 0)


def pipeline_tail_check(k: int, cfg: GemmConfig = GemmConfig()) -> Schedule:
    tk = cfg.tile_shape[0]
    if k % tk:
        raise ShapeError(f"reduction dim {k} is not a multiple of tile {tk}")
    tiles = k // tk
    depth = cfg.pipeline_depth
    stages = tuple(tuple(range(s, min(s + depth, tiles))) for s in range(0, tiles, depth))
    return Schedule(stages, tiles % depth)


def pad_batch(a) -> tuple[np.ndarray, int]:
    """Zero-pad rows up to a multiple of 16; returns (padded, original rows)."""
    a = np.asarray(a)
    m = a.shape[0]
    if m < 1:
        raise ShapeError("batch must have at least one row")
    pad = -m % BATCH_MULTIPLE
    if pad:
        a = np.concatenate([a, np.zeros((pad, a.shape[1]), dtype=a.dtype)])
    return a, m


def _check(a: np.ndarray, wp: PackedInt3Matrix, comp, cfg: GemmConfig) -> None:
    cfg.validate()
    if wp.group_size != cfg.group_size:
        raise ConfigError(f"group size must be {GROUP_SIZE}, packed weights use {wp.group_size}")
    k, n = wp.shape
    tk, tn = cfg.tile_shape
    if k % tk or n % tn:
        raise ShapeError(f"weight shape ({k}, {n}) is not a multiple of tile {cfg.tile_shape}")
    if a.ndim != 2 or a.shape[1] != k:
        raise ShapeError(f"activations {a.shape} do not match reduction dim {k}")
    if comp is not None and comp.shape != (k, n):
        raise ShapeError(f"compensator shape {comp.shape} does not match weights ({k}, {n})")


def gemm_w3a16(a, wp: PackedInt3Matrix, comp: Compensator | None = None,
               cfg: GemmConfig = GemmConfig()) -> np.ndarray:
    a = np.asarray(a)
    _check(a, wp, comp, cfg)
    k, n = wp.shape
    tk, tn = cfg.tile_shape
    ap, m = pad_batch(fp16.to_half(a).astype(np.float32))
    c = np.zeros((ap.shape[0], n), dtype=np.float32)
    for stage in pipeline_tail_check(k, cfg).stages:
        for kt in stage:
            k0 = kt * tk
            a_tile = ap[:, k0 : k0 + tk]
            w_stripe = dequant_rows_f32(wp, k0, k0 + tk, cfg.mode)
            for n0 in range(0, n, tn):
                c[:, n0 : n0 + tn] += a_tile @ w_stripe[:, n0 : n0 + tn]
    if comp is not None and comp.rank > 0:
        u = comp.u.astype(np.float32)
        v = comp.v.astype(np.float32)
        if cfg.materialize_uv:
            c += ap @ (u @ v)
        else:
            c += (ap @ u) @ v
    return c[:m]


def gemm_reference(a, wp: PackedInt3Matrix, comp: Compensator | None = None,
                   mode: str | None = None, stripe: int = 512) -> np.ndarray:
    """Dense float64 product with weights from the naive dequantization path."""
    a64 = fp16.to_half(np.asarray(a)).astype(np.float64)
    k, n = wp.shape
    out = np.zeros((a64.shape[0], n))
    step = max(16, stripe - stripe % 16)
    for k0 in range(0, k, step):
        k1 = min(k, k0 + step)
        w = dequant_rows_f32(wp, k0, k1, mode, path="naive").astype(np.float64)
        out += a64[:, k0:k1] @ w
    if comp is not None and comp.rank > 0:
        out += a64 @ (comp.u.astype(np.float64) @ comp.v.astype(np.float64))
    return out


def relative_error(c, c_ref) -> float:
    c_ref = np.asarray(c_ref, np.float64)
    denom = np.linalg.norm(c_ref)
    diff = np.linalg.norm(np.asarray(c, np.float64) - c_ref)
    return float(diff / denom) if denom > 0 else float(diff)


def random_packed(k: int, n: int, mode: str, seed: int, layout: str = "tiled16x64") -> PackedInt3Matrix:
    """Uniform random codes (every 96-bit pattern is a valid group) with random scales."""
    rng = np.random.default_rng(seed)
    words = rng.integers(0, 2**32, size=k * n * 3 // 32, dtype=np.uint32)
    scales = fp16.to_half(rng.uniform(0.005, 0.02, size=(k, n // GROUP_SIZE)))
    zeros = fp16.to_half(rng.uniform(0.0, 7.0, size=(k, n // GROUP_SIZE))) if mode == "asymmetric" else None
    return PackedInt3Matrix(k, n, words, scales, zeros, mode, layout, GROUP_SIZE)


def gemm_check(shapes, tile_shapes=TILE_SHAPES, modes=MODES, batches=(1, 5, 16, 33, 64),
               seeds=range(5), layout: str = "tiled16x64") -> list[dict]:
    """Relative error of the tiled product against the dense reference, per shape."""
    reports = []
    for k, n in shapes:
        worst = 0.0
        seeds = list(seeds)
        for mode in modes:
            for seed in seeds:
                wp = random_packed(k, n, mode, seed, layout)
                a_all = np.random.default_rng(10_000 + seed).standard_normal((max(batches), k))
                ref_all = gemm_reference(a_all, wp, mode=mode)
                for tile in tile_shapes:
                    cfg = GemmConfig(tuple(tile), mode=mode)
                    for m in batches:
                        c = gemm_w3a16(a_all[:m], wp, cfg=cfg)
                        worst = max(worst, relative_error(c, ref_all[:m]))
        reports.append({"shape": [k, n], "seeds": seeds, "modes": list(modes),
                        "tile_shapes": [list(t) for t in tile_shapes], "batches": list(batches),
                        "max_rel_error": worst, "pass": worst < REL_ERROR_GATE})
    return reports
