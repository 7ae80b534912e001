"""Zero-bit-waste INT3 packing and binary16 fast dequantization.

Canonical layout of one group of 32 codes ``e0..e31`` in three uint32 words:

* word ``j`` holds ``e[8j + k]`` in bits ``[3k, 3k + 3)`` for ``k = 0..7``;
* bits ``[24, 32)`` of word ``j`` hold rest byte ``r_j``;
* ``R = r0 | r1 << 8 | r2 << 16`` holds ``e[24 + k]`` in bits ``[3k, 3k + 3)``.

Tiled layout: codes are reordered so each 16x64 tile is contiguous
(tiles row-major over the tile grid, row-major inside a tile) before packing.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import fp16
from .errors import ConfigError, FormatError, RangeError, ShapeError
from .quant import QuantizedMatrix
from .tensor_store import read_container, write_container

TILE_ROWS, TILE_COLS = 16, 64
LAYOUTS = ("linear", "tiled16x64")
MODES = ("symmetric", "asymmetric")


# -- 32 codes <-> 3 words --------------------------------------------------

def _pack_groups(codes: np.ndarray) -> np.ndarray:
    c = codes.reshape(-1, 32).astype(np.uint32)
    shifts = (3 * np.arange(8, dtype=np.uint32))
    fields = np.bitwise_or.reduce(c.reshape(-1, 4, 8) << shifts, axis=-1)  # (n, 4) of 24-bit
    rest = fields[:, 3]
    words = fields[:, :3] | (((rest[:, None] >> (8 * np.arange(3, dtype=np.uint32))) & 0xFF) << 24)
    return words.reshape(-1)


def _unpack_groups(words: np.ndarray) -> np.ndarray:
    w = np.asarray(words, dtype=np.uint32).reshape(-1, 3)
    rest = (w[:, 0] >> 24) | ((w[:, 1] >> 24) << 8) | ((w[:, 2] >> 24) << 16)
    fields = np.concatenate([w & 0xFFFFFF, rest[:, None]], axis=1)  # (n, 4)
    shifts = (3 * np.arange(8, dtype=np.uint32))
    codes = (fields[:, :, None] >> shifts) & 7
    return codes.reshape(-1).astype(np.uint8)


def _check_codes(codes: np.ndarray) -> None:
    if codes.size and (codes.min() < 0 or codes.max() > 7):
        raise RangeError("INT3 code outside [0, 7]")


def pack32(codes) -> np.ndarray:
    """Pack exactly 32 codes in [0, 7] into three uint32 words."""
    c = np.asarray(codes)
    if c.shape != (32,):
        raise ShapeError(f"pack32 needs exactly 32 codes, got shape {c.shape}")
    _check_codes(c.astype(np.int64))
    return _pack_groups(c)


def unpack32(words) -> np.ndarray:
    w = np.asarray(words, dtype=np.uint32)
    if w.shape != (3,):
        raise ShapeError(f"unpack32 needs exactly 3 words, got shape {w.shape}")
    return _unpack_groups(w)


# -- tile permutation ------------------------------------------------------

def _check_tiles(rows: int, cols: int) -> None:
    if rows % TILE_ROWS or cols % TILE_COLS:
        raise ShapeError(f"{rows}x{cols} is not a multiple of the {TILE_ROWS}x{TILE_COLS} tile")


def tile_order(rows: int, cols: int) -> np.ndarray:
    """Flat row-major indices listed in tiled storage order."""
    _check_tiles(rows, cols)
    idx = np.arange(rows * cols).reshape(rows // TILE_ROWS, TILE_ROWS, cols // TILE_COLS, TILE_COLS)
    return idx.transpose(0, 2, 1, 3).reshape(-1)


def to_storage_order(codes2d: np.ndarray, layout: str) -> np.ndarray:
    flat = codes2d.reshape(-1)
    if layout == "linear":
        return flat
    rows, cols = codes2d.shape
    _check_tiles(rows, cols)
    t = codes2d.reshape(rows // TILE_ROWS, TILE_ROWS, cols // TILE_COLS, TILE_COLS)
    return t.transpose(0, 2, 1, 3).reshape(-1)


def from_storage_order(flat: np.ndarray, rows: int, cols: int, layout: str) -> np.ndarray:
    if layout == "linear":
        return flat.reshape(rows, cols)
    _check_tiles(rows, cols)
    t = flat.reshape(rows // TILE_ROWS, cols // TILE_COLS, TILE_ROWS, TILE_COLS)
    return t.transpose(0, 2, 1, 3).reshape(rows, cols)


# -- packed matrices -------------------------------------------------------

@dataclass(frozen=True)
class PackedInt3Matrix:
    rows: int
    cols: int
    words: np.ndarray  # uint32, 3 per 32 codes, in storage order
    scales: np.ndarray  # binary16, (rows, cols // group_size)
    zeros: np.ndarray | None  # binary16, asymmetric only
    mode: str = "asymmetric"
    layout: str = "linear"
    group_size: int = 64

    def __post_init__(self):
        if self.cols % 32:
            raise ShapeError(f"cols {self.cols} must be a multiple of 32")
        if self.words.size != self.rows * self.cols * 3 // 32:
            raise ShapeError("word count does not match shape")
        if self.layout not in LAYOUTS or self.mode not in MODES:
            raise ConfigError(f"bad layout/mode {self.layout}/{self.mode}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def codes(self) -> np.ndarray:
        return from_storage_order(_unpack_groups(self.words), self.rows, self.cols, self.layout)


def pack_codes(codes2d, scales, zeros=None, mode="asymmetric", layout="linear",
               group_size=64) -> PackedInt3Matrix:
    codes2d = np.asarray(codes2d)
    rows, cols = codes2d.shape
    if cols % 32:
        raise ShapeError(f"cols {cols} must be a multiple of 32")
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}")
    _check_codes(codes2d.astype(np.int64))
    words = _pack_groups(to_storage_order(codes2d, layout))
    z = None if zeros is None else fp16.to_half(zeros)
    return PackedInt3Matrix(rows, cols, words, fp16.to_half(scales), z, mode, layout, group_size)


def pack_quantized(q: QuantizedMatrix, layout: str = "linear") -> PackedInt3Matrix:
    if q.bits != 3:
        raise ConfigError(f"only 3-bit codes pack, got {q.bits}")
    return pack_codes(q.codes, q.scales, q.zeros, "asymmetric", layout, q.group_size)


def reshuffle_tiled(q) -> PackedInt3Matrix:
    """Pack a QuantizedMatrix (or re-pack a linear PackedInt3Matrix) in tiled layout."""
    if isinstance(q, PackedInt3Matrix):
        return pack_codes(q.codes(), q.scales, q.zeros, q.mode, "tiled16x64", q.group_size)
    return pack_quantized(q, "tiled16x64")


def unshuffle(p: PackedInt3Matrix) -> PackedInt3Matrix:
    return pack_codes(p.codes(), p.scales, p.zeros, p.mode, "linear", p.group_size)


def split_planes(p: PackedInt3Matrix) -> tuple[np.ndarray, np.ndarray]:
    """Plane A: words 0 and 1 of each group; plane B: word 2."""
    w = p.words.reshape(-1, 3)
    return np.ascontiguousarray(w[:, :2]).reshape(-1), np.ascontiguousarray(w[:, 2])


def merge_planes(plane_a, plane_b) -> np.ndarray:
    a = np.asarray(plane_a, dtype=np.uint32).reshape(-1, 2)
    b = np.asarray(plane_b, dtype=np.uint32).reshape(-1, 1)
    if a.shape[0] != b.shape[0]:
        raise ShapeError("plane A must hold exactly two words per plane-B word")
    return np.concatenate([a, b], axis=1).reshape(-1)


# -- fast dequantization ---------------------------------------------------

# Per pair p of a 24-bit field word: codes e[2p], e[2p+1] sit at bits 6p, 6p+3.
# Even pairs go to lane bit 0 ("direct", lane = 1024 + e); odd pairs go to lane
# bit 3 ("x8", lane = 1024 + 8e).  Each entry is (shift, mask) per lane, with a
# positive shift meaning a right shift.
_PAIR_EXTRACT = {
    0: ((0, 0x7), (-13, 0x70000)),
    1: ((3, 0x38), (-10, 0x380000)),
    2: ((12, 0x7), (-1, 0x70000)),
    3: ((15, 0x38), (2, 0x380000)),
}
_DIRECT_SUB = {"symmetric": 1028.0, "asymmetric": 1024.0}
_X8_ADD = {"symmetric": -132.0, "asymmetric": -128.0}


def _shift(w: np.ndarray, s: int) -> np.ndarray:
    return (w >> np.uint32(s)) if s >= 0 else ((w << np.uint32(-s)) & np.uint32(0xFFFFFFFF))


def pair_register(word, pair: int) -> np.ndarray:
    """Build the uint32 register holding two biased binary16 lanes for ``pair``."""
    w = np.asarray(word, dtype=np.uint32)
    (s0, m0), (s1, m1) = _PAIR_EXTRACT[pair]
    reg = (_shift(w, s0) & np.uint32(m0)) | (_shift(w, s1) & np.uint32(m1))
    return reg | np.uint32(fp16.HALF_1024 | fp16.HALF_1024 << 16)


def fast_dequant_pair(word, pair: int, mode: str = "symmetric") -> np.ndarray:
    """Two binary16 values (code - 4 symmetric, code asymmetric) from one field word.

    ``word`` is a 24-bit field (a packed word with its rest byte ignored, or
    the reassembled rest word).  Pairs 0 and 2 subtract a 1024-biased
    constant; pairs 1 and 3 undo the x8 placement with one fused multiply-add.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    lanes = fp16.lanes(pair_register(word, pair))
    if pair % 2 == 0:
        return fp16.hsub(lanes, _DIRECT_SUB[mode])
    return fp16.hfma(lanes, 0.125, _X8_ADD[mode])


@functools.lru_cache(maxsize=None)
def _lane_tables(mode: str) -> tuple[np.ndarray, np.ndarray]:
    # The lane operations over every binary16 bit pattern, for bulk decoding.
    every = fp16.from_bits(np.arange(1 << 16, dtype=np.uint32).astype(np.uint16))
    with np.errstate(all="ignore"):
        direct = fp16.bits(fp16.hsub(every, _DIRECT_SUB[mode]))
        x8 = fp16.bits(fp16.hfma(every, 0.125, _X8_ADD[mode]))
    return direct, x8


def field_words(words) -> np.ndarray:
    """(n, 4) field words per group: three packed words, then the rest word."""
    w = np.asarray(words, dtype=np.uint32).reshape(-1, 3)
    rest = w[:, 0] >> 24
    rest |= (w[:, 1] >> 24) << 8
    rest |= (w[:, 2] >> 24) << 16
    return np.concatenate([w, rest[:, None]], axis=1)


def fast_code_bits(words, mode: str) -> np.ndarray:
    """binary16 bit patterns of every code value via the biased-lane path, storage order."""
    direct, x8 = _lane_tables(mode)
    f = field_words(words)
    out = np.empty((f.shape[0], 4, 4, 2), dtype=np.uint16)
    for pair in range(4):
        reg = pair_register(f, pair)
        table = direct if pair % 2 == 0 else x8
        out[:, :, pair, 0] = table[reg & 0xFFFF]
        out[:, :, pair, 1] = table[reg >> 16]
    return out.reshape(-1)


def fast_code_values(words, mode: str) -> np.ndarray:
    return fp16.from_bits(fast_code_bits(words, mode))


def naive_code_values(words, mode: str) -> np.ndarray:
    codes = _unpack_groups(words).astype(np.float64)
    return fp16.to_half(codes - 4 if mode == "symmetric" else codes)


def _row_words(p: PackedInt3Matrix, r0: int, r1: int) -> np.ndarray:
    # rows [r0, r1) occupy a contiguous word range in both layouts
    if p.layout == "tiled16x64" and (r0 % TILE_ROWS or r1 % TILE_ROWS):
        raise ShapeError("tiled row ranges must align to 16 rows")
    per_row = p.cols * 3 // 32
    return p.words[r0 * per_row : r1 * per_row]


_HALF_F32 = fp16.from_bits(np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)).astype(np.float32)


def dequant_rows_f32(p: PackedInt3Matrix, r0: int, r1: int, mode: str | None = None,
                     path: str = "fast") -> np.ndarray:
    """Rows ``[r0, r1)`` of the binary16 weights, widened to float32."""
    mode = mode or p.mode
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "asymmetric" and p.zeros is None:
        raise ConfigError("asymmetric dequantization needs zero-points")
    words = _row_words(p, r0, r1)
    if path == "fast":
        vals = fast_code_bits(words, mode)
    else:
        vals = fp16.bits(naive_code_values(words, mode))
    g = _HALF_F32[from_storage_order(vals, r1 - r0, p.cols, p.layout)]
    g = g.reshape(r1 - r0, -1, p.group_size)
    s = p.scales[r0:r1].astype(np.float32)[..., None]
    if mode == "symmetric":
        # s * (code - 4) * 2 is exact in float32; one division, then one rounding
        out = ((s * g * 2).astype(np.float64) / 7).astype(np.float16)
    else:
        # code, z and s are binary16, so s * (code - z) is exact in float32
        out = (s * (g - p.zeros[r0:r1].astype(np.float32)[..., None])).astype(np.float16)
    return _HALF_F32[out.view(np.uint16)].reshape(r1 - r0, p.cols)


def dequant_rows(p: PackedInt3Matrix, r0: int, r1: int, mode: str | None = None,
                 path: str = "fast") -> np.ndarray:
    """binary16 weights of rows ``[r0, r1)``; see :func:`dequant_packed`."""
    return dequant_rows_f32(p, r0, r1, mode, path).astype(np.float16)


def dequant_packed(p: PackedInt3Matrix, mode: str | None = None, path: str = "fast") -> np.ndarray:
    """binary16 weights: symmetric ``s (code - 4) 2/7``, asymmetric ``s (code - z)``.

    ``path="fast"`` uses the biased-lane bit manipulation, ``"naive"`` converts
    unpacked integers directly; both round once at the final scaling.
    """
    return dequant_rows(p, 0, p.rows, mode, path)


# -- file format -----------------------------------------------------------

def save_packed(p: PackedInt3Matrix, path, name: str = "", split: bool = False) -> None:
    header = {"name": name, "rows": p.rows, "cols": p.cols, "dtype": "packed-i3",
              "layout": p.layout, "split": split, "group_size": p.group_size, "mode": p.mode}
    if split:
        a, b = split_planes(p)
        words = np.concatenate([a, b])
    else:
        words = p.words
    payload = words.astype("<u4").tobytes() + p.scales.astype("<f2").tobytes()
    if p.mode == "asymmetric":
        payload += p.zeros.astype("<f2").tobytes()
    write_container(path, header, payload)


def load_packed(path) -> PackedInt3Matrix:
    header, payload = read_container(path)
    if header.get("dtype") != "packed-i3":
        raise FormatError(f"{path}: expected dtype packed-i3")
    try:
        rows, cols, gs = int(header["rows"]), int(header["cols"]), int(header["group_size"])
        mode, layout, split = header["mode"], header["layout"], bool(header["split"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete packed header") from exc
    if cols % 32 or cols % gs:
        raise FormatError(f"{path}: cols {cols} incompatible with packing/grouping")
    nwords = rows * cols * 3 // 32
    ngroups = rows * cols // gs
    expected = nwords * 4 + ngroups * 2 * (2 if mode == "asymmetric" else 1)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    words = np.frombuffer(payload[: nwords * 4], "<u4").astype(np.uint32)
    if split:
        words = merge_planes(words[: 2 * nwords // 3], words[2 * nwords // 3 :])
    off = nwords * 4
    scales = np.frombuffer(payload[off : off + ngroups * 2], "<f2").astype(np.float16)
    zeros = None
    if mode == "asymmetric":
        zeros = np.frombuffer(payload[off + ngroups * 2 :], "<f2").astype(np.float16)
        zeros = zeros.reshape(rows, -1)
    return PackedInt3Matrix(rows, cols, words, scales.reshape(rows, -1), zeros, mode, layout, gs)
