"""Tensor container I/O, MoE manifests and memory accounting.

Container layout::

    b"MILO1" | u32 little-endian header length | UTF-8 JSON header | payload

A plain weight matrix has header ``{"name", "rows", "cols", "dtype": "f32"}``
and a payload of ``rows * cols`` little-endian float32 values.  Other dtypes
(packed INT3 codes, compensator factors) reuse the same framing.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import DataError, FormatError, IoError, PlanError

MAGIC = b"MILO1"
STRUCTURE_TAGS = ("attention", "shared_expert", "dense_ffn", "expert")
DENSE_TAGS = ("attention", "shared_expert", "dense_ffn")


@dataclass(frozen=True)
class WeightMatrix:
    name: str
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise DataError(f"{self.name}: expected a 2-D array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise DataError(f"{self.name}: non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


# -- raw container ---------------------------------------------------------

def atomic_write_bytes(path, blob: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_container(path, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(head)) + head + payload)


def read_container(path) -> tuple[dict, bytes]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    off = len(MAGIC)
    if len(blob) < off + 4:
        raise FormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")
    return header, blob[off + hlen :]


def _shape_from_header(header: dict, path) -> tuple[int, int]:
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: header missing rows/cols") from exc
    if rows < 0 or cols < 0:
        raise FormatError(f"{path}: negative shape")
    return rows, cols


def decode_f32(header: dict, payload: bytes, path="<bytes>") -> np.ndarray:
    rows, cols = _shape_from_header(header, path)
    if len(payload) != rows * cols * 4:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, header declares {rows}x{cols} f32"
        )
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(rows, cols)


# -- weight matrices ---------------------------------------------------------

def save_tensor(m: WeightMatrix, path, **extra) -> None:
    header = {"name": m.name, "rows": m.rows, "cols": m.cols, "dtype": "f32", **extra}
    write_container(path, header, m.data.astype("<f4").tobytes())


def load_tensor(path) -> WeightMatrix:
    header, payload = read_container(path)
    if header.get("dtype") != "f32":
        raise FormatError(f"{path}: expected dtype f32, got {header.get('dtype')!r}")
    data = decode_f32(header, payload, path)
    if not np.isfinite(data).all():
        raise DataError(f"{path}: non-finite values")
    return WeightMatrix(str(header.get("name", Path(path).stem)), data)


# -- manifest and frequency stats -------------------------------------------

@dataclass(frozen=True)
class MatrixEntry:
    name: str
    rows: int
    cols: int
    structure_tag: str
    expert_index: int | None = None

    @property
    def is_dense(self) -> bool:
        return self.structure_tag in DENSE_TAGS


@dataclass(frozen=True)
class LayerEntry:
    layer_index: int
    matrices: tuple[MatrixEntry, ...]


@dataclass(frozen=True)
class ModelManifest:
    layers: tuple[LayerEntry, ...]

    def __post_init__(self):
        seen = set()
        for entry in self.matrices():
            if entry.name in seen:
                raise DataError(f"duplicate matrix name {entry.name!r}")
            seen.add(entry.name)
            if entry.structure_tag not in STRUCTURE_TAGS:
                raise DataError(f"{entry.name}: unknown structure tag {entry.structure_tag!r}")
            if (entry.structure_tag == "expert") != (entry.expert_index is not None):
                raise DataError(f"{entry.name}: expert_index must be set exactly for experts")

    def matrices(self) -> Iterator[MatrixEntry]:
        for layer in self.layers:
            yield from layer.matrices

    def layer_of(self, name: str) -> int:
        for layer in self.layers:
            if any(m.name == name for m in layer.matrices):
                return layer.layer_index
        raise KeyError(name)

    def to_json(self) -> dict:
        layers = []
        for layer in self.layers:
            mats = []
            for m in layer.matrices:
                d = {"name": m.name, "rows": m.rows, "cols": m.cols, "structure_tag": m.structure_tag}
                if m.expert_index is not None:
                    d["expert_index"] = m.expert_index
                mats.append(d)
            layers.append({"layer_index": layer.layer_index, "matrices": mats})
        return {"layers": layers}

    @classmethod
    def from_json(cls, doc: dict) -> "ModelManifest":
        try:
            layers = tuple(
                LayerEntry(
                    int(layer["layer_index"]),
                    tuple(
                        MatrixEntry(
                            m["name"], int(m["rows"]), int(m["cols"]), m["structure_tag"],
                            None if m.get("expert_index") is None else int(m["expert_index"]),
                        )
                        for m in layer["matrices"]
                    ),
                )
                for layer in doc["layers"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc
        return cls(layers)


@dataclass(frozen=True)
class ExpertFrequencyStats:
    counts: Mapping[int, tuple[int, ...]]
    total_tokens: int

    def __post_init__(self):
        for layer, counts in self.counts.items():
            if any(c < 0 for c in counts):
                raise DataError(f"layer {layer}: negative expert count")

    def to_json(self) -> dict:
        return {
            "total_tokens": self.total_tokens,
            "layers": [{"layer_index": k, "counts": list(v)} for k, v in sorted(self.counts.items())],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExpertFrequencyStats":
        try:
            counts = {int(l["layer_index"]): tuple(int(c) for c in l["counts"]) for l in doc["layers"]}
            return cls(counts, int(doc["total_tokens"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed frequency stats: {exc}") from exc


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def dump_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- memory accounting -------------------------------------------------------

def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def compensator_bytes(rows: int, cols: int, rank: int, comp_bits: int, group_size: int = 64) -> int:
    """Codes for U (rows x r) and V (r x cols) plus one 2-byte scale per group.

    Factor groups run along the rank axis, one slice per row of U and per
    column of V, so each slice holds ceil(r / group_size) scales.
    ``comp_bits=16`` is unquantized binary16 factors with no scales.
    """
    if rank == 0:
        return 0
    codes = _ceil_div((rows + cols) * rank * comp_bits, 8)
    if comp_bits == 16:
        return codes
    scales = (rows + cols) * _ceil_div(rank, group_size) * 2
    return codes + scales


def matrix_memory_bytes(rows, cols, rank, bits=3, group_size=64, comp_bits=3) -> int:
    if bits not in (3, 4, 8):
        raise PlanError(f"unsupported weight bits {bits}")
    if comp_bits not in (3, 8, 16):
        raise PlanError(f"unsupported compensator bits {comp_bits}")
    if cols % group_size:
        raise PlanError(f"group size {group_size} does not divide {cols} columns")
    if rank < 0 or rank > min(rows, cols):
        raise PlanError(f"rank {rank} outside [0, {min(rows, cols)}] for {rows}x{cols}")
    codes = _ceil_div(rows * cols * bits, 8)
    meta = 2 * (rows * cols // group_size) * 2
    return codes + meta + compensator_bytes(rows, cols, rank, comp_bits, group_size)


def quantized_memory_bytes(manifest: ModelManifest, plan, bits=3, group_size=64, comp_bits=3) -> int:
    """Total bytes of a compressed model; ``plan`` is a RankPlan or a name->rank mapping."""
    ranks = getattr(plan, "ranks", plan)
    total = 0
    for m in manifest.matrices():
        if m.name not in ranks:
            raise PlanError(f"plan has no rank for {m.name}")
        total += matrix_memory_bytes(m.rows, m.cols, int(ranks[m.name]), bits, group_size, comp_bits)
    return total
