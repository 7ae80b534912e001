import math
import struct
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrquant.errors import DataError, FormatError, IoError, PlanError
from lrquant.tensor_store import (MAGIC, ExpertFrequencyStats, LayerEntry, MatrixEntry, ModelManifest,
                                  WeightMatrix, compensator_bytes, load_tensor, matrix_memory_bytes,
                                  quantized_memory_bytes, save_tensor, write_container)


def raw_container(path, header, values):
    head = json.dumps(header).encode()
    payload = np.asarray(values, "<f4").tobytes()
    path.write_bytes(MAGIC + struct.pack("<I", len(head)) + head + payload)


def test_load_hand_built_file(tmp_path):
    p = tmp_path / "m.milo"
    raw_container(p, {"name": "m", "rows": 2, "cols": 2, "dtype": "f32"}, [1, 2, 3, 4])
    m = load_tensor(p)
    assert m.data.tolist() == [[1, 2], [3, 4]]
    assert m.name == "m"


def test_short_payload_is_format_error(tmp_path):
    p = tmp_path / "m.milo"
    raw_container(p, {"name": "m", "rows": 2, "cols": 2, "dtype": "f32"}, [1, 2, 3])
    with pytest.raises(FormatError):
        load_tensor(p)


@pytest.mark.parametrize("blob", [b"", b"MILO0xxxx", MAGIC + b"\x01", MAGIC + struct.pack("<I", 50) + b"{}",
                                  MAGIC + struct.pack("<I", 3) + b"{x]"])
def test_malformed_header(tmp_path, blob):
    p = tmp_path / "bad.milo"
    p.write_bytes(blob)
    with pytest.raises(FormatError):
        load_tensor(p)


def test_missing_rows_is_format_error(tmp_path):
    p = tmp_path / "m.milo"
    raw_container(p, {"name": "m", "cols": 2, "dtype": "f32"}, [1, 2])
    with pytest.raises(FormatError):
        load_tensor(p)


def test_non_finite_payload(tmp_path):
    p = tmp_path / "m.milo"
    raw_container(p, {"name": "m", "rows": 1, "cols": 2, "dtype": "f32"}, [1.0, np.nan])
    with pytest.raises(DataError):
        load_tensor(p)
    with pytest.raises(DataError):
        WeightMatrix("x", np.array([[np.inf]]))


@pytest.mark.parametrize("shape", [(64, 128), (4096, 64), (1, 1)])
def test_round_trip_bit_exact(tmp_path, rng, shape):
    w = WeightMatrix("w", rng.standard_normal(shape).astype(np.float32))
    save_tensor(w, tmp_path / "w.milo")
    back = load_tensor(tmp_path / "w.milo")
    assert back.data.tobytes() == w.data.tobytes()


def test_one_by_one_zero_file_size(tmp_path):
    save_tensor(WeightMatrix("z", np.zeros((1, 1))), tmp_path / "z.milo")
    blob = (tmp_path / "z.milo").read_bytes()
    (hlen,) = struct.unpack_from("<I", blob, 5)
    assert len(blob) == 5 + 4 + hlen + 4


def test_negative_values_keep_sign(tmp_path, rng):
    w = WeightMatrix("n", -np.abs(rng.standard_normal((3, 5))) - 1e-3)
    save_tensor(w, tmp_path / "n.milo")
    assert (load_tensor(tmp_path / "n.milo").data < 0).all()


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=40))
def test_round_trip_property(tmp_path_factory, vals):
    p = tmp_path_factory.mktemp("h") / "v.milo"
    w = WeightMatrix("v", np.array(vals, np.float32)[None, :])
    save_tensor(w, p)
    assert load_tensor(p).data.tobytes() == w.data.tobytes()


def test_unwritable_path(tmp_path):
    with pytest.raises(IoError):
        save_tensor(WeightMatrix("w", np.zeros((1, 1))), tmp_path / "missing" / "w.milo")


def test_weight_matrix_is_read_only(rng):
    w = WeightMatrix("w", rng.standard_normal((2, 2)))
    with pytest.raises(ValueError):
        w.data[0, 0] = 1.0


def _manifest():
    return ModelManifest((
        LayerEntry(0, (MatrixEntry("a", 64, 64, "attention"), MatrixEntry("e0", 128, 64, "expert", 0))),
        LayerEntry(1, (MatrixEntry("b", 64, 128, "dense_ffn"),)),
    ))


def test_manifest_json_round_trip():
    m = _manifest()
    assert ModelManifest.from_json(json.loads(json.dumps(m.to_json()))) == m
    assert m.layer_of("b") == 1


def test_manifest_rejects_duplicates_and_bad_expert_index():
    with pytest.raises(DataError):
        ModelManifest((LayerEntry(0, (MatrixEntry("a", 1, 1, "attention"), MatrixEntry("a", 1, 1, "attention"))),))
    with pytest.raises(DataError):
        ModelManifest((LayerEntry(0, (MatrixEntry("a", 1, 1, "expert"),)),))
    with pytest.raises(DataError):
        ModelManifest((LayerEntry(0, (MatrixEntry("a", 1, 1, "attention", 3),)),))
    with pytest.raises(FormatError):
        ModelManifest.from_json({"layers": [{"matrices": []}]})


def test_frequency_stats_round_trip():
    f = ExpertFrequencyStats({0: (117, 10), 1: (5, 5)}, 1000)
    assert ExpertFrequencyStats.from_json(f.to_json()) == f
    with pytest.raises(DataError):
        ExpertFrequencyStats({0: (-1, 2)}, 1)


def test_memory_64x64_rank0():
    # codes 64*64*3/8 plus one 2-byte scale and zero per 64-element group
    assert matrix_memory_bytes(64, 64, 0) == 1536 + 256 == 1792


def test_code_bytes_ratio_int8_int3():
    m = ModelManifest((LayerEntry(0, (MatrixEntry("a", 256, 512, "attention"),)),))
    meta = 2 * (256 * 512 // 64) * 2
    c8 = quantized_memory_bytes(m, {"a": 0}, bits=8) - meta
    c3 = quantized_memory_bytes(m, {"a": 0}, bits=3) - meta
    assert c8 / c3 == pytest.approx(8 / 3)


@pytest.mark.parametrize("rank", [1, 16, 64, 128])
def test_compensator_int3_vs_int8_code_ratio(rank):
    rows, cols = 512, 256
    scales = (rows + cols) * math.ceil(rank / 64) * 2
    c3 = compensator_bytes(rows, cols, rank, 3) - scales
    c8 = compensator_bytes(rows, cols, rank, 8) - scales
    assert c3 / c8 == pytest.approx(0.375, abs=1 / c8)


def test_rank_too_large_is_plan_error():
    with pytest.raises(PlanError):
        matrix_memory_bytes(64, 128, 65)
    with pytest.raises(PlanError):
        matrix_memory_bytes(64, 100, 0)
    with pytest.raises(PlanError):
        matrix_memory_bytes(64, 64, 0, bits=5)


@given(st.integers(1, 8).map(lambda x: 64 * x), st.integers(1, 8).map(lambda x: 64 * x),
       st.integers(0, 63), st.sampled_from([3, 4, 8]), st.sampled_from([3, 8]))
def test_memory_monotone(rows, cols, r, bits, cb):
    base = matrix_memory_bytes(rows, cols, r, bits, 64, cb)
    assert matrix_memory_bytes(rows, cols, r + 1, bits, 64, cb) >= base
    assert matrix_memory_bytes(rows + 64, cols, r, bits, 64, cb) >= base
    assert matrix_memory_bytes(rows, cols + 64, r, bits, 64, cb) >= base
    assert matrix_memory_bytes(rows, cols, r, 8, 64, cb) >= base


def test_memory_additive():
    m = _manifest()
    ranks = {"a": 3, "e0": 7, "b": 0}
    total = sum(matrix_memory_bytes(e.rows, e.cols, ranks[e.name]) for e in m.matrices())
    assert quantized_memory_bytes(m, ranks) == total
    with pytest.raises(PlanError):
        quantized_memory_bytes(m, {"a": 1})


def test_atomic_write_leaves_no_temp(tmp_path):
    write_container(tmp_path / "x.milo", {"a": 1}, b"")
    assert [p.name for p in tmp_path.iterdir()] == ["x.milo"]
