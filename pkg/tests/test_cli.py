import hashlib
import json
import re

import numpy as np
import pytest

from lrquant import cli, gemm
from lrquant.errors import NumericError
from lrquant.packing import dequant_packed, load_packed
from lrquant.policy import RankPlan
from lrquant.quant import dequantize, load_quantized
from lrquant.tensor_store import ModelManifest, quantized_memory_bytes

SMALL = ["--layers", "1", "--experts", "2", "--hidden", "64", "--ffn", "128"]
ERROR_LINE = re.compile(r'^error=[a-z]+ exit=\d message=".*"$')


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_digest(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def pipeline(out, policy="Dense-512+Kurtosis-16", workers=1, small=True):
    assert run("--out", out, "--seed", 3, "synth", *(SMALL if small else [])) == 0
    assert run("--out", out, "--workers", workers, "analyze") == 0
    assert run("--out", out, "plan-ranks", "--policy", policy) == 0
    assert run("--out", out, "--workers", workers, "quantize") == 0
    assert run("--out", out, "pack") == 0
    assert run("--out", out, "report") == 0


def test_synth_counts_and_imbalance(tmp_path):
    assert run("--out", tmp_path, "synth", "--imbalance", 11.7) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert sum(len(l["matrices"]) for l in manifest["layers"]) == 2 * (4 * 3 + 4)
    freq = json.loads((tmp_path / "freq_stats.json").read_text())
    for layer in freq["layers"]:
        assert max(layer["counts"]) / min(layer["counts"]) == pytest.approx(11.7)


def test_synth_deterministic(tmp_path):
    run("--out", tmp_path / "a", "--seed", 9, "synth", *SMALL)
    run("--out", tmp_path / "b", "--seed", 9, "synth", *SMALL)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_synth_indivisible_dims(tmp_path, capsys):
    assert run("--out", tmp_path, "synth", "--hidden", 100) == 2
    assert ERROR_LINE.match(capsys.readouterr().err.strip())


def test_pipeline_deterministic_and_worker_independent(tmp_path):
    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b", workers=2)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_report_idempotent(tmp_path):
    pipeline(tmp_path)
    before = tree_digest(tmp_path)
    assert run("--out", tmp_path, "report") == 0
    assert tree_digest(tmp_path) == before
    header = (tmp_path / "kurtosis_vs_error.csv").read_text().splitlines()[0]
    assert header == "name,structure_tag,kurtosis,rel_quant_error,final_rel_error"
    trace = (tmp_path / "convergence.csv").read_text().splitlines()
    assert trace[0] == "name,iteration,error" and len(trace) > 1
    assert (tmp_path / "analysis.csv").read_text().startswith("name,tag,kurtosis,rel_quant_error,residual_rank")


def test_analyze_kurtosis_contrast(tmp_path):
    run("--out", tmp_path, "synth")
    assert run("--out", tmp_path, "analyze") == 0
    means = json.loads((tmp_path / "analysis.json").read_text())["tag_means"]["kurtosis"]
    assert means["attention"] > means["expert"]


def test_uniform_zero_writes_no_compensators(tmp_path):
    pipeline(tmp_path, policy="Uniform-0")
    comp = tmp_path / "compressed"
    assert not list(comp.glob("*.U.milo")) and not list(comp.glob("*.V.milo"))
    assert len(list(comp.glob("*.q.milo"))) == 2 * 3 + 4


def test_composite_beats_uniform_zero(tmp_path):
    pipeline(tmp_path / "base", policy="Uniform-0", small=False)
    pipeline(tmp_path / "milo", policy="Dense-512+Kurtosis-16", small=False)
    base = json.loads((tmp_path / "base" / "quantize_summary.json").read_text())
    milo = json.loads((tmp_path / "milo" / "quantize_summary.json").read_text())
    assert milo["total_error"] < base["total_error"]
    for tag, err in milo["tag_mean_rel_error"].items():
        assert err < base["tag_mean_rel_error"][tag]


def test_summary_memory_matches_plan(tmp_path):
    pipeline(tmp_path, policy="Dense-32+Frequency-8")
    summary = json.loads((tmp_path / "quantize_summary.json").read_text())
    plan = RankPlan.from_json(json.loads((tmp_path / "plan.json").read_text()))
    manifest = ModelManifest.from_json(json.loads((tmp_path / "manifest.json").read_text()))
    assert summary["memory_bytes"] == quantized_memory_bytes(manifest, plan) == plan.memory_bytes


def test_budgeted_plan(tmp_path):
    run("--out", tmp_path, "synth", *SMALL)
    assert run("--out", tmp_path, "--config", write_config(tmp_path, {"budget": 10**9}),
               "plan-ranks", "--policy", "Uniform-{r}") == 0
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["policy"] == "Uniform-64"
    assert run("--out", tmp_path, "plan-ranks", "--policy", "Uniform-{r}", "--budget", 10) == 2


def write_config(root, doc):
    p = root / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


def test_config_file_and_unknown_keys(tmp_path, capsys):
    run("--out", tmp_path, "synth", *SMALL)
    cfg = write_config(tmp_path, {"policy": "Uniform-2", "milo": {"max_outer_iters": 2}})
    assert run("--config", cfg, "--out", tmp_path, "plan-ranks") == 0
    assert run("--config", cfg, "--out", tmp_path, "quantize") == 0
    rep = json.loads((tmp_path / "reports" / "layers.0.attn.q_proj.json").read_text())
    assert rep["iterations_run"] <= 2
    bad = write_config(tmp_path, {"polcy": "Uniform-2"})
    assert run("--config", bad, "--out", tmp_path, "plan-ranks") == 2
    assert "polcy" in capsys.readouterr().err


def test_missing_upstream_artifacts(tmp_path, capsys):
    run("--out", tmp_path, "synth", *SMALL)
    assert run("--out", tmp_path, "quantize") == 2
    err = capsys.readouterr().err.strip()
    assert ERROR_LINE.match(err) and "plan.json" in err
    assert run("--out", tmp_path, "report") == 2
    assert "analysis.json" in capsys.readouterr().err
    assert run("--out", tmp_path / "nowhere", "analyze") == 2


def test_corrupt_tensor_is_data_error(tmp_path, capsys):
    run("--out", tmp_path, "synth", *SMALL)
    victim = next((tmp_path / "tensors").iterdir())
    victim.write_bytes(victim.read_bytes()[:-4])
    assert run("--out", tmp_path, "analyze") == 3
    assert ERROR_LINE.match(capsys.readouterr().err.strip())


def test_numeric_failure_names_matrix(tmp_path, capsys, monkeypatch):
    run("--out", tmp_path, "synth", *SMALL)
    run("--out", tmp_path, "plan-ranks", "--policy", "Uniform-1")

    def boom(w, cfg):
        raise NumericError("non-finite SVD factors")

    monkeypatch.setattr(cli, "milo_compress", boom)
    assert run("--out", tmp_path, "quantize") == 4
    err = capsys.readouterr().err.strip()
    assert ERROR_LINE.match(err) and "layers.0.attn.q_proj" in err


def test_bad_verb_and_policy(tmp_path, capsys):
    assert run("--out", tmp_path, "frobnicate") == 2
    assert ERROR_LINE.match(capsys.readouterr().err.strip())
    run("--out", tmp_path, "synth", *SMALL)
    assert run("--out", tmp_path, "plan-ranks", "--policy", "Median-4") == 2


def test_gemm_check_exit_codes(tmp_path, capsys, monkeypatch):
    args = ("--out", tmp_path, "gemm-check", "--shapes", "256x256", "--batches", "1,17", "--seeds", 2)
    assert run(*args) == 0
    line = json.loads(capsys.readouterr().out.strip().splitlines()[0])
    assert set(line) == {"shape", "seeds", "max_rel_error", "pass"} and line["pass"]
    monkeypatch.setattr(gemm, "REL_ERROR_GATE", 0.0)
    assert run(*args) == 5
    assert json.loads((tmp_path / "gemm_check.json").read_text())["pass"] is False
    assert run("--out", tmp_path, "gemm-check", "--shapes", "200x256") == 3
    assert run("--out", tmp_path, "gemm-check", "--shapes", "abc") == 2


def test_packed_artifacts_load(tmp_path):
    pipeline(tmp_path, policy="Uniform-0")
    name = "layers.0.experts.1.w2"
    p = load_packed(tmp_path / "packed" / f"{name}.milo")
    q = load_quantized(tmp_path / "compressed" / f"{name}.q.milo")
    assert np.array_equal(p.codes(), q.codes)
    ref = dequantize(q)
    assert np.linalg.norm(dequant_packed(p) - ref) / np.linalg.norm(ref) < 0.01
