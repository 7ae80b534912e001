"""Command-line pipeline: synth -> analyze -> plan-ranks -> quantize -> pack -> gemm-check -> report.

Every verb reads and writes inside one artifact directory (``--out``)::

    manifest.json, freq_stats.json, tensors/    synth
    analysis.json, analysis.csv                analyze
    plan.json                                  plan-ranks
    compressed/, reports/, quantize_summary.json quantize
    packed/, pack_summary.json                 pack
    gemm_check.json                            gemm-check
    report.json, kurtosis_vs_error.csv, convergence.csv  report

Errors print one line ``error=<code> exit=<n> message="..."`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import AcceptanceError, ConfigError, IoError, LrqError
from .gemm import TILE_SHAPES, gemm_check
from .lowrank import save_compensator
from .optimizer import MiloConfig, milo_compress
from .packing import MODES, dequant_packed, pack_quantized, save_packed
from .policy import RankPlan, plan_ranks, plan_under_memory
from .quant import QuantConfig, dequantize, load_quantized, save_quantized
from .stats import MatrixStats, expert_frequencies, matrix_stats, tag_means
from .synth import SynthSpec, write_model
from .tensor_store import (ExpertFrequencyStats, ModelManifest, atomic_write_text, dump_json,
                           load_json, load_tensor)

DEFAULT_GEMM_SHAPES = ((2048, 11008), (4096, 14336))


@dataclass
class RunConfig:
    model: str | None = None  # directory holding manifest.json, freq_stats.json, tensors/
    out: str = "out"
    policy: str = "Uniform-0"
    budget: int | None = None
    seed: int = 0
    workers: int = 1
    quant: dict = field(default_factory=dict)  # QuantConfig fields
    milo: dict = field(default_factory=dict)  # MiloConfig fields other than quant and rank
    synth: dict = field(default_factory=dict)  # SynthSpec fields

    @classmethod
    def load(cls, path) -> "RunConfig":
        doc = load_json(path)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        return cls(**doc)

    @property
    def model_dir(self) -> Path:
        return Path(self.model if self.model is not None else self.out)

    def quant_config(self) -> QuantConfig:
        try:
            return QuantConfig(**self.quant)
        except TypeError as exc:
            raise ConfigError(f"bad quant config: {exc}") from exc

    def milo_config(self, rank: int) -> MiloConfig:
        try:
            return MiloConfig(quant=self.quant_config(), rank=rank, **self.milo)
        except TypeError as exc:
            raise ConfigError(f"bad milo config: {exc}") from exc


def _require(*paths: Path) -> None:
    for p in paths:
        if not p.exists():
            raise ConfigError(f"missing input: {p}")


def _load_model(cfg: RunConfig):
    d = cfg.model_dir
    _require(d / "manifest.json", d / "freq_stats.json", d / "tensors")
    manifest = ModelManifest.from_json(load_json(d / "manifest.json"))
    freq = ExpertFrequencyStats.from_json(load_json(d / "freq_stats.json"))
    _require(*(_tensor_path(d, m.name) for m in manifest.matrices()))
    return manifest, freq


def _tensor_path(model_dir: Path, name: str) -> Path:
    return model_dir / "tensors" / f"{name}.milo"


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


# -- verbs -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    opts = dict(cfg.synth)
    for key in ("layers", "experts", "hidden", "ffn", "attention_df", "std", "imbalance", "tokens"):
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    try:
        spec = SynthSpec(**opts)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc
    manifest = write_model(cfg.out, spec, cfg.seed)
    _emit({"verb": "synth", "out": str(cfg.out), "matrices": len(list(manifest.matrices())),
           "seed": cfg.seed})
    return 0


def _analyze_one(job):
    model_dir, entry, qcfg, freq = job
    w = load_tensor(_tensor_path(Path(model_dir), entry["name"])).data
    return matrix_stats(entry["name"], w, entry["structure_tag"], qcfg, expert_frequency=freq).to_json()


def _pool_map(fn, jobs, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def cmd_analyze(cfg: RunConfig, args) -> int:
    manifest, freq = _load_model(cfg)
    qcfg = cfg.quant_config()
    per_layer = expert_frequencies(freq)
    jobs = []
    for m in manifest.matrices():
        f = None
        if m.expert_index is not None:
            layer = manifest.layer_of(m.name)
            if layer not in per_layer:
                raise ConfigError(f"frequency stats have no layer {layer}")
            f = per_layer[layer][0][m.expert_index]
        jobs.append((str(cfg.model_dir), {"name": m.name, "structure_tag": m.structure_tag}, qcfg, f))
    rows = _pool_map(_analyze_one, jobs, cfg.workers)
    stats = [MatrixStats.from_json(r) for r in rows]
    doc = {
        "matrices": rows,
        "tag_means": {k: tag_means(stats, k) for k in ("kurtosis", "rel_quant_error", "residual_rank")},
        "expert_frequencies": {str(l): {"freqs": f, "max_min_ratio": r} for l, (f, r) in per_layer.items()},
    }
    dump_json(Path(cfg.out) / "analysis.json", doc)
    table = [[r["name"], r["structure_tag"], repr(r["kurtosis"]), repr(r["rel_quant_error"]), r["residual_rank"]]
             for r in rows]
    atomic_write_text(Path(cfg.out) / "analysis.csv",
                      _csv(table, ["name", "tag", "kurtosis", "rel_quant_error", "residual_rank"]))
    _emit({"verb": "analyze", "matrices": len(rows), "tag_mean_kurtosis": doc["tag_means"]["kurtosis"]})
    return 0


def _load_stats(out: Path) -> dict[str, MatrixStats]:
    path = out / "analysis.json"
    _require(path)
    return {d["name"]: MatrixStats.from_json(d) for d in load_json(path)["matrices"]}


def cmd_plan(cfg: RunConfig, args) -> int:
    manifest, _ = _load_model(cfg)
    out = Path(cfg.out)
    policy = cfg.policy
    needs_stats = any(k in policy for k in ("Frequency", "Kurtosis"))
    stats = _load_stats(out) if needs_stats else None
    bits = cfg.quant_config().bits
    comp_bits = 3 if cfg.milo.get("quantize_compensator", True) else 16
    if cfg.budget is not None:
        if "{r}" not in policy:
            raise ConfigError("a memory budget needs a policy template containing {r}")
        plan = plan_under_memory(manifest, stats, cfg.budget, [policy], bits, comp_bits=comp_bits)[0]
    else:
        plan = plan_ranks(manifest, stats, policy, bits, comp_bits=comp_bits)
    dump_json(out / "plan.json", plan.to_json())
    _emit({"verb": "plan-ranks", "policy": plan.policy, "avg_sparse_rank": plan.avg_sparse_rank,
           "memory_bytes": plan.memory_bytes})
    return 0


def _quantize_one(job):
    model_dir, out, name, tag, mcfg = job
    try:
        w = load_tensor(_tensor_path(Path(model_dir), name)).data
        res = milo_compress(w, mcfg)
        comp_dir = Path(out) / "compressed"
        save_quantized(res.quantized, comp_dir / f"{name}.q.milo", name)
        if mcfg.rank > 0:
            save_compensator(res.compensator, comp_dir / f"{name}.U.milo", comp_dir / f"{name}.V.milo", name)
        norm = float(np.linalg.norm(w.astype(np.float64)))
        rep = res.report(name, norm)
        rep.update(structure_tag=tag, rank=mcfg.rank, final_error=res.final_error)
        dump_json(Path(out) / "reports" / f"{name}.json", rep)
        return rep
    except LrqError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def cmd_quantize(cfg: RunConfig, args) -> int:
    manifest, _ = _load_model(cfg)
    out = Path(cfg.out)
    _require(out / "plan.json")
    plan = RankPlan.from_json(load_json(out / "plan.json"))
    for sub in ("compressed", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    # every per-matrix config is validated before any matrix is compressed
    jobs = []
    for m in manifest.matrices():
        if m.name not in plan.ranks:
            raise ConfigError(f"plan has no rank for {m.name}")
        jobs.append((str(cfg.model_dir), str(out), m.name, m.structure_tag, cfg.milo_config(plan.ranks[m.name])))
    t0 = time.perf_counter()
    reports = _pool_map(_quantize_one, jobs, cfg.workers)
    wall = time.perf_counter() - t0
    by_tag: dict[str, list[float]] = {}
    for r in reports:
        by_tag.setdefault(r["structure_tag"], []).append(r["final_rel_error"])
    sq = float(sum(r["final_error"] ** 2 for r in reports))
    summary = {
        "policy": plan.policy,
        "matrices": len(reports),
        "total_sq_error": sq,
        "total_error": float(np.sqrt(sq)),
        "memory_bytes": plan.memory_bytes,
        "tag_mean_rel_error": {t: float(np.mean(v)) for t, v in sorted(by_tag.items())},
        "stop_reasons": {s: sum(r["stop_reason"] == s for r in reports)
                         for s in sorted({r["stop_reason"] for r in reports})},
    }
    dump_json(out / "quantize_summary.json", summary)
    # wall time is reported but kept out of the artifact directory so reruns are byte-identical
    _emit({"verb": "quantize", **summary, "wall_time_s": round(wall, 3)})
    return 0


def cmd_pack(cfg: RunConfig, args) -> int:
    manifest, _ = _load_model(cfg)
    out = Path(cfg.out)
    comp_dir = out / "compressed"
    names = [m.name for m in manifest.matrices()]
    _require(*(comp_dir / f"{n}.q.milo" for n in names))
    (out / "packed").mkdir(parents=True, exist_ok=True)
    rows = []
    for n in names:
        q = load_quantized(comp_dir / f"{n}.q.milo")
        r, c = q.shape
        layout = "tiled16x64" if r % 16 == 0 and c % 64 == 0 else "linear"
        try:
            p = pack_quantized(q, layout)
        except LrqError as exc:
            raise type(exc)(f"{n}: {exc}") from exc
        save_packed(p, out / "packed" / f"{n}.milo", n, split=args.split)
        ref = dequantize(q).astype(np.float64)
        diff = np.linalg.norm(dequant_packed(p).astype(np.float64) - ref)
        denom = np.linalg.norm(ref)
        rows.append({"name": n, "layout": layout, "code_bytes": int(p.words.nbytes),
                     "codes": r * c, "binary16_rel_error": float(diff / denom) if denom > 0 else 0.0})
    summary = {"matrices": rows, "split": bool(args.split),
               "total_code_bytes": sum(x["code_bytes"] for x in rows)}
    dump_json(out / "pack_summary.json", summary)
    _emit({"verb": "pack", "matrices": len(rows), "total_code_bytes": summary["total_code_bytes"]})
    return 0


def _parse_shapes(text: str) -> list[tuple[int, int]]:
    shapes = []
    for part in text.split(","):
        try:
            k, n = part.lower().split("x")
            shapes.append((int(k), int(n)))
        except ValueError as exc:
            raise ConfigError(f"bad shape {part!r}, expected KxN") from exc
    return shapes


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def cmd_gemm_check(cfg: RunConfig, args) -> int:
    shapes = _parse_shapes(args.shapes) if args.shapes else list(DEFAULT_GEMM_SHAPES)
    batches = _parse_ints(args.batches)
    if any(b < 1 for b in batches) or args.seeds < 1:
        raise ConfigError("batches and seed count must be positive")
    modes = MODES if args.mode == "both" else (args.mode,)
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    reports = gemm_check(shapes, TILE_SHAPES, modes, batches, seeds)
    ok = all(r["pass"] for r in reports)
    dump_json(Path(cfg.out) / "gemm_check.json", {"suites": reports, "pass": ok})
    for r in reports:
        _emit({k: r[k] for k in ("shape", "seeds", "max_rel_error", "pass")})
    if not ok:
        raise AcceptanceError("relative error gate failed for " +
                              ", ".join(f"{r['shape'][0]}x{r['shape'][1]}" for r in reports if not r["pass"]))
    return 0


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(cfg: RunConfig, args) -> int:
    manifest, _ = _load_model(cfg)
    out = Path(cfg.out)
    _require(out / "analysis.json", out / "quantize_summary.json")
    names = [m.name for m in manifest.matrices()]
    _require(*(out / "reports" / f"{n}.json" for n in names))
    analysis = load_json(out / "analysis.json")
    reports = {n: load_json(out / "reports" / f"{n}.json") for n in names}
    doc = {"analysis": analysis, "quantize": load_json(out / "quantize_summary.json"),
           "matrices": [reports[n] for n in names]}
    for key, fname in (("plan", "plan.json"), ("pack", "pack_summary.json"), ("gemm_check", "gemm_check.json")):
        if (out / fname).exists():
            doc[key] = load_json(out / fname)
    dump_json(out / "report.json", doc)
    stats = {d["name"]: d for d in analysis["matrices"]}
    scatter = [[n, stats[n]["structure_tag"], repr(stats[n]["kurtosis"]), repr(stats[n]["rel_quant_error"]),
                repr(reports[n]["final_rel_error"])] for n in names if n in stats]
    atomic_write_text(out / "kurtosis_vs_error.csv",
                      _csv(scatter, ["name", "structure_tag", "kurtosis", "rel_quant_error", "final_rel_error"]))
    trace = [[n, i + 1, repr(e)] for n in names for i, e in enumerate(reports[n]["error_trace"])]
    atomic_write_text(out / "convergence.csv", _csv(trace, ["name", "iteration", "error"]))
    _emit({"verb": "report", "matrices": len(names), "out": str(out)})
    return 0


# -- argument parsing ------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON run config")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--workers", type=int, default=d)
    p.add_argument("--out", default=d, help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lrquant", description="INT3 MoE compression with low-rank compensators")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = verb("synth", cmd_synth, "write a synthetic MoE model")
    for flag, typ in (("--layers", int), ("--experts", int), ("--hidden", int), ("--ffn", int),
                      ("--attention-df", float), ("--std", float), ("--imbalance", float), ("--tokens", int)):
        p.add_argument(flag, type=typ)

    p = verb("analyze", cmd_analyze, "per-matrix kurtosis, residual rank and quantization error")
    p.add_argument("--model", help="model directory (default: --out)")

    p = verb("plan-ranks", cmd_plan, "assign compensator ranks from a policy")
    p.add_argument("--model")
    p.add_argument("--policy", help="e.g. Dense-32+Kurtosis-16, or a template with {r} plus --budget")
    p.add_argument("--budget", type=int, help="memory budget in bytes")

    p = verb("quantize", cmd_quantize, "compress every matrix with its planned rank")
    p.add_argument("--model")

    p = verb("pack", cmd_pack, "pack quantized codes three words per 32 codes")
    p.add_argument("--model")
    p.add_argument("--split", action="store_true", help="store words 0-1 and word 2 as separate planes")

    p = verb("gemm-check", cmd_gemm_check, "tiled W3A16 GeMM against the dense reference")
    p.add_argument("--shapes", help="comma list of KxN (default 2048x11008,4096x14336)")
    p.add_argument("--batches", default="1,5,16,33,64")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    p.add_argument("--mode", choices=("both",) + MODES, default="both")

    p = verb("report", cmd_report, "aggregate artifacts into report.json and CSV tables")
    p.add_argument("--model")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key in ("out", "seed", "workers", "model", "policy", "budget"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed must be a u64")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _run_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        return args.func(cfg, args)
    except LrqError as exc:
        err = exc
    except OSError as exc:
        err = IoError(str(exc))
    msg = json.dumps(str(err))
    print(f"error={err.code} exit={err.exit_code} message={msg}", file=sys.stderr)
    return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
