"""Synthetic MoE models: heavy-tailed attention, Gaussian experts, skewed routing."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor_store import (ExpertFrequencyStats, LayerEntry, MatrixEntry, ModelManifest,
                           WeightMatrix, dump_json, save_tensor)

ATTENTION = ("q_proj", "k_proj", "v_proj", "o_proj")
EXPERT = ("w1", "w2", "w3")


@dataclass(frozen=True)
class SynthSpec:
    layers: int = 2
    experts: int = 4
    hidden: int = 128
    ffn: int = 256
    attention_df: float = 3.0  # Student-t degrees of freedom
    std: float = 0.02
    imbalance: float = 11.7  # max/min expert activation count per layer
    tokens: int = 100_000
    top_k: int = 2

    def __post_init__(self):
        for dim in (self.hidden, self.ffn):
            if dim % 64:
                raise ConfigError(f"dimension {dim} must be a multiple of 64 (grouping and tiling)")
        if self.layers < 1 or self.experts < 1:
            raise ConfigError("need at least one layer and one expert")
        if self.attention_df <= 2:
            # unit-variance scaling needs df > 2
            raise ConfigError("attention_df must exceed 2")
        if self.imbalance < 1:
            raise ConfigError("imbalance must be >= 1")


def build_manifest(spec: SynthSpec) -> ModelManifest:
    h, f = spec.hidden, spec.ffn
    shapes = {"w1": (f, h), "w2": (h, f), "w3": (f, h)}
    layers = []
    for l in range(spec.layers):
        mats = [MatrixEntry(f"layers.{l}.attn.{p}", h, h, "attention") for p in ATTENTION]
        for e in range(spec.experts):
            for w in EXPERT:
                mats.append(MatrixEntry(f"layers.{l}.experts.{e}.{w}", *shapes[w], "expert", e))
        layers.append(LayerEntry(l, tuple(mats)))
    return ModelManifest(tuple(layers))


def sample_matrix(entry: MatrixEntry, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (entry.rows, entry.cols)
    if entry.structure_tag == "expert":
        x = rng.standard_normal(shape)
    else:
        df = spec.attention_df
        x = rng.standard_t(df, shape) / np.sqrt(df / (df - 2))
    return (spec.std * x).astype(np.float32)


def expert_counts(spec: SynthSpec, rng: np.random.Generator) -> ExpertFrequencyStats:
    """Counts spread linearly from ``base`` to ``base * imbalance``, shuffled per layer."""
    base = 10_000
    top = int(round(base * spec.imbalance))
    counts = {}
    for l in range(spec.layers):
        c = np.linspace(base, top, spec.experts).round().astype(np.int64)
        if spec.experts == 1:
            c = np.array([base])
        counts[l] = tuple(int(v) for v in rng.permutation(c))
    return ExpertFrequencyStats(counts, spec.tokens)


def generate(spec: SynthSpec, seed: int):
    """Return (manifest, {name: WeightMatrix}, frequency stats); deterministic in ``seed``."""
    manifest = build_manifest(spec)
    entries = list(manifest.matrices())
    children = np.random.SeedSequence(seed).spawn(len(entries) + 1)
    weights = {
        e.name: WeightMatrix(e.name, sample_matrix(e, spec, np.random.default_rng(ss)))
        for e, ss in zip(entries, children)
    }
    freq = expert_counts(spec, np.random.default_rng(children[-1]))
    return manifest, weights, freq


def write_model(out_dir, spec: SynthSpec, seed: int) -> ModelManifest:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    manifest, weights, freq = generate(spec, seed)
    for name, w in weights.items():
        save_tensor(w, out / "tensors" / f"{name}.milo")
    dump_json(out / "manifest.json", manifest.to_json())
    dump_json(out / "freq_stats.json", freq.to_json())
    return manifest
