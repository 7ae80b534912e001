"""Per-matrix weight statistics and expert activation frequencies."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericError, StatError
from .quant import QuantConfig, dequantize, hqq_solve, init_quant_params
from .tensor_store import ExpertFrequencyStats

UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class MatrixStats:
    name: str
    structure_tag: str
    kurtosis: float
    residual_rank: int
    rel_quant_error: float
    expert_frequency: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "MatrixStats":
        return cls(**d)


def kurtosis(x) -> float:
    """Excess kurtosis, E[(X - mu)^4] / sigma^4 - 3, over all entries."""
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size < 4:
        raise StatError("kurtosis needs at least 4 values")
    mu = math.fsum(v) / v.size
    d2 = np.square(v - mu)
    m2 = math.fsum(d2) / v.size
    if m2 == 0:
        raise StatError("zero variance")
    m4 = math.fsum(d2 * d2) / v.size
    return m4 / (m2 * m2) - 3.0


def residual_rank(w, w_dq, tau: float = 0.5) -> int:
    """Number of singular values of ``w - w_dq`` strictly below ``tau * sigma_max``."""
    e = np.asarray(w, np.float64) - np.asarray(w_dq, np.float64)
    try:
        sv = np.linalg.svd(e, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed: {exc}") from exc
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.count_nonzero(sv < tau * sv[0]))


def rel_quant_error(w, w_dq) -> float:
    w = np.asarray(w, np.float64)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise StatError("zero-norm weight")
    return float(np.linalg.norm(w - np.asarray(w_dq, np.float64)) / norm)


def expert_frequencies(stats: ExpertFrequencyStats) -> dict[int, tuple[list[float], float | str]]:
    """Per layer: normalized frequencies and the max/min ratio (``UNBOUNDED`` if a count is 0)."""
    out = {}
    for layer, counts in sorted(stats.counts.items()):
        c = np.asarray(counts, dtype=np.float64)
        if c.size == 0:
            raise StatError(f"layer {layer} has no experts")
        total = c.sum()
        if total <= 0:
            raise StatError(f"layer {layer} has no activations")
        ratio = UNBOUNDED if c.min() == 0 else float(c.max() / c.min())
        out[layer] = ((c / total).tolist(), ratio)
    return out


def matrix_stats(name: str, w, structure_tag: str, cfg: QuantConfig = QuantConfig(),
                 tau: float = 0.5, expert_frequency: float | None = None) -> MatrixStats:
    """Statistics of ``w`` under calibration-free INT3 quantization (no compensator)."""
    w = np.asarray(w, np.float32)
    s, z = init_quant_params(w, cfg)
    w_dq = dequantize(hqq_solve(w, cfg, s, z))
    return MatrixStats(name, structure_tag, kurtosis(w), residual_rank(w, w_dq, tau),
                       rel_quant_error(w, w_dq), expert_frequency)


def tag_means(stats, field: str) -> dict[str, float]:
    """Mean of one MatrixStats field within each structure tag."""
    groups: dict[str, list[float]] = {}
    for st in stats:
        groups.setdefault(st.structure_tag, []).append(float(getattr(st, field)))
    return {tag: float(np.mean(v)) for tag, v in sorted(groups.items())}
