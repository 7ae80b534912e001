"""Alternating quantization / low-rank compensation with a windowed stop rule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .lowrank import Compensator, compensator_apply, quantize_compensator, truncated_svd
from .quant import QuantConfig, QuantizedMatrix, dequantize, hqq_solve, init_quant_params

DIVERGENCE_PATIENCE = 3


@dataclass(frozen=True)
class MiloConfig:
    quant: QuantConfig = field(default_factory=QuantConfig)
    rank: int = 0
    max_outer_iters: int = 20
    window: int = 3
    rel_tol: float = 1e-4
    quantize_compensator: bool = True
    svd_method: str = "full"

    def __post_init__(self):
        if self.max_outer_iters < 1 or self.window < 1 or self.rel_tol <= 0:
            raise ConfigError("need max_outer_iters >= 1, window >= 1, rel_tol > 0")
        if self.rank < 0:
            raise ConfigError("rank must be >= 0")


@dataclass(frozen=True)
class MiloResult:
    quantized: QuantizedMatrix
    compensator: Compensator
    error_trace: list[float]
    iterations_run: int
    stop_reason: str  # converged | early-stop | diverged
    loop_error: float  # last in-loop error, before any compensator quantization

    @property
    def final_error(self) -> float:
        return self.error_trace[-1]

    def report(self, name: str, weight_norm: float) -> dict:
        return {
            "name": name,
            "iterations_run": self.iterations_run,
            "stop_reason": self.stop_reason,
            "error_trace": list(self.error_trace),
            "final_rel_error": self.final_error / weight_norm if weight_norm > 0 else 0.0,
        }


def error_trace_metric(w, quantized: QuantizedMatrix, compensator: Compensator) -> float:
    """Frobenius norm of ``W - W_dq - U V``."""
    diff = (np.asarray(w, np.float64) - dequantize(quantized).astype(np.float64)
            - compensator_apply(compensator).astype(np.float64))
    return float(np.sqrt(np.sum(diff * diff)))


class StopRule:
    """Sliding-window relative-improvement test.

    The windowed mean uses all available errors while fewer than ``window``
    exist.  A windowed improvement smaller than ``rel_tol`` in magnitude stops
    with ``converged``; ``DIVERGENCE_PATIENCE`` consecutive windowed increases
    stop with ``diverged``.
    """

    def __init__(self, window: int, rel_tol: float):
        self.window = window
        self.rel_tol = rel_tol
        self.errors: list[float] = []
        self.increases = 0

    def windowed(self, upto: int) -> float:
        chunk = self.errors[max(0, upto - self.window) : upto]
        return float(np.mean(chunk))

    def update(self, err: float) -> str | None:
        self.errors.append(err)
        t = len(self.errors)
        if t < 2:
            return None
        prev, cur = self.windowed(t - 1), self.windowed(t)
        if prev == 0:
            return "converged"
        ratio = (prev - cur) / prev
        if abs(ratio) < self.rel_tol:
            return "converged"
        self.increases = self.increases + 1 if ratio < 0 else 0
        if self.increases >= DIVERGENCE_PATIENCE:
            return "diverged"
        return None


def milo_compress(w, cfg: MiloConfig = MiloConfig()) -> MiloResult:
    w = np.asarray(w, dtype=np.float32)
    rows, cols = w.shape
    qcfg = cfg.quant
    comp = Compensator.zero(rows, cols)
    s, z = init_quant_params(w, qcfg)
    rule = StopRule(cfg.window, cfg.rel_tol)
    reason = "early-stop"
    for _ in range(cfg.max_outer_iters):
        target = w if comp.rank == 0 else w - compensator_apply(comp)
        q = hqq_solve(target, qcfg, s, z)
        z = q.zeros
        residual = w.astype(np.float64) - dequantize(q)
        comp = truncated_svd(residual, cfg.rank, method=cfg.svd_method)
        stop = rule.update(error_trace_metric(w, q, comp))
        if stop is not None:
            reason = stop
            break
    trace = list(rule.errors)
    loop_error = trace[-1]
    if cfg.quantize_compensator:
        comp = quantize_compensator(comp)
        trace[-1] = error_trace_metric(w, q, comp)
    return MiloResult(q, comp, trace, len(trace), reason, loop_error)
