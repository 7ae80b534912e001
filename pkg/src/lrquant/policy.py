"""Rank-assignment policies and budgeted plan search.

Policy grammar::

    Uniform-<r> | Dense-<r> | Sparse-<r> | Frequency-<r> | Kurtosis-<r>
    | Dense-<a>+Frequency-<b> | Dense-<a>+Kurtosis-<b>
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import PlanError
from .stats import MatrixStats
from .tensor_store import ModelManifest, quantized_memory_bytes

_POLICY = re.compile(
    r"^(?:(?P<single>Uniform|Dense|Sparse|Frequency|Kurtosis)-(?P<r>\d+)"
    r"|Dense-(?P<a>\d+)\+(?P<sparse>Frequency|Kurtosis)-(?P<b>\d+))$"
)


@dataclass(frozen=True)
class PolicySpec:
    dense_rank: int | None  # rank for dense matrices; None leaves them at 0
    sparse_kind: str | None  # None, "Uniform", "Frequency" or "Kurtosis"
    sparse_rank: int
    text: str

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        m = _POLICY.match(text.strip())
        if m is None:
            raise PlanError(f"unknown policy {text!r}")
        if m["single"] is None:
            return cls(int(m["a"]), m["sparse"], int(m["b"]), text.strip())
        kind, r = m["single"], int(m["r"])
        if kind == "Uniform":
            return cls(r, "Uniform", r, text.strip())
        if kind == "Dense":
            return cls(r, None, 0, text.strip())
        if kind == "Sparse":
            return cls(None, "Uniform", r, text.strip())
        return cls(None, kind, r, text.strip())


@dataclass(frozen=True)
class RankPlan:
    ranks: dict[str, int]
    policy: str
    avg_sparse_rank: float
    memory_bytes: int

    def to_json(self) -> dict:
        return {"policy": self.policy, "ranks": dict(self.ranks),
                "avg_sparse_rank": self.avg_sparse_rank, "memory_bytes": self.memory_bytes}

    @classmethod
    def from_json(cls, d: dict) -> "RankPlan":
        return cls({k: int(v) for k, v in d["ranks"].items()}, d["policy"],
                   float(d["avg_sparse_rank"]), int(d["memory_bytes"]))


def allocate_proportional(scores: Sequence[float], mean_rank: int, caps: Sequence[int]) -> list[int]:
    """Integer ranks proportional to ``scores`` summing to ``mean_rank * len(scores)``.

    Largest-remainder rounding; remainder ties go to the earlier index.
    Entries whose proportional share exceeds their cap are pinned at the cap
    and the rest is redistributed over the others.
    """
    n = len(scores)
    scores = np.asarray(scores, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.int64)
    total = mean_rank * n
    if total > caps.sum():
        raise PlanError(f"mean rank {mean_rank} exceeds what the matrix shapes allow")
    ranks = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    remaining = total
    while True:
        w = np.where(active, scores, 0.0)
        if w.sum() <= 0:
            w = active.astype(np.float64)
        share = remaining * w / w.sum()
        over = active & (share > caps)
        if not over.any():
            break
        ranks[over] = caps[over]
        remaining -= int(caps[over].sum())
        active &= ~over
    base = np.floor(share).astype(np.int64)
    frac = share - base
    left = remaining - int(base[active].sum())
    order = sorted(np.flatnonzero(active), key=lambda i: (-frac[i], i))
    for i in order[:left]:
        base[i] += 1
    ranks[active] = base[active]
    return ranks.tolist()


def _scores(kind: str, entries, stats: Mapping[str, MatrixStats]) -> list[float]:
    vals = []
    for e in entries:
        st = stats.get(e.name)
        if st is None:
            raise PlanError(f"missing stats for {e.name}")
        v = st.expert_frequency if kind == "Frequency" else st.kurtosis
        if v is None:
            raise PlanError(f"missing {kind.lower()} score for {e.name}")
        vals.append(float(v))
    vals = np.asarray(vals)
    if kind == "Kurtosis" and vals.size:
        lo, hi = vals.min(), vals.max()
        vals = np.ones_like(vals) if hi == lo else (vals - lo) / (hi - lo)
    return vals.tolist()


def plan_ranks(manifest: ModelManifest, stats: Mapping[str, MatrixStats] | None, policy,
               bits: int = 3, group_size: int = 64, comp_bits: int = 3) -> RankPlan:
    spec = policy if isinstance(policy, PolicySpec) else PolicySpec.parse(policy)
    stats = stats or {}
    entries = list(manifest.matrices())
    ranks = {e.name: 0 for e in entries}
    experts = [e for e in entries if not e.is_dense]
    # fixed ranks are clipped to full rank for small matrices
    if spec.dense_rank is not None:
        for e in entries:
            if e.is_dense:
                ranks[e.name] = min(spec.dense_rank, e.rows, e.cols)
    if spec.sparse_kind == "Uniform":
        for e in experts:
            ranks[e.name] = min(spec.sparse_rank, e.rows, e.cols)
    elif spec.sparse_kind is not None and experts:
        scores = _scores(spec.sparse_kind, experts, stats)
        caps = [min(e.rows, e.cols) for e in experts]
        for e, r in zip(experts, allocate_proportional(scores, spec.sparse_rank, caps)):
            ranks[e.name] = r
    avg = float(np.mean([ranks[e.name] for e in experts])) if experts else 0.0
    mem = quantized_memory_bytes(manifest, ranks, bits, group_size, comp_bits)
    return RankPlan(ranks, spec.text, avg, mem)


DEFAULT_CANDIDATES = ("Uniform-{r}", "Dense-{r}", "Sparse-{r}", "Frequency-{r}", "Kurtosis-{r}")


def plan_under_memory(manifest: ModelManifest, stats, budget_bytes: int,
                      candidates: Sequence[str] = DEFAULT_CANDIDATES,
                      bits: int = 3, group_size: int = 64, comp_bits: int = 3) -> list[RankPlan]:
    """Largest-rank plan within ``budget_bytes`` for each candidate template.

    Templates contain ``{r}`` for the searched rank, e.g. ``"Dense-512+Kurtosis-{r}"``.
    Infeasible templates are dropped; if none fits, raises PlanError.
    """
    hi_rank = max((min(e.rows, e.cols) for e in manifest.matrices()), default=0)

    def attempt(template: str, r: int) -> RankPlan | None:
        try:
            plan = plan_ranks(manifest, stats, template.format(r=r), bits, group_size, comp_bits)
        except PlanError:
            return None
        return plan if plan.memory_bytes <= budget_bytes else None

    plans = []
    for template in candidates:
        best = attempt(template, 0)
        if best is None:
            continue
        lo, hi = 0, hi_rank
        while lo < hi:
            mid = (lo + hi + 1) // 2
            plan = attempt(template, mid)
            if plan is None:
                hi = mid - 1
            else:
                lo, best = mid, plan
        plans.append(best)
    if not plans:
        raise PlanError(f"no candidate policy fits within {budget_bytes} bytes")
    return plans
