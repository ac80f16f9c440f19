"""Entropy analysis, correlation helpers, and the per-run serving report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .trace_model import ExpertMap, IterationRecord, Workload


def shannon_entropy(dist) -> float:
    """Entropy in nats; 0 * ln 0 is taken as 0 and the input is renormalized."""
    p = np.asarray(dist, dtype=np.float64).ravel()
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("distribution has negative or non-finite entries")
    total = p.sum()
    if total <= 0:
        raise ValueError("distribution sums to zero")
    p = p / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _row_entropies(dist: np.ndarray) -> np.ndarray:
    p = np.asarray(dist, dtype=np.float64)
    p = p / p.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def coarse_aggregate(iterations: Sequence[IterationRecord], upto: int | None = None) -> ExpertMap:
    """Request-level pattern: top-K activation counts over the first ``upto``
    iterations, normalized per layer."""
    if not iterations:
        raise ValueError("cannot aggregate an empty iteration sequence")
    if upto is None:
        upto = len(iterations)
    if upto < 1:
        raise ValueError("upto must be >= 1")
    L, J = iterations[0].map.distributions.shape
    counts = np.zeros((L, J))
    for it in iterations[:upto]:
        for layer, experts in enumerate(it.activated):
            counts[layer, list(experts)] += 1.0
    return ExpertMap(counts / counts.sum(axis=1, keepdims=True))


def activation_counts(workload: Workload) -> np.ndarray:
    """Raw L x J activation counts over a whole workload (heatmap data)."""
    shape = workload.shape
    counts = np.zeros((shape.num_layers, shape.experts_per_layer), dtype=np.int64)
    for req in workload:
        for it in req.iterations:
            for layer, experts in enumerate(it.activated):
                counts[layer, list(experts)] += 1
    return counts


@dataclass(frozen=True, eq=False)
class EntropyProfile:
    per_layer_mean_entropy: np.ndarray
    granularity: str

    def __post_init__(self):
        if self.granularity not in ("fine", "coarse"):
            raise ValueError(f"granularity must be 'fine' or 'coarse', got {self.granularity!r}")
        arr = np.asarray(self.per_layer_mean_entropy, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "per_layer_mean_entropy", arr)

    @property
    def mean(self) -> float:
        return float(self.per_layer_mean_entropy.mean())


def entropy_profile(
    workload: Workload,
    granularity: str,
    upto_iterations: int | None = None,
    coarse_mode: str = "mass",
) -> EntropyProfile:
    """Mean entropy per layer at iteration (fine) or request (coarse) level.

    Both granularities look at the same first ``upto_iterations`` iterations
    of every request and average per request first. ``coarse_mode="mass"``
    aggregates the gate distributions themselves, which makes coarse >= fine
    hold layer by layer; ``"counts"`` aggregates top-K activation counts.
    """
    if granularity not in ("fine", "coarse"):
        raise ValueError(f"unknown granularity {granularity!r}")
    if coarse_mode not in ("mass", "counts"):
        raise ValueError(f"unknown coarse_mode {coarse_mode!r}")
    if upto_iterations is not None and upto_iterations < 1:
        raise ValueError("upto_iterations must be >= 1")
    per_request = []
    for req in workload.requests:
        iters = req.iterations[:upto_iterations] if upto_iterations else req.iterations
        dists = np.stack([it.map.distributions for it in iters]).astype(np.float64)
        if granularity == "fine":
            per_request.append(_row_entropies(dists).mean(axis=0))
        elif coarse_mode == "mass":
            dists = dists / dists.sum(axis=-1, keepdims=True)
            per_request.append(_row_entropies(dists.mean(axis=0)))
        else:
            per_request.append(_row_entropies(coarse_aggregate(iters).distributions))
    if not per_request:
        raise ValueError("workload has no requests")
    return EntropyProfile(np.mean(per_request, axis=0), granularity)


class UndefinedCorrelationError(ValueError):
    pass


def pearson_corr(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined: a sequence has zero variance")
    r = float(dx @ dy) / (sx * sy)
    return max(-1.0, min(1.0, r))


def spearman_corr(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation (average ranks for ties); used for sweep trend tests."""
    return pearson_corr(stats.rankdata(xs), stats.rankdata(ys))


# --------------------------------------------------------------------------
# run report

REPORT_COLUMNS = (
    "policy",
    "hit_rate",
    "misses",
    "total_stall_ms",
    "ttft_proxy_ms",
    "mean_tpot_proxy_ms",
    "peak_resident_experts",
    "prefetches_wasted",
)
EXTENDED_COLUMNS = (
    "total_activations",
    "hits",
    "prefetches_issued",
    "transfers",
    "prefetch_transfers",
    "load_time_ms",
    "mean_match_score",
)


@dataclass
class RunReport:
    policy_name: str
    total_activations: int = 0
    hits: int = 0
    misses: int = 0
    total_stall_ms: float = 0.0
    ttft_proxy_ms: float = 0.0
    mean_tpot_proxy_ms: float = 0.0
    peak_resident_experts: int = 0
    prefetches_issued: int = 0
    prefetches_wasted: int = 0
    transfers: int = 0
    prefetch_transfers: int = 0
    load_time_ms: float = 0.0
    mean_match_score: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def expert_hit_rate(self) -> float:
        return self.hits / self.total_activations if self.total_activations else 0.0

    @property
    def on_demand_latency_ms(self) -> float:
        """T_e x misses: the objective being minimized."""
        return self.load_time_ms * self.misses

    @property
    def loading_cost_ms(self) -> float:
        """T_e x every transfer started, demand or prefetch."""
        return self.load_time_ms * self.transfers

    def check(self) -> None:
        assert self.hits + self.misses == self.total_activations, "hits + misses != activations"
        assert 0.0 <= self.expert_hit_rate <= 1.0
        assert self.total_stall_ms >= 0.0

    def row(self, extended: bool = False) -> dict:
        d = {
            "policy": self.policy_name,
            "hit_rate": self.expert_hit_rate,
            "misses": self.misses,
            "total_stall_ms": self.total_stall_ms,
            "ttft_proxy_ms": self.ttft_proxy_ms,
            "mean_tpot_proxy_ms": self.mean_tpot_proxy_ms,
            "peak_resident_experts": self.peak_resident_experts,
            "prefetches_wasted": self.prefetches_wasted,
        }
        if extended:
            for name in EXTENDED_COLUMNS:
                d[name] = getattr(self, name)
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expert_hit_rate"] = self.expert_hit_rate
        return d


def reports_to_csv(reports: Iterable[RunReport], extended: bool = False) -> str:
    cols = REPORT_COLUMNS + (EXTENDED_COLUMNS if extended else ())
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow({k: _fmt(v) for k, v in rep.row(extended).items()})
    return buf.getvalue()


def reports_to_json(reports: Iterable[RunReport], extended: bool = False) -> str:
    return json.dumps([rep.row(extended) for rep in reports], indent=1, sort_keys=False)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
