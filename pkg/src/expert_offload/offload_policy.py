"""Prefetch/eviction decision rules and the policies built on them.

Every policy implements the same callback contract, driven by the
simulator: batch/iteration start, per-layer gate observation, prefetch
planning for a target layer, iteration end, and an eviction rank for the
cache. Policies only see data that has already been observed; the offline
oracles live in ``oracles``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cache_sim import P_FLOOR, CacheEntry, TransferJob, guided_rank
from .map_store import ExpertMapStore, StoredContext
from .matcher import match_initial, match_layer
from .trace_model import IterationRecord, ModelShape, top_k_indices

SELECTION_TOL = 1e-12


# --------------------------------------------------------------------------
# closed-form rules


def selection_threshold(score: float) -> float:
    """delta = clip(1 - score, 0, 1); the score is clamped to [-1, 1] first."""
    score = float(score)
    if math.isnan(score):
        raise ValueError("similarity score is NaN")
    score = min(1.0, max(-1.0, score))
    return max(0.0, min(1.0 - score, 1.0))


def select_prefetch_set(guidance, delta: float, k: int) -> list[int]:
    """Greedy pick in descending probability (ties to the lower index) until
    the cumulative probability reaches ``delta`` and at least ``k`` experts
    are chosen. Returned in selection order."""
    g = np.asarray(guidance, dtype=np.float64).ravel()
    if g.size == 0 or np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("guidance must be a non-empty, non-negative vector")
    total = g.sum()
    if total <= 0:
        raise ValueError("guidance sums to zero")
    if not 1 <= k <= g.size:
        raise ValueError(f"K={k} outside [1, {g.size}]")
    g = g / total
    order = np.argsort(-g, kind="stable")
    chosen: list[int] = []
    cum = 0.0
    for j in order:
        if len(chosen) >= k and cum >= delta - SELECTION_TOL:
            break
        chosen.append(int(j))
        cum += g[j]
    return chosen


def prefetch_priority(p: float, target_layer: int, current_layer: int) -> float:
    if target_layer <= current_layer:
        raise ValueError(f"target layer {target_layer} is not ahead of layer {current_layer}")
    if p < 0:
        raise ValueError("probability must be >= 0")
    return float(p) / (target_layer - current_layer)


def eviction_priority(p: float, freq: int) -> float:
    if freq < 1:
        raise ValueError("freq must be >= 1")
    return 1.0 / (max(float(p), P_FLOOR) * freq)


# --------------------------------------------------------------------------
# policy contract


@dataclass(frozen=True)
class PolicyDecision:
    target_layer: int
    experts: tuple[int, ...]
    priorities: tuple[float, ...]
    probs: tuple[float, ...]
    issue_time: float
    ready_time: float
    guidance: np.ndarray | None = None
    scores: tuple[float, ...] = ()

    @property
    def prefetch_set(self) -> set[tuple[int, int]]:
        return {(self.target_layer, j) for j in self.experts}


@dataclass
class BatchMember:
    request_id: str
    embedding: np.ndarray


class Policy:
    """Base: demand loading only, LRU eviction."""

    name = "no_prefetch"
    demand_only = True
    uses_store = False

    def __init__(self):
        self.shape: ModelShape | None = None
        self.d = 1
        self.decision_latency_ms = 0.0
        self.store: ExpertMapStore | None = None
        self.match_scores: list[float] = []

    def bind(self, shape: ModelShape, prefetch_distance: int, match_latency_ms: float = 0.0, store=None):
        self.shape = shape
        self.d = prefetch_distance
        self.store = store
        if self.uses_store:
            self.decision_latency_ms = match_latency_ms
        return self

    def on_request_start(self, request_id: str, embedding, time: float) -> None:
        pass

    def on_iteration_start(self, members: Sequence[BatchMember], iteration: int, time: float) -> list[PolicyDecision]:
        return []

    def on_layer_observed(self, layer: int, rows: dict[str, np.ndarray], time: float) -> None:
        pass

    def plan_prefetch(self, target_layer: int, time: float) -> PolicyDecision | None:
        return None

    def on_iteration_end(self, completed: Sequence[tuple[BatchMember, IterationRecord]], time: float) -> None:
        pass

    #: "lru", "lfu", "guided" (1 / (p * freq)) or a callable (key, entry, now) -> rank
    eviction_rank = "lru"

    admit_prefetch: Callable | None = None

    # shared helper
    def _decision(self, target, picks: dict[int, tuple[float, float]], time, guidance=None, scores=()):
        if not picks:
            return None
        experts = tuple(sorted(picks))
        return PolicyDecision(
            target_layer=target,
            experts=experts,
            priorities=tuple(picks[j][0] for j in experts),
            probs=tuple(picks[j][1] for j in experts),
            issue_time=time,
            ready_time=time + self.decision_latency_ms,
            guidance=guidance,
            scores=tuple(scores),
        )


def _merge(picks: dict, j: int, priority: float, p: float) -> None:
    old = picks.get(j)
    if old is None or priority > old[0]:
        picks[j] = (priority, p)


def pressure_admission(job: TransferJob, victim_key, victim_entry: CacheEntry, now: float) -> bool:
    """A prefetch into a full cache goes ahead only if the victim ranks above
    the incoming expert would on arrival (freq 1)."""
    return guided_rank(victim_key, victim_entry, now) > eviction_priority(job.p, 1)


# --------------------------------------------------------------------------
# fine-grained map-guided policy


class FMoEPolicy(Policy):
    """Semantic search for the first d layers, trajectory search for each
    later layer, similarity-driven selection threshold, guided eviction."""

    name = "fmoe"
    demand_only = False
    uses_store = True

    def __init__(self, semantic: bool = True, dynamic_threshold: bool = True, name: str | None = None):
        super().__init__()
        self.semantic = semantic
        self.dynamic_threshold = dynamic_threshold
        if name:
            self.name = name
        self._snapshot = None
        self._prefix: dict[str, list[np.ndarray]] = {}

    eviction_rank = "guided"

    def admit_prefetch(self, job, victim_key, victim_entry, now):
        return pressure_admission(job, victim_key, victim_entry, now)

    def _delta(self, res) -> float:
        if res.matched_context_id is None or not self.dynamic_threshold:
            return 0.0
        return selection_threshold(res.score)

    def _decide(self, target: int, results, l_now: int, time: float):
        picks: dict[int, tuple[float, float]] = {}
        K = self.shape.top_k
        scores = []
        for res in results:
            if res.matched_context_id is not None:
                self.match_scores.append(res.score)
                scores.append(res.score)
            for j in select_prefetch_set(res.guidance, self._delta(res), K):
                p = float(res.guidance[j])
                _merge(picks, j, prefetch_priority(p, target, l_now), p)
        guidance = np.max([r.guidance for r in results], axis=0)
        return self._decision(target, picks, time, guidance, scores)

    def on_iteration_start(self, members, iteration, time):
        if self.store is None:
            raise RuntimeError("fmoe policy needs an expert map store")
        self._snapshot = self.store.snapshot()
        self._prefix = {m.request_id: [] for m in members}
        if not self.semantic:
            return []
        per_layer: dict[int, list] = {layer: [] for layer in range(self.d)}
        for m in members:
            for res in match_initial(m.embedding, self._snapshot, self.d):
                per_layer[res.layer].append(res)
        out = []
        for layer in range(self.d):
            dec = self._decide(layer, per_layer[layer], -1, time)
            if dec is not None:
                out.append(dec)
        return out

    def on_layer_observed(self, layer, rows, time):
        for rid, row in rows.items():
            self._prefix[rid].append(np.asarray(row, dtype=np.float64))

    def plan_prefetch(self, target_layer, time):
        l_now = target_layer - self.d
        results = [match_layer(np.stack(prefix), self._snapshot, self.d) for prefix in self._prefix.values()]
        if not results:
            return None
        return self._decide(target_layer, results, l_now, time)

    def on_iteration_end(self, completed, time):
        ctxs = [StoredContext(m.embedding, rec.map, (m.request_id, rec.index)) for m, rec in completed]
        if ctxs:
            self.store.insert_batch(ctxs)


# --------------------------------------------------------------------------
# baselines


class SpeculativeTopKPolicy(Policy):
    """Guidance for layer l+d is the gate distribution just observed at layer
    l; the top-K of it are prefetched."""

    demand_only = False

    def __init__(self, eviction: str = "lru", prefetch: bool = True, name: str | None = None):
        super().__init__()
        if eviction not in ("lru", "lfu", "guided"):
            raise ValueError(f"unknown eviction rule {eviction!r}")
        self.eviction = eviction
        self.eviction_rank = eviction
        self.prefetch = prefetch
        self.demand_only = not prefetch
        self.name = name or eviction
        self._rows: dict[str, dict[int, np.ndarray]] = {}

    def on_iteration_start(self, members, iteration, time):
        self._rows = {m.request_id: {} for m in members}
        return []

    def on_layer_observed(self, layer, rows, time):
        for rid, row in rows.items():
            self._rows[rid][layer] = np.asarray(row, dtype=np.float64)

    def plan_prefetch(self, target_layer, time):
        if not self.prefetch:
            return None
        source = target_layer - self.d
        picks: dict[int, tuple[float, float]] = {}
        rows = []
        for per_layer in self._rows.values():
            row = per_layer[source]
            rows.append(row)
            for j in top_k_indices(row, self.shape.top_k):
                _merge(picks, j, prefetch_priority(row[j], target_layer, source), float(row[j]))
        guidance = np.max(rows, axis=0) if rows else None
        return self._decision(target_layer, picks, time, guidance)


class RequestHitCountPolicy(Policy):
    """Request-level activation counts as guidance (uniform before the first
    iteration completes), top-K selection, LFU eviction."""

    name = "hit_count"
    demand_only = False

    def __init__(self):
        super().__init__()
        self._counts: dict[str, np.ndarray] = {}
        self._active: list[str] = []

    eviction_rank = "lfu"

    def on_request_start(self, request_id, embedding, time):
        self._counts[request_id] = np.zeros((self.shape.num_layers, self.shape.experts_per_layer))

    def _guidance(self, rid: str, layer: int) -> np.ndarray:
        row = self._counts[rid][layer]
        total = row.sum()
        if total == 0:
            return np.full(row.shape, 1.0 / row.size)
        return row / total

    def _plan(self, target, l_now, time):
        picks: dict[int, tuple[float, float]] = {}
        rows = []
        for rid in self._active:
            g = self._guidance(rid, target)
            rows.append(g)
            for j in top_k_indices(g, self.shape.top_k):
                _merge(picks, j, prefetch_priority(g[j], target, l_now), float(g[j]))
        guidance = np.max(rows, axis=0) if rows else None
        return self._decision(target, picks, time, guidance)

    def on_iteration_start(self, members, iteration, time):
        self._active = [m.request_id for m in members]
        out = []
        for layer in range(self.d):
            dec = self._plan(layer, -1, time)
            if dec is not None:
                out.append(dec)
        return out

    def plan_prefetch(self, target_layer, time):
        return self._plan(target_layer, target_layer - self.d, time)

    def on_iteration_end(self, completed, time):
        for m, rec in completed:
            counts = self._counts[m.request_id]
            for layer, experts in enumerate(rec.activated):
                counts[layer, list(experts)] += 1.0


class NoPrefetchPolicy(Policy):
    name = "no_prefetch"


class DemandLFUPolicy(Policy):
    name = "demand_lfu"
    eviction_rank = "lfu"


POLICY_FACTORIES: dict[str, Callable[[], Policy]] = {
    "fmoe": FMoEPolicy,
    "fmoe_static": lambda: FMoEPolicy(dynamic_threshold=False, name="fmoe_static"),
    "fmoe_traj": lambda: FMoEPolicy(semantic=False, dynamic_threshold=False, name="fmoe_traj"),
    "no_prefetch": NoPrefetchPolicy,
    "lru": lambda: SpeculativeTopKPolicy("lru", name="lru"),
    "lfu": lambda: SpeculativeTopKPolicy("lfu", name="lfu"),
    "speculative": lambda: SpeculativeTopKPolicy("guided", name="speculative"),
    "hit_count": RequestHitCountPolicy,
    "demand_lru": lambda: SpeculativeTopKPolicy("lru", prefetch=False, name="demand_lru"),
    "demand_lfu": DemandLFUPolicy,
}
POLICY_ALIASES = {"request_hit_count": "hit_count"}
ORACLE_NAMES = ("belady", "exact")
DEMAND_ONLY_POLICIES = ("no_prefetch", "demand_lru", "demand_lfu")


def make_policy(name: str) -> Policy:
    key = POLICY_ALIASES.get(name, name)
    if key not in POLICY_FACTORIES:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICY_FACTORIES)}")
    return POLICY_FACTORIES[key]()


def baseline_policies() -> dict[str, Policy]:
    return {
        "no_prefetch": make_policy("no_prefetch"),
        "lru": make_policy("lru"),
        "lfu": make_policy("lfu"),
        "speculative": make_policy("speculative"),
        "request_hit_count": make_policy("hit_count"),
    }
