"""Run orchestration: feeds a workload through policy + matcher + cache on
the virtual clock, compares policies, sweeps one configuration dimension,
and replays event logs."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .cache_sim import ExpertCache, LatencyModel
from .map_store import ExpertMapStore, StoreConfig, build_store
from .metrics import RunReport, UndefinedCorrelationError, spearman_corr
from .offload_policy import ORACLE_NAMES, BatchMember, Policy, PolicyDecision, make_policy
from .oracles import belady_demand_oracle, brute_force_offline_optimal
from .trace_model import ModelShape, RequestTrace, Workload, validate_trace

SWEEP_DIMENSIONS = ("cache_capacity", "store_capacity", "prefetch_distance", "batch_size")


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    shape: ModelShape
    policy: str = "fmoe"
    latency: LatencyModel | None = None
    cache_capacity: int | None = None  # experts; None = all offloadable experts
    store_capacity: int = 1024
    prefetch_distance: int = 3
    batch_size: int = 1
    warm_store: str | None = None
    cold_store: bool = False
    seed: int = 0
    freq_scope: str = "request"
    abort_inflight: bool = False

    def __post_init__(self):
        if not 1 <= self.prefetch_distance < self.shape.num_layers:
            raise ValueError(f"prefetch distance must be in [1, {self.shape.num_layers})")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.cache_capacity is not None and self.cache_capacity < 0:
            raise ValueError("cache capacity must be >= 0")
        if self.freq_scope not in ("request", "global"):
            raise ValueError("freq_scope must be 'request' or 'global'")
        if self.latency is None:
            object.__setattr__(self, "latency", LatencyModel.for_shape(self.shape))

    @property
    def capacity_experts(self) -> int:
        return self.shape.total_experts if self.cache_capacity is None else self.cache_capacity

    @property
    def store_config(self) -> StoreConfig:
        return StoreConfig(self.store_capacity, self.prefetch_distance, self.shape)

    def to_dict(self) -> dict:
        return {
            "shape": self.shape.to_dict(),
            "policy": self.policy,
            "load_time_ms": self.latency.load_time_ms,
            "per_layer_compute_ms": self.latency.per_layer_compute_ms,
            "match_latency_ms": self.latency.match_latency_ms,
            "cache_capacity": self.capacity_experts,
            "store_capacity": self.store_capacity,
            "prefetch_distance": self.prefetch_distance,
            "batch_size": self.batch_size,
            "cold_store": self.cold_store,
            "seed": self.seed,
            "freq_scope": self.freq_scope,
            "abort_inflight": self.abort_inflight,
        }


@dataclass
class SimResult:
    report: RunReport
    events: list = field(default_factory=list)
    request_latencies: dict = field(default_factory=dict)


def cache_capacity_for_gb(gb: float, shape: ModelShape) -> int:
    return int(gb * 1e9 // shape.expert_size_bytes)


def _batches(requests, size):
    return [requests[i : i + size] for i in range(0, len(requests), size)]


def prepare_store(workload: Workload, config: RunConfig, store: ExpertMapStore | None) -> ExpertMapStore:
    if store is not None and not config.cold_store:
        return store.copy()
    if config.warm_store and not config.cold_store:
        return ExpertMapStore.load(config.warm_store, capacity=config.store_capacity, prefetch_distance=config.prefetch_distance)
    return ExpertMapStore(config.store_config)


def run_simulation(workload: Workload, config: RunConfig, store: ExpertMapStore | None = None, log_events: bool = True) -> SimResult:
    """Serve every request of ``workload`` under ``config``.

    Requests are grouped into batches of ``batch_size`` in trace order. A
    batch runs iteration rounds in lockstep; at each layer the cache serves
    the union of the batch's activated experts. ``store`` (copied, never
    mutated) warms the map store unless ``cold_store`` is set.
    """
    if workload.shape != config.shape:
        raise ShapeMismatchError(f"workload shape {workload.shape} != config shape {config.shape}")
    problems = validate_trace(workload, config.shape)
    if problems:
        raise ShapeMismatchError(f"workload fails validation: {problems[0]}")
    if config.policy in ORACLE_NAMES:
        return SimResult(run_oracle(workload, config))

    shape = config.shape
    lat = config.latency
    L, K = shape.num_layers, shape.top_k
    policy = make_policy(config.policy)
    policy.bind(shape, config.prefetch_distance, lat.match_latency_ms, prepare_store(workload, config, store) if policy.uses_store else None)
    events: list = [] if log_events else None
    cache = ExpertCache(
        config.capacity_experts,
        lat.load_time_ms,
        eviction_rank=policy.eviction_rank,
        admit_prefetch=policy.admit_prefetch,
        abort_inflight=config.abort_inflight,
        num_experts=shape.experts_per_layer,
        log=events,
    )

    def emit(**ev):
        if events is not None:
            events.append(ev)

    emit(t=0.0, ev="run", policy=policy.name, load_time_ms=lat.load_time_ms, config=config.to_dict())

    pending: list[PolicyDecision] = []

    def flush(now: float) -> None:
        pending.sort(key=lambda dec: (dec.ready_time, dec.target_layer))
        while pending and pending[0].ready_time <= now:
            dec = pending.pop(0)
            t_enq = max(dec.ready_time, cache.clock)
            if dec.guidance is not None:
                cache.note_guidance(dec.target_layer, dec.guidance)
            for j, pri, p in zip(dec.experts, dec.priorities, dec.probs):
                cache.enqueue_prefetch((dec.target_layer, j), pri, p, t_enq)

    def add(dec: PolicyDecision | None) -> None:
        if dec is None:
            return
        emit(t=dec.issue_time, ev="decision", layer=dec.target_layer, n=len(dec.experts), scores=list(dec.scores))
        pending.append(dec)

    hits = misses = 0
    total_stall = 0.0
    ttft, tpot = [], []
    latencies: dict[str, float] = {}
    t = 0.0
    for batch in _batches(list(workload.requests), config.batch_size):
        t = max(t, max(r.arrival_time for r in batch))
        cache.step_to(t)
        if config.freq_scope == "request":
            cache.reset_frequencies()
        members = {r.request_id: BatchMember(r.request_id, r.embedding) for r in batch}
        for r in batch:
            policy.on_request_start(r.request_id, r.embedding, t)
        rounds = max(r.num_iterations for r in batch)
        for it_idx in range(rounds):
            active = [r for r in batch if it_idx < r.num_iterations]
            round_start = t
            emit(t=t, ev="round_start", iteration=it_idx, requests=[r.request_id for r in active])
            for dec in policy.on_iteration_start([members[r.request_id] for r in active], it_idx, t):
                add(dec)
            for layer in range(L):
                rows = {r.request_id: r.iterations[it_idx].map.distributions[layer] for r in active}
                policy.on_layer_observed(layer, rows, t)
                if layer + policy.d < L:
                    add(policy.plan_prefetch(layer + policy.d, t))
                # stale decisions for layers already served are discarded
                pending[:] = [dec for dec in pending if dec.target_layer >= layer]
                flush(t)
                union = sorted({j for r in active for j in r.iterations[it_idx].activated[layer]})
                results, stall = cache.access_layer(layer, union, t)
                served = {res.key[1]: res.hit for res in results}
                layer_hits = layer_misses = 0
                for r in active:
                    for j in r.iterations[it_idx].activated[layer]:
                        if served[j]:
                            layer_hits += 1
                        else:
                            layer_misses += 1
                hits += layer_hits
                misses += layer_misses
                total_stall += stall
                emit(t=t, ev="layer", layer=layer, hits=layer_hits, misses=layer_misses, stall=stall,
                     missed=[j for j in union if not served[j]])
                t += stall + lat.per_layer_compute_ms
                pending[:] = [dec for dec in pending if dec.target_layer > layer]
                flush(t)
                cache.step_to(t)
            pending.clear()
            policy.on_iteration_end([(members[r.request_id], r.iterations[it_idx]) for r in active], t)
            dur = t - round_start
            (ttft if it_idx == 0 else tpot).append(dur)
            emit(t=t, ev="round_end", iteration=it_idx, duration=dur)
            for r in active:
                if it_idx == r.num_iterations - 1:
                    latencies[r.request_id] = t - r.arrival_time
                    emit(t=t, ev="request_done", request=r.request_id, latency=latencies[r.request_id])
    cache.finish(cache.clock)

    report = RunReport(
        policy_name=policy.name,
        total_activations=hits + misses,
        hits=hits,
        misses=misses,
        total_stall_ms=total_stall,
        ttft_proxy_ms=float(np.mean(ttft)) if ttft else 0.0,
        mean_tpot_proxy_ms=float(np.mean(tpot)) if tpot else 0.0,
        peak_resident_experts=cache.peak_resident,
        prefetches_issued=cache.prefetches_issued,
        prefetches_wasted=cache.prefetches_wasted,
        transfers=cache.transfers,
        prefetch_transfers=cache.prefetch_transfers,
        load_time_ms=lat.load_time_ms,
        mean_match_score=float(np.mean(policy.match_scores)) if policy.match_scores else 0.0,
    )
    assert report.total_activations == sum(r.num_iterations for r in workload) * L * K
    report.check()
    return SimResult(report, events if events is not None else [], latencies)


def run_oracle(workload: Workload, config: RunConfig) -> RunReport:
    cap = config.capacity_experts
    te = config.latency.load_time_ms
    if config.policy == "belady":
        return belady_demand_oracle(workload, cap, te)
    loads = brute_force_offline_optimal(workload, cap, te) / te
    n = workload.total_iterations * config.shape.num_layers * config.shape.top_k
    rep = RunReport("exact", total_activations=n, load_time_ms=te, transfers=int(round(loads)))
    rep.misses = min(n, rep.transfers)
    rep.hits = n - rep.misses
    rep.total_stall_ms = te * rep.transfers
    rep.extra["optimal_loading_ms"] = te * loads
    return rep


def replay(events: list) -> RunReport:
    """Rebuild a RunReport from an event log alone."""
    if not events or events[0].get("ev") != "run":
        raise ValueError("event log must start with a run header")
    head = events[0]
    rep = RunReport(head["policy"], load_time_ms=head["load_time_ms"])
    ttft, tpot, scores = [], [], []
    for ev in events[1:]:
        kind = ev["ev"]
        if kind == "layer":
            rep.hits += ev["hits"]
            rep.misses += ev["misses"]
            rep.total_stall_ms += ev["stall"]
        elif kind == "round_end":
            (ttft if ev["iteration"] == 0 else tpot).append(ev["duration"])
        elif kind == "start":
            rep.transfers += 1
            if ev["kind"] == "prefetch":
                rep.prefetch_transfers += 1
        elif kind == "done":
            rep.peak_resident_experts = max(rep.peak_resident_experts, ev["resident"])
        elif kind == "enqueue":
            rep.prefetches_issued += 1
        elif kind == "evict":
            rep.prefetches_wasted += int(ev["wasted"])
        elif kind == "decision":
            scores.extend(ev["scores"])
    rep.total_activations = rep.hits + rep.misses
    rep.ttft_proxy_ms = float(np.mean(ttft)) if ttft else 0.0
    rep.mean_tpot_proxy_ms = float(np.mean(tpot)) if tpot else 0.0
    rep.mean_match_score = float(np.mean(scores)) if scores else 0.0
    return rep


def events_to_jsonl(events: list) -> str:
    return "".join(json.dumps(ev, sort_keys=True) + "\n" for ev in events)


def split_workload(workload: Workload, train_fraction: float = 0.7, seed: int = 0) -> tuple[Workload, Workload]:
    """Random request-level split into (history, test)."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    ids = [r.request_id for r in workload.requests]
    order = rng.permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train = {ids[i] for i in order[:n_train]}
    return workload.subset([i for i in ids if i in train]), workload.subset([i for i in ids if i not in train])


def warm_store_from(history: Workload, config: RunConfig) -> ExpertMapStore:
    return build_store(history, config.store_config)


def compare_policies(
    workload: Workload,
    config: RunConfig,
    policies,
    store: ExpertMapStore | None = None,
    baseline: str | None = None,
) -> list[RunReport]:
    """One report per policy on the same workload and the same warm store."""
    reports = []
    for name in policies:
        rep = run_simulation(workload, replace(config, policy=name), store=store, log_events=False).report
        reports.append(rep)
    if baseline is not None:
        base = next((r for r in reports if r.policy_name == baseline), None)
        if base is None:
            raise ValueError(f"baseline {baseline!r} not among the compared policies")
        for rep in reports:
            rep.extra["delta_hit_rate"] = rep.expert_hit_rate - base.expert_hit_rate
            if base.total_stall_ms > 0:
                rep.extra["stall_reduction"] = 1.0 - rep.total_stall_ms / base.total_stall_ms
    return reports


@dataclass
class SweepResult:
    dimension: str
    values: list
    reports: dict  # value -> list[RunReport]
    trends: dict  # policy -> Spearman rho of hit rate vs value

    def rows(self) -> list[dict]:
        out = []
        for v in self.values:
            for rep in self.reports[v]:
                row = {self.dimension: v}
                row.update(rep.row(extended=True))
                out.append(row)
        return out


def sweep(
    workload: Workload,
    config: RunConfig,
    dimension: str,
    values,
    policies=("fmoe",),
    history: Workload | None = None,
) -> SweepResult:
    """Vary one dimension. The warm store is rebuilt from ``history`` per
    point, since its capacity and prefetch distance are part of the point."""
    if dimension not in SWEEP_DIMENSIONS:
        raise ValueError(f"unknown sweep dimension {dimension!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    reports = {}
    for v in values:
        cfg = replace(config, **{dimension: v})
        store = warm_store_from(history, cfg) if history is not None else None
        reports[v] = compare_policies(workload, cfg, policies, store=store)
    trends = {}
    if len(values) >= 2:
        for i, name in enumerate(policies):
            ys = [reports[v][i].expert_hit_rate for v in values]
            try:
                trends[reports[values[0]][i].policy_name] = spearman_corr(values, ys)
            except UndefinedCorrelationError:
                trends[reports[values[0]][i].policy_name] = float("nan")
    return SweepResult(dimension, values, reports, trends)


def latency_cdf(latencies, points: int = 20) -> list[tuple[float, float]]:
    """(latency_ms, cumulative fraction) pairs of the empirical CDF."""
    vals = np.sort(np.asarray(list(latencies), dtype=np.float64))
    if vals.size == 0:
        return []
    qs = np.linspace(0, 1, points + 1)[1:]
    return [(float(np.quantile(vals, q, method="inverted_cdf")), float(q)) for q in qs]
