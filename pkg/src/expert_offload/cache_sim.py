"""GPU expert cache plus a single CPU->GPU transfer lane on a virtual clock.

Transfers are serialized and each takes exactly ``load_time_ms``. On-demand
loads jump ahead of every queued prefetch; the transfer already in flight is
allowed to finish (or is aborted and requeued with ``abort_inflight``).
Residency changes only at transfer completion, where the victim with the
highest eviction rank is dropped if the cache is over capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .trace_model import MIXTRAL_8X7B, ModelShape

ON_DEMAND = "on_demand"
PREFETCH = "prefetch"
TIME_EPS = 1e-9
P_FLOOR = 1e-6

Key = tuple[int, int]  # (layer, expert)


@dataclass(frozen=True)
class LatencyModel:
    channel_bandwidth_bytes_per_ms: float = 32e9 / 1e3
    expert_size_bytes: int = MIXTRAL_8X7B.expert_size_bytes
    per_layer_compute_ms: float = 2.0
    match_latency_ms: float = 0.5
    load_time_override_ms: float | None = None

    def __post_init__(self):
        if self.channel_bandwidth_bytes_per_ms <= 0 or self.expert_size_bytes < 1:
            raise ValueError("bandwidth and expert size must be positive")
        if self.per_layer_compute_ms <= 0:
            raise ValueError("per_layer_compute_ms must be positive")
        if self.match_latency_ms < 0:
            raise ValueError("match_latency_ms must be >= 0")

    @property
    def load_time_ms(self) -> float:
        if self.load_time_override_ms is not None:
            return float(self.load_time_override_ms)
        return self.expert_size_bytes / self.channel_bandwidth_bytes_per_ms

    @classmethod
    def for_shape(
        cls,
        shape: ModelShape,
        bandwidth_gbps: float = 32.0,
        per_layer_compute_ms: float = 2.0,
        match_latency_ms: float = 0.5,
    ) -> "LatencyModel":
        return cls(
            channel_bandwidth_bytes_per_ms=bandwidth_gbps * 1e9 / 1e3,
            expert_size_bytes=shape.expert_size_bytes,
            per_layer_compute_ms=per_layer_compute_ms,
            match_latency_ms=match_latency_ms,
            load_time_override_ms=shape.expert_load_time_ms,
        )


@dataclass
class CacheEntry:
    freq: int
    inserted_at: int
    last_used: int
    last_guidance_p: float
    prefetched: bool = False
    used: bool = False


@dataclass
class TransferJob:
    kind: str
    target: Key
    priority: float
    enqueue_time: float
    p: float = 0.0
    start_time: float | None = None
    completion_time: float | None = None


@dataclass(frozen=True)
class AccessResult:
    key: Key
    hit: bool
    stall_ms: float
    late_prefetch: bool = False


def lru_rank(key: Key, entry: CacheEntry, now: float) -> float:
    return -float(entry.last_used)


def lfu_rank(key: Key, entry: CacheEntry, now: float) -> float:
    return 1.0 / entry.freq


def guided_rank(key: Key, entry: CacheEntry, now: float) -> float:
    """1 / (max(p, eps) * freq) with p the latest guidance probability."""
    return 1.0 / (max(entry.last_guidance_p, P_FLOOR) * entry.freq)


RANKS = {"lru": lru_rank, "lfu": lfu_rank, "guided": guided_rank}


class ExpertCache:
    """Resident set + transfer channel.

    ``eviction_rank`` is one of "lru", "lfu", "guided" or a callable
    ``(key, entry, now) -> float``: larger is evicted first; ties go to the
    least recently inserted entry. ``admit_prefetch(job, victim_key,
    victim_entry, now)`` may veto a prefetch that would need an eviction.
    """

    def __init__(
        self,
        capacity: int,
        load_time_ms: float,
        eviction_rank: str | Callable[[Key, CacheEntry, float], float] = "lru",
        admit_prefetch: Callable | None = None,
        abort_inflight: bool = False,
        num_experts: int | None = None,
        log: list | None = None,
    ):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        if load_time_ms <= 0:
            raise ValueError("load time must be positive")
        self.capacity = int(capacity)
        self.load_time_ms = float(load_time_ms)
        self.eviction_rank = eviction_rank
        self.admit_prefetch = admit_prefetch
        self.abort_inflight = abort_inflight
        self.num_experts = num_experts
        self.log = log
        self.clock = 0.0
        self.resident: dict[Key, CacheEntry] = {}
        self.in_flight: TransferJob | None = None
        self.queue: dict[Key, TransferJob] = {}
        self._demand: list[TransferJob] = []
        self.paused = False
        self.guidance: dict[int, np.ndarray] = {}
        self._seq = 0
        # counters
        self.transfers = 0
        self.prefetch_transfers = 0
        self.prefetches_issued = 0
        self.prefetches_wasted = 0
        self.evictions = 0
        self.peak_resident = 0

    # -- helpers ------------------------------------------------------------

    def _tick(self) -> int:
        self._seq += 1
        return self._seq

    def _emit(self, **ev):
        if self.log is not None:
            self.log.append(ev)

    @property
    def idle(self) -> bool:
        return self.in_flight is None

    def is_resident(self, key: Key) -> bool:
        return key in self.resident

    def note_guidance(self, layer: int, probs) -> None:
        """Latest searched distribution for ``layer``; refreshes the guidance
        probability held by resident experts of that layer."""
        probs = np.asarray(probs, dtype=np.float64)
        self.guidance[layer] = probs
        for (lay, j), entry in self.resident.items():
            if lay == layer:
                entry.last_guidance_p = float(probs[j])

    def _guidance_p(self, key: Key) -> float:
        g = self.guidance.get(key[0])
        if g is not None:
            return float(g[key[1]])
        return 1.0 / self.num_experts if self.num_experts else 1.0

    def reset_frequencies(self) -> None:
        for entry in self.resident.values():
            entry.freq = 1

    def pick_victim(self, exclude: Key | None = None, now: float | None = None) -> Key | None:
        now = self.clock if now is None else now
        rank = self.eviction_rank
        fn = RANKS.get(rank) if isinstance(rank, str) else rank
        best_key = None
        best_rank = -math.inf
        best_ins = 0
        # explicit loops: this is the simulator's hottest path
        if rank == "guided":
            for key, e in self.resident.items():
                r = 1.0 / ((e.last_guidance_p if e.last_guidance_p > P_FLOOR else P_FLOOR) * e.freq)
                if (r > best_rank or (r == best_rank and e.inserted_at < best_ins)) and key != exclude:
                    best_key, best_rank, best_ins = key, r, e.inserted_at
        else:
            for key, e in self.resident.items():
                r = fn(key, e, now)
                if (r > best_rank or (r == best_rank and e.inserted_at < best_ins)) and key != exclude:
                    best_key, best_rank, best_ins = key, r, e.inserted_at
        return best_key

    def rank_of(self, key: Key, now: float | None = None) -> float:
        entry = self.resident[key]
        return RANKS[self.eviction_rank](key, entry, now) if isinstance(self.eviction_rank, str) else self.eviction_rank(key, entry, now)

    # -- channel ------------------------------------------------------------

    def _start(self, job: TransferJob, t: float) -> None:
        job.start_time = t
        job.completion_time = t + self.load_time_ms
        self.in_flight = job
        self.transfers += 1
        if job.kind == PREFETCH:
            self.prefetch_transfers += 1
        self._emit(t=t, ev="start", kind=job.kind, layer=job.target[0], expert=job.target[1])

    def _start_next(self, t: float) -> None:
        if self.in_flight is not None:
            return
        if self._demand:
            self._start(self._demand.pop(0), t)
            return
        if self.paused:
            return
        while self.queue:
            job = min(self.queue.values(), key=lambda j: (-j.priority, j.target))
            del self.queue[job.target]
            if job.target in self.resident:
                self._emit(t=t, ev="drop", reason="resident", layer=job.target[0], expert=job.target[1])
                continue
            if self.capacity == 0:
                self._emit(t=t, ev="drop", reason="no_capacity", layer=job.target[0], expert=job.target[1])
                continue
            if len(self.resident) >= self.capacity and self.admit_prefetch is not None:
                victim = self.pick_victim(now=t)
                if victim is not None and not self.admit_prefetch(job, victim, self.resident[victim], t):
                    self._emit(t=t, ev="drop", reason="rejected", layer=job.target[0], expert=job.target[1])
                    continue
            self._start(job, t)
            return

    def _complete(self) -> None:
        job = self.in_flight
        t = job.completion_time
        self.in_flight = None
        key = job.target
        if self.capacity > 0:
            seq = self._tick()
            p = job.p if job.kind == PREFETCH else self._guidance_p(key)
            self.resident[key] = CacheEntry(
                freq=1, inserted_at=seq, last_used=seq, last_guidance_p=p, prefetched=job.kind == PREFETCH
            )
            while len(self.resident) > self.capacity:
                victim = self.pick_victim(exclude=key, now=t)
                self._evict(victim, t)
            self.peak_resident = max(self.peak_resident, len(self.resident))
        self._emit(t=t, ev="done", kind=job.kind, layer=key[0], expert=key[1], resident=len(self.resident))

    def _evict(self, key: Key, t: float) -> None:
        entry = self.resident.pop(key)
        wasted = entry.prefetched and not entry.used
        self.evictions += 1
        if wasted:
            self.prefetches_wasted += 1
        self._emit(t=t, ev="evict", layer=key[0], expert=key[1], wasted=wasted)

    def step_to(self, time: float) -> list[TransferJob]:
        """Advance the clock, completing transfers in time order."""
        if time < self.clock - TIME_EPS:
            raise ValueError(f"time regression: {time} < clock {self.clock}")
        done = []
        while self.in_flight is not None and self.in_flight.completion_time <= time + TIME_EPS:
            job = self.in_flight
            self.clock = max(self.clock, job.completion_time)
            self._complete()
            done.append(job)
            self._start_next(job.completion_time)
        self.clock = max(self.clock, time)
        return done

    def enqueue_prefetch(self, target: Key, priority: float, p: float, now: float) -> bool:
        """Queue a prefetch. Resident or in-flight targets are dropped;
        duplicates are coalesced keeping the higher priority."""
        self.step_to(now)
        if target in self.resident:
            return False
        if self.in_flight is not None and self.in_flight.target == target:
            return False
        if any(j.target == target for j in self._demand):
            return False
        existing = self.queue.get(target)
        if existing is not None:
            if priority > existing.priority:
                existing.priority = priority
                existing.p = p
            return False
        self.queue[target] = TransferJob(PREFETCH, target, priority, now, p)
        self.prefetches_issued += 1
        self._emit(t=now, ev="enqueue", layer=target[0], expert=target[1], priority=priority)
        self._start_next(now)
        return True

    def access(self, key: Key, now: float) -> AccessResult:
        """Serve one activated expert at ``now``."""
        self.step_to(now)
        entry = self.resident.get(key)
        if entry is not None:
            entry.freq += 1
            entry.used = True
            entry.last_used = self._tick()
            return AccessResult(key, True, 0.0)
        late = False
        if self.in_flight is not None and self.in_flight.target == key:
            late = True
            done_at = self.in_flight.completion_time
            self.step_to(done_at)
        else:
            self.queue.pop(key, None)
            if self.abort_inflight and self.in_flight is not None and self.in_flight.kind == PREFETCH:
                job = self.in_flight
                self.in_flight = None
                self._emit(t=now, ev="abort", layer=job.target[0], expert=job.target[1])
                job.start_time = job.completion_time = None
                self.queue.setdefault(job.target, job)
            job = TransferJob(ON_DEMAND, key, math.inf, now)
            self._demand.append(job)
            self._start_next(now)
            while job.completion_time is None or job.completion_time > self.clock + TIME_EPS:
                self.step_to(self.in_flight.completion_time)
            done_at = job.completion_time
        stall = done_at - now
        entry = self.resident.get(key)
        if entry is not None:
            entry.used = True
            entry.last_used = self._tick()
        return AccessResult(key, False, stall, late)

    def access_layer(self, layer: int, experts, now: float) -> tuple[list[AccessResult], float]:
        """Serve a layer's activated experts in ascending index order.
        Prefetching is paused until the layer's misses are loaded."""
        self.step_to(now)
        self.paused = True
        t = now
        results = []
        for j in sorted(experts):
            res = self.access((layer, int(j)), t)
            results.append(res)
            t += res.stall_ms
        self.paused = False
        self.step_to(t)
        self._start_next(t)
        return results, t - now

    def finish(self, time: float) -> None:
        self.step_to(time)

    def check_invariants(self, total_experts: int | None = None) -> None:
        assert len(self.resident) <= self.capacity
        if total_experts is not None:
            assert len(self.resident) <= total_experts
        assert self.clock >= 0
