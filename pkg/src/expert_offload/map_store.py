"""Expert Map Store: capacity-bounded history of (embedding, expert map)
contexts with redundancy-based replacement once full."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .trace_model import (
    FORMAT_VERSION,
    ExpertMap,
    ModelShape,
    TraceIOError,
    TraceParseError,
    Workload,
)


@dataclass(frozen=True, eq=False)
class StoredContext:
    """One historical iteration. ``context_id`` is assigned by the store;
    contexts that have not been inserted yet carry -1."""

    embedding: np.ndarray
    map: ExpertMap
    source: tuple[str, int] = ("", -1)
    context_id: int = -1

    def __post_init__(self):
        emb = np.array(self.embedding, dtype=np.float64).reshape(-1)
        if not np.isfinite(emb).all() or np.linalg.norm(emb) <= 0:
            raise ValueError("context embedding must have a finite, non-zero norm")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        if not isinstance(self.map, ExpertMap):
            object.__setattr__(self, "map", ExpertMap(self.map))
        object.__setattr__(self, "source", (str(self.source[0]), int(self.source[1])))


@dataclass(frozen=True)
class StoreConfig:
    capacity: int
    prefetch_distance: int
    shape: ModelShape

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("store capacity must be >= 1")
        if not 1 <= self.prefetch_distance < self.shape.num_layers:
            raise ValueError(
                f"prefetch distance must be in [1, {self.shape.num_layers}), got {self.prefetch_distance}"
            )

    @property
    def semantic_weight(self) -> float:
        return self.prefetch_distance / self.shape.num_layers

    @property
    def trajectory_weight(self) -> float:
        return (self.shape.num_layers - self.prefetch_distance) / self.shape.num_layers


@dataclass(frozen=True)
class Replacement:
    new_id: int
    replaced_id: int
    source: tuple[str, int]


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / norms


class StoreSnapshot:
    """Immutable view of the store: arrays are private copies, read-only."""

    def __init__(self, context_ids, embeddings, maps, sources):
        self.context_ids = np.array(context_ids, dtype=np.int64)
        self.embeddings = np.array(embeddings, dtype=np.float64)
        self.maps = np.array(maps, dtype=np.float64)
        self.sources = tuple(sources)
        n = self.maps.shape[0]
        if n:
            self.unit_embeddings = _unit_rows(self.embeddings)
            self.maps_flat = self.maps.reshape(n, -1)
            self.prefix_norms = np.sqrt(np.cumsum((self.maps**2).sum(axis=2), axis=1))
        else:
            h = self.embeddings.shape[1] if self.embeddings.ndim == 2 else 0
            self.unit_embeddings = np.zeros((0, h))
            lj = self.maps.shape[1] * self.maps.shape[2] if self.maps.ndim == 3 else 0
            self.maps_flat = np.zeros((0, lj))
            self.prefix_norms = np.zeros((0, self.maps.shape[1] if self.maps.ndim == 3 else 0))
        for arr in (self.context_ids, self.embeddings, self.maps, self.unit_embeddings, self.maps_flat, self.prefix_norms):
            arr.setflags(write=False)

    def __len__(self):
        return int(self.context_ids.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def slot_of(self, context_id: int) -> int:
        hits = np.flatnonzero(self.context_ids == context_id)
        if hits.size == 0:
            raise KeyError(context_id)
        return int(hits[0])

    def argmax_lowest_id(self, scores: np.ndarray) -> int:
        """Slot with the highest score; ties resolved to the lowest context_id."""
        best = scores.max()
        cands = np.flatnonzero(scores == best)
        if cands.size == 1:
            return int(cands[0])
        return int(cands[np.argmin(self.context_ids[cands])])


def _batch_arrays(batch: Sequence[StoredContext]):
    embs = np.stack([c.embedding for c in batch]).astype(np.float64)
    maps = np.stack([c.map.distributions for c in batch]).astype(np.float64)
    return embs, maps


def redundancy_scores(batch: Sequence[StoredContext], snapshot: StoreSnapshot, config: StoreConfig) -> np.ndarray:
    """B x C redundancy: (d/L) * semantic cosine + ((L-d)/L) * full-map cosine."""
    if snapshot.is_empty:
        raise ValueError("store is empty: nothing to be redundant with; call insert_batch directly")
    embs, maps = _batch_arrays(batch)
    if embs.shape[1] != snapshot.embeddings.shape[1] or maps.shape[1:] != snapshot.maps.shape[1:]:
        raise ValueError("batch shape does not match the store")
    sem = _unit_rows(embs) @ snapshot.unit_embeddings.T
    flat = maps.reshape(maps.shape[0], -1)
    traj = _unit_rows(flat) @ (snapshot.maps_flat / snapshot.prefix_norms[:, -1:]).T
    return config.semantic_weight * sem + config.trajectory_weight * traj


class ExpertMapStore:
    """Single-writer, multi-reader store. All mutations hold a lock and
    readers work from immutable snapshots."""

    def __init__(self, config: StoreConfig):
        self.config = config
        shape = config.shape
        cap = config.capacity
        self._ids = np.zeros(cap, dtype=np.int64)
        self._emb = np.zeros((cap, shape.hidden_dim))
        self._maps = np.zeros((cap, shape.num_layers, shape.experts_per_layer))
        self._sources: list[tuple[str, int]] = [("", -1)] * cap
        self._n = 0
        self._next_id = 0
        self._lock = threading.Lock()
        self._snapshot: StoreSnapshot | None = None

    def __len__(self):
        return self._n

    @property
    def capacity(self) -> int:
        return self.config.capacity

    def snapshot(self) -> StoreSnapshot:
        with self._lock:
            if self._snapshot is None:
                n = self._n
                self._snapshot = StoreSnapshot(self._ids[:n], self._emb[:n], self._maps[:n], self._sources[:n])
            return self._snapshot

    def redundancy_matrix(self, batch: Sequence[StoredContext]) -> np.ndarray:
        return redundancy_scores(batch, self.snapshot(), self.config)

    def _check(self, ctx: StoredContext):
        shape = self.config.shape
        if ctx.embedding.shape[0] != shape.hidden_dim:
            raise ValueError(f"embedding length {ctx.embedding.shape[0]} != {shape.hidden_dim}")
        if ctx.map.distributions.shape != (shape.num_layers, shape.experts_per_layer):
            raise ValueError(f"map shape {ctx.map.distributions.shape} does not match store shape")

    def _put(self, slot: int, ctx: StoredContext) -> int:
        cid = self._next_id
        self._next_id += 1
        self._ids[slot] = cid
        self._emb[slot] = ctx.embedding
        self._maps[slot] = ctx.map.distributions
        self._sources[slot] = ctx.source
        return cid

    def insert_batch(self, batch: Sequence[StoredContext]) -> list[Replacement]:
        """Append while below capacity; afterwards each new context (in batch
        order) replaces its most redundant stored neighbour. Within one batch
        every stored slot is replaced at most once."""
        batch = list(batch)
        if not batch:
            return []
        for ctx in batch:
            self._check(ctx)
        log: list[Replacement] = []
        with self._lock:
            self._snapshot = None
            cap = self.config.capacity
            i = 0
            while i < len(batch) and self._n < cap:
                self._put(self._n, batch[i])
                self._n += 1
                i += 1
            while i < len(batch):
                chunk = batch[i : i + cap]
                view = StoreSnapshot(self._ids, self._emb, self._maps, self._sources)
                rdy = redundancy_scores(chunk, view, self.config)
                claimed = np.zeros(cap, dtype=bool)
                for row, ctx in zip(rdy, chunk):
                    row = np.where(claimed, -np.inf, row)
                    slot = view.argmax_lowest_id(row)
                    old = int(self._ids[slot])
                    new = self._put(slot, ctx)
                    claimed[slot] = True
                    log.append(Replacement(new, old, ctx.source))
                i += len(chunk)
        return log

    def contexts(self) -> list[StoredContext]:
        snap = self.snapshot()
        return [
            StoredContext(snap.embeddings[k], ExpertMap(snap.maps[k]), snap.sources[k], int(snap.context_ids[k]))
            for k in range(len(snap))
        ]

    def copy(self) -> "ExpertMapStore":
        other = ExpertMapStore(self.config)
        with self._lock:
            other._ids = self._ids.copy()
            other._emb = self._emb.copy()
            other._maps = self._maps.copy()
            other._sources = list(self._sources)
            other._n = self._n
            other._next_id = self._next_id
        return other

    def with_capacity(self, capacity: int) -> "ExpertMapStore":
        """New store of a different capacity re-fed with this store's contents."""
        cfg = StoreConfig(capacity, self.config.prefetch_distance, self.config.shape)
        other = ExpertMapStore(cfg)
        other.insert_batch(self.contexts())
        return other

    # -- export / import ----------------------------------------------------

    def export(self, path) -> None:
        snap = self.snapshot()
        try:
            os.makedirs(path, exist_ok=True)
            meta = {
                "format_version": FORMAT_VERSION,
                "shape": self.config.shape.to_dict(),
                "capacity": self.config.capacity,
                "prefetch_distance": self.config.prefetch_distance,
                "next_id": self._next_id,
            }
            with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as f:
                json.dump(meta, f, indent=1, sort_keys=True)
            with open(os.path.join(path, "contexts.jsonl"), "w", encoding="utf-8") as f:
                for k in range(len(snap)):
                    rec = {
                        "id": int(snap.context_ids[k]),
                        "source": list(snap.sources[k]),
                        "embedding": snap.embeddings[k].tolist(),
                        "map": snap.maps[k].tolist(),
                    }
                    f.write(json.dumps(rec, separators=(",", ":")))
                    f.write("\n")
        except OSError as exc:
            raise TraceIOError(f"{path}: {exc}") from exc

    @classmethod
    def load(cls, path, capacity: int | None = None, prefetch_distance: int | None = None) -> "ExpertMapStore":
        try:
            with open(os.path.join(path, "meta.json"), encoding="utf-8") as f:
                meta = json.load(f)
            with open(os.path.join(path, "contexts.jsonl"), encoding="utf-8") as f:
                lines = f.read().split("\n")
        except OSError as exc:
            raise TraceIOError(f"{path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise TraceParseError(os.path.join(path, "meta.json"), exc.lineno, exc.pos, None, exc.msg) from exc
        shape = ModelShape.from_dict(meta["shape"])
        cfg = StoreConfig(
            capacity if capacity is not None else meta["capacity"],
            prefetch_distance if prefetch_distance is not None else meta["prefetch_distance"],
            shape,
        )
        store = cls(cfg)
        records = []
        last = None
        offset = 0
        for line_no, line in enumerate(lines, start=1):
            start = offset
            offset += len(line.encode()) + 1
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(os.path.join(path, "contexts.jsonl"), line_no, start, last, exc.msg) from exc
            records.append(rec)
            last = str(rec.get("id"))
        if len(records) <= cfg.capacity:
            # preserve slots and ids so the loaded store behaves like the exported one
            with store._lock:
                for k, rec in enumerate(records):
                    ctx = StoredContext(rec["embedding"], ExpertMap(rec["map"]), tuple(rec["source"]))
                    store._check(ctx)
                    store._ids[k] = rec["id"]
                    store._emb[k] = ctx.embedding
                    store._maps[k] = ctx.map.distributions
                    store._sources[k] = ctx.source
                store._n = len(records)
                store._next_id = max(int(meta.get("next_id", 0)), max((r["id"] for r in records), default=-1) + 1)
        else:
            records.sort(key=lambda r: r["id"])
            store.insert_batch(
                StoredContext(r["embedding"], ExpertMap(r["map"]), tuple(r["source"])) for r in records
            )
        return store


def contexts_from_request(req) -> list[StoredContext]:
    return [StoredContext(req.embedding, it.map, (req.request_id, it.index)) for it in req.iterations]


def build_store(workload: Workload | Iterable, config: StoreConfig) -> ExpertMapStore:
    """Warm a store with every iteration of every request, one batch per request."""
    store = ExpertMapStore(config)
    for req in workload:
        store.insert_batch(contexts_from_request(req))
    return store
