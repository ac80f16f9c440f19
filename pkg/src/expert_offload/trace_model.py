"""Workload data model: model shapes, expert maps, request traces.

A workload is a sequence of requests. Each request carries one semantic
embedding and, per inference iteration (0 = prefill), an expert map: the
L gate distributions over J experts. Traces are stored as a directory with
``meta.json`` and ``requests.jsonl``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
ROW_SUM_TOL = 1e-4


@dataclass(frozen=True)
class ModelShape:
    num_layers: int
    experts_per_layer: int
    top_k: int
    hidden_dim: int
    expert_size_bytes: int
    # Overrides the bandwidth-derived load time when set.
    expert_load_time_ms: float | None = None

    def __post_init__(self):
        for name in ("num_layers", "experts_per_layer", "top_k", "hidden_dim", "expert_size_bytes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.top_k > self.experts_per_layer:
            raise ValueError(f"top_k={self.top_k} exceeds experts_per_layer={self.experts_per_layer}")
        if self.expert_load_time_ms is not None and self.expert_load_time_ms <= 0:
            raise ValueError("expert_load_time_ms must be positive")

    @property
    def L(self) -> int:
        return self.num_layers

    @property
    def J(self) -> int:
        return self.experts_per_layer

    @property
    def K(self) -> int:
        return self.top_k

    @property
    def total_experts(self) -> int:
        return self.num_layers * self.experts_per_layer

    def replace(self, **changes) -> "ModelShape":
        return ModelShape(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelShape":
        return cls(**d)


# FFN expert = 3 projection matrices (hidden x intermediate) at 16-bit.
MIXTRAL_8X7B = ModelShape(32, 8, 2, 4096, 3 * 4096 * 14336 * 2)
QWEN15_MOE = ModelShape(24, 60, 4, 2048, 3 * 2048 * 1408 * 2)
PHI35_MOE = ModelShape(32, 16, 2, 4096, 3 * 4096 * 6400 * 2)
PRESET_SHAPES = {
    "mixtral-8x7b": MIXTRAL_8X7B,
    "qwen1.5-moe": QWEN15_MOE,
    "phi-3.5-moe": PHI35_MOE,
}


def top_k_indices(row: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest entries, ties to the lowest index, sorted ascending."""
    order = np.argsort(-np.asarray(row, dtype=np.float64), kind="stable")[:k]
    return tuple(sorted(int(i) for i in order))


def _top_k_rows(dist: np.ndarray, k: int) -> tuple[tuple[int, ...], ...]:
    order = np.argsort(-dist.astype(np.float64), axis=1, kind="stable")[:, :k]
    order.sort(axis=1)
    return tuple(tuple(int(i) for i in row) for row in order)


@dataclass(frozen=True, eq=False)
class ExpertMap:
    """Per-iteration gate distributions, shape (L, J)."""

    distributions: np.ndarray

    def __post_init__(self):
        arr = np.array(self.distributions, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"expert map must be 2-D (L x J), got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "distributions", arr)

    @property
    def num_layers(self) -> int:
        return self.distributions.shape[0]

    @property
    def num_experts(self) -> int:
        return self.distributions.shape[1]

    def row(self, layer: int) -> np.ndarray:
        return self.distributions[layer]

    def flatten(self) -> np.ndarray:
        return self.distributions.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, ExpertMap):
            return NotImplemented
        return np.array_equal(self.distributions, other.distributions)

    def __hash__(self):
        return hash(self.distributions.tobytes())


@dataclass(frozen=True, eq=False)
class IterationRecord:
    index: int
    map: ExpertMap
    activated: tuple[tuple[int, ...], ...] = ()
    top_k: int | None = None

    def __post_init__(self):
        if not isinstance(self.map, ExpertMap):
            object.__setattr__(self, "map", ExpertMap(self.map))
        if not self.activated:
            if self.top_k is None:
                raise ValueError("either activated sets or top_k must be given")
            object.__setattr__(self, "activated", _top_k_rows(self.map.distributions, self.top_k))
        else:
            object.__setattr__(
                self, "activated", tuple(tuple(sorted(int(j) for j in s)) for s in self.activated)
            )
        object.__setattr__(self, "top_k", None)

    def __eq__(self, other):
        if not isinstance(other, IterationRecord):
            return NotImplemented
        return (
            self.index == other.index
            and self.map == other.map
            and self.activated == other.activated
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RequestTrace:
    request_id: str
    embedding: np.ndarray
    iterations: tuple[IterationRecord, ...]
    arrival_time: float = 0.0

    def __post_init__(self):
        emb = np.array(self.embedding, dtype=np.float32).reshape(-1)
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        object.__setattr__(self, "iterations", tuple(self.iterations))
        object.__setattr__(self, "arrival_time", float(self.arrival_time))

    @property
    def num_iterations(self) -> int:
        return len(self.iterations)

    def __eq__(self, other):
        if not isinstance(other, RequestTrace):
            return NotImplemented
        return (
            self.request_id == other.request_id
            and self.arrival_time == other.arrival_time
            and np.array_equal(self.embedding, other.embedding)
            and self.iterations == other.iterations
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Workload:
    shape: ModelShape
    requests: tuple[RequestTrace, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "requests", tuple(self.requests))

    def __len__(self):
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    @property
    def total_iterations(self) -> int:
        return sum(r.num_iterations for r in self.requests)

    @property
    def labels(self) -> dict[str, int]:
        return dict(self.meta.get("labels", {}))

    def subset(self, request_ids: Iterable[str]) -> "Workload":
        wanted = set(request_ids)
        reqs = tuple(r for r in self.requests if r.request_id in wanted)
        return Workload(self.shape, reqs, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, Workload):
            return NotImplemented
        return self.shape == other.shape and self.requests == other.requests and self.meta == other.meta

    __hash__ = None


def make_request(request_id: str, embedding, maps: Sequence, top_k: int, arrival_time: float = 0.0) -> RequestTrace:
    """Convenience constructor: activated sets are derived as top-K of each row."""
    iters = tuple(IterationRecord(i, ExpertMap(m), top_k=top_k) for i, m in enumerate(maps))
    return RequestTrace(request_id, embedding, iters, arrival_time)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    request_id: str
    iteration: int | None
    layer: int | None
    rule: str
    message: str

    def __str__(self):
        where = f"{self.request_id}"
        if self.iteration is not None:
            where += f" iter={self.iteration}"
        if self.layer is not None:
            where += f" layer={self.layer}"
        return f"{where}: [{self.rule}] {self.message}"


def validate_trace(workload: Workload, shape: ModelShape) -> list[Violation]:
    """Check every request against the type invariants for ``shape``.

    Returns an empty list for a well-formed workload. Problems are reported
    as data; nothing is raised.
    """
    out: list[Violation] = []
    seen: set[str] = set()
    L, J, K, h = shape.num_layers, shape.experts_per_layer, shape.top_k, shape.hidden_dim
    for req in workload.requests:
        rid = req.request_id
        if rid in seen:
            out.append(Violation(rid, None, None, "duplicate-id", f"request id {rid!r} repeated"))
        seen.add(rid)
        if req.embedding.shape[0] != h:
            out.append(Violation(rid, None, None, "embedding-length",
                                 f"embedding length {req.embedding.shape[0]} != hidden_dim {h}"))
        if not np.all(np.isfinite(req.embedding)) or float(np.linalg.norm(req.embedding)) <= 0.0:
            out.append(Violation(rid, None, None, "embedding-norm", "embedding has zero or non-finite norm"))
        if not req.iterations:
            out.append(Violation(rid, None, None, "no-iterations", "request has no iterations"))
        for pos, it in enumerate(req.iterations):
            if it.index != pos:
                out.append(Violation(rid, it.index, None, "iteration-index",
                                     f"iteration index {it.index} at position {pos}; expected {pos}"))
            dist = it.map.distributions
            if dist.shape[0] != L:
                out.append(Violation(rid, it.index, None, "row-count", f"{dist.shape[0]} rows, expected {L}"))
            if dist.shape[1] != J:
                out.append(Violation(rid, it.index, None, "row-length", f"rows of {dist.shape[1]} entries, expected {J}"))
            if len(it.activated) != dist.shape[0]:
                out.append(Violation(rid, it.index, None, "activated-rows",
                                     f"{len(it.activated)} activated sets for {dist.shape[0]} rows"))
            for layer in range(dist.shape[0]):
                row = dist[layer].astype(np.float64)
                if np.any(row < 0) or not np.all(np.isfinite(row)):
                    out.append(Violation(rid, it.index, layer, "negative-entry", "entries must be finite and >= 0"))
                s = float(row.sum())
                if abs(s - 1.0) > ROW_SUM_TOL:
                    out.append(Violation(rid, it.index, layer, "row-sum", f"row sum {s:.6g} outside 1±1e-4"))
                if layer < len(it.activated):
                    act = it.activated[layer]
                    if len(act) != K:
                        out.append(Violation(rid, it.index, layer, "activated-size",
                                             f"{len(act)} activated experts, expected K={K}"))
                    elif dist.shape[1] >= K and act != top_k_indices(row, K):
                        out.append(Violation(rid, it.index, layer, "topk-mismatch",
                                             f"activation/top-K mismatch: {list(act)} vs {list(top_k_indices(row, K))}"))
    return out


# --------------------------------------------------------------------------
# synthetic workloads


@dataclass(frozen=True)
class SyntheticConfig:
    """Clustered workload generator settings.

    Each cluster has an embedding centroid and ``modes_per_cluster``
    per-iteration expert-preference profiles (L x J logits, correlated
    across adjacent layers). An iteration picks a mode; its gate rows are
    symmetric Dirichlet samples whose mass is assigned to experts in the
    order of the (drifting, Gumbel-perturbed) profile. Concentration alone
    controls row entropy; the profile controls which experts are hot.
    """

    shape: ModelShape
    num_clusters: int = 8
    requests_per_cluster: int = 10
    iterations_range: tuple[int, int] = (8, 16)
    dirichlet_concentration: float = 0.1
    embedding_noise_sigma: float = 0.2
    drift_sigma: float = 0.05
    seed: int = 0
    modes_per_cluster: int = 4
    layer_correlation: float = 0.6
    preference_scale: float = 2.5
    mean_interarrival_ms: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "iterations_range", tuple(int(x) for x in self.iterations_range))
        lo, hi = self.iterations_range
        if not (math.isfinite(self.dirichlet_concentration) and self.dirichlet_concentration > 0):
            raise ValueError("dirichlet_concentration must be > 0")
        if self.embedding_noise_sigma < 0 or self.drift_sigma < 0:
            raise ValueError("sigmas must be >= 0")
        if self.num_clusters < 1 or self.requests_per_cluster < 1 or self.modes_per_cluster < 1:
            raise ValueError("cluster, request and mode counts must be positive")
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid iterations_range {self.iterations_range}")
        if not -1.0 <= self.layer_correlation <= 1.0:
            raise ValueError("layer_correlation must be in [-1, 1]")
        if self.preference_scale < 0 or self.mean_interarrival_ms < 0:
            raise ValueError("preference_scale and mean_interarrival_ms must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iterations_range"] = list(self.iterations_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        d["shape"] = ModelShape.from_dict(d["shape"])
        d["iterations_range"] = tuple(d["iterations_range"])
        return cls(**d)


def generate_synthetic(config: SyntheticConfig) -> Workload:
    """Deterministic clustered workload; a pure function of ``config``."""
    shape = config.shape
    L, J, K, h = shape.num_layers, shape.experts_per_layer, shape.top_k, shape.hidden_dim
    C, M = config.num_clusters, config.modes_per_cluster
    rng = np.random.default_rng(config.seed)

    centroids = rng.standard_normal((C, h))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)

    rho = config.layer_correlation
    logits = np.empty((C, M, L, J))
    logits[:, :, 0] = rng.standard_normal((C, M, J))
    for layer in range(1, L):
        fresh = rng.standard_normal((C, M, J))
        logits[:, :, layer] = rho * logits[:, :, layer - 1] + math.sqrt(1.0 - rho * rho) * fresh
    logits *= config.preference_scale

    labels = np.repeat(np.arange(C), config.requests_per_cluster)
    labels = labels[rng.permutation(labels.size)]
    lo, hi = config.iterations_range
    alpha = np.full(J, config.dirichlet_concentration)

    arrival = 0.0
    requests = []
    modes_meta: dict[str, list[int]] = {}
    for idx, cluster in enumerate(labels):
        rid = f"r{idx:05d}"
        emb = centroids[cluster] + config.embedding_noise_sigma * rng.standard_normal(h)
        norm = np.linalg.norm(emb)
        emb = emb / norm if norm > 0 else centroids[cluster]
        n_iter = int(rng.integers(lo, hi + 1))
        modes = rng.integers(M, size=n_iter)
        steps = config.drift_sigma * rng.standard_normal((n_iter, L, J))
        steps[0] = 0.0
        drift = np.cumsum(steps, axis=0)
        pref = logits[cluster][modes] + drift + rng.gumbel(size=(n_iter, L, J))
        ranking = np.argsort(-pref, axis=2, kind="stable")
        mass = rng.dirichlet(alpha, size=(n_iter, L))
        mass = -np.sort(-mass, axis=2)
        dist = np.empty_like(mass)
        np.put_along_axis(dist, ranking, mass, axis=2)
        dist = dist.astype(np.float32)
        iters = tuple(IterationRecord(i, ExpertMap(dist[i]), top_k=K) for i in range(n_iter))
        if config.mean_interarrival_ms > 0 and idx > 0:
            arrival += float(rng.exponential(config.mean_interarrival_ms))
        requests.append(RequestTrace(rid, emb.astype(np.float32), iters, arrival))
        modes_meta[rid] = [int(m) for m in modes]

    meta = {
        "generator": config.to_dict(),
        "labels": {r.request_id: int(c) for r, c in zip(requests, labels)},
        "modes": modes_meta,
    }
    return Workload(shape, tuple(requests), meta)


# --------------------------------------------------------------------------
# serialization


class TraceFormatError(Exception):
    """Base class for trace file problems."""


class TraceParseError(TraceFormatError):
    def __init__(self, path, line_no: int, offset: int, last_complete: str | None, reason: str):
        self.path = str(path)
        self.line_no = line_no
        self.offset = offset
        self.last_complete = last_complete
        self.reason = reason
        super().__init__(
            f"{self.path}: parse error at line {line_no} (byte offset {offset}): {reason}; "
            f"last complete record: {last_complete!r}"
        )


class TraceShapeError(TraceFormatError):
    def __init__(self, path, request_id: str | None, iteration: int | None, layer: int | None, reason: str):
        self.path = str(path)
        self.request_id = request_id
        self.iteration = iteration
        self.layer = layer
        self.reason = reason
        super().__init__(
            f"{self.path}: shape mismatch in request {request_id!r} iteration {iteration} layer {layer}: {reason}"
        )


class TraceIOError(TraceFormatError):
    pass


def format_floats(values) -> str:
    # 9 significant digits round-trips float32 exactly
    return "[" + ",".join(format(float(v), ".9g") for v in np.asarray(values, dtype=np.float32).ravel()) + "]"


def _request_line(req: RequestTrace) -> str:
    iters = ",".join(
        "[" + ",".join(format_floats(row) for row in it.map.distributions) + "]" for it in req.iterations
    )
    return (
        "{" + f'"id":{json.dumps(req.request_id)},"arrival_time":{json.dumps(req.arrival_time)},'
        f'"embedding":{format_floats(req.embedding)},"iterations":[{iters}]' + "}"
    )


def save_workload(workload: Workload, path) -> None:
    """Write ``meta.json`` + ``requests.jsonl`` into directory ``path``."""
    problems = validate_trace(workload, workload.shape)
    if problems:
        raise ValueError(f"refusing to save invalid workload: {problems[0]} (+{len(problems) - 1} more)")
    try:
        os.makedirs(path, exist_ok=True)
        meta = {"format_version": FORMAT_VERSION, "shape": workload.shape.to_dict(), **workload.meta}
        with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
        with open(os.path.join(path, "requests.jsonl"), "w", encoding="utf-8") as f:
            for req in workload.requests:
                f.write(_request_line(req))
                f.write("\n")
    except OSError as exc:
        raise TraceIOError(f"{path}: {exc}") from exc


def _parse_request(obj: Any, shape: ModelShape, path, line_no: int) -> RequestTrace:
    rid = obj.get("id") if isinstance(obj, dict) else None
    if not isinstance(obj, dict) or not isinstance(rid, str):
        raise TraceShapeError(path, None, None, None, f"line {line_no}: record lacks a string 'id'")
    emb = obj.get("embedding")
    if not isinstance(emb, list) or len(emb) != shape.hidden_dim:
        n = len(emb) if isinstance(emb, list) else None
        raise TraceShapeError(path, rid, None, None, f"embedding has {n} entries, header declares h={shape.hidden_dim}")
    iters_raw = obj.get("iterations")
    if not isinstance(iters_raw, list) or not iters_raw:
        raise TraceShapeError(path, rid, None, None, "missing or empty 'iterations'")
    iters = []
    for i, rows in enumerate(iters_raw):
        if not isinstance(rows, list) or len(rows) != shape.num_layers:
            n = len(rows) if isinstance(rows, list) else None
            raise TraceShapeError(path, rid, i, None, f"{n} layers, header declares L={shape.num_layers}")
        for layer, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != shape.experts_per_layer:
                n = len(row) if isinstance(row, list) else None
                raise TraceShapeError(path, rid, i, layer, f"row has {n} entries, header declares J={shape.experts_per_layer}")
        iters.append(IterationRecord(i, ExpertMap(np.array(rows, dtype=np.float32)), top_k=shape.top_k))
    return RequestTrace(rid, np.array(emb, dtype=np.float32), tuple(iters), float(obj.get("arrival_time", 0.0)))


def load_workload(path) -> Workload:
    """Inverse of :func:`save_workload`.

    Raises TraceParseError (with byte offset and last complete request id),
    TraceShapeError (with request/iteration/layer) or TraceIOError.
    """
    meta_path = os.path.join(path, "meta.json")
    req_path = os.path.join(path, "requests.jsonl")
    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            raw_meta = f.read()
        with open(req_path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise TraceIOError(f"{path}: {exc}") from exc
    try:
        meta = json.loads(raw_meta)
    except json.JSONDecodeError as exc:
        raise TraceParseError(meta_path, exc.lineno, exc.pos, None, exc.msg) from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise TraceParseError(meta_path, 1, 0, None, f"unsupported format_version {meta.get('format_version')!r}")
    try:
        shape = ModelShape.from_dict(meta.pop("shape"))
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceParseError(meta_path, 1, 0, None, f"bad shape header: {exc}") from exc
    meta.pop("format_version")

    requests = []
    last_complete = None
    offset = 0
    for line_no, raw in enumerate(data.split(b"\n"), start=1):
        line_offset = offset
        offset += len(raw) + 1
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise TraceParseError(req_path, line_no, line_offset, last_complete, str(exc)) from exc
        requests.append(_parse_request(obj, shape, req_path, line_no))
        last_complete = requests[-1].request_id
    return Workload(shape, tuple(requests), meta)
