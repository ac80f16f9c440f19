"""Expert map search over a store snapshot.

Layers 1..d are guided by semantic search (prompt embedding against stored
embeddings); a target layer l+d beyond that is guided by trajectory search
(the observed gate rows for layers 1..l against the same-length prefix of
every stored map). Layers are 0-indexed in code: semantic covers 0..d-1 and
the trajectory observed through layer l targets layer l+d.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .map_store import StoreSnapshot

DEFAULT_MATCH_LATENCY_MS = 0.5


@dataclass(frozen=True, eq=False)
class MatchResult:
    guidance: np.ndarray
    score: float
    matched_context_id: int | None
    layer: int

    def __post_init__(self):
        g = np.array(self.guidance, dtype=np.float64)
        g.setflags(write=False)
        object.__setattr__(self, "guidance", g)


def _uniform(J: int) -> np.ndarray:
    return np.full(J, 1.0 / J)


def semantic_scores(query_embeddings, snapshot: StoreSnapshot) -> np.ndarray:
    """B x C cosine similarity between query embeddings and stored ones."""
    q = np.atleast_2d(np.asarray(query_embeddings, dtype=np.float64))
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("query embedding with zero norm")
    if snapshot.is_empty:
        raise ValueError("store snapshot is empty")
    return (q / norms) @ snapshot.unit_embeddings.T


def trajectory_scores(observed_prefix, snapshot: StoreSnapshot, prefix_len: int | None = None) -> np.ndarray:
    """B x C cosine between observed gate-row prefixes (B x p x J) and the
    first p rows of every stored map."""
    obs = np.asarray(observed_prefix, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    if prefix_len is None:
        prefix_len = obs.shape[1]
    if prefix_len < 1:
        raise ValueError("prefix length 0: use semantic search for the initial layers")
    if snapshot.is_empty:
        raise ValueError("store snapshot is empty")
    L = snapshot.maps.shape[1]
    if prefix_len > L - 1:
        raise ValueError(f"prefix length {prefix_len} exceeds L-1={L - 1}")
    J = snapshot.maps.shape[2]
    flat = obs[:, :prefix_len].reshape(obs.shape[0], prefix_len * J)
    qn = np.linalg.norm(flat, axis=1, keepdims=True)
    if np.any(qn == 0):
        raise ValueError("observed prefix with zero norm")
    stored = snapshot.maps_flat[:, : prefix_len * J]
    return (flat @ stored.T) / (qn * snapshot.prefix_norms[:, prefix_len - 1][None, :])


def match_initial(query_embedding, snapshot: StoreSnapshot, d: int) -> list[MatchResult]:
    """Guidance for layers 0..d-1 from the best semantic match."""
    if snapshot.is_empty:
        J = snapshot.maps.shape[2]
        return [MatchResult(_uniform(J), 0.0, None, layer) for layer in range(d)]
    scores = semantic_scores(query_embedding, snapshot)[0]
    slot = snapshot.argmax_lowest_id(scores)
    score = float(scores[slot])
    cid = int(snapshot.context_ids[slot])
    return [MatchResult(snapshot.maps[slot, layer], score, cid, layer) for layer in range(d)]


def match_layer(observed_prefix, snapshot: StoreSnapshot, d: int) -> MatchResult:
    """Guidance for target layer ``l + d`` given observed rows for layers
    0..l (prefix length l+1): the row at the target layer of the stored map
    whose prefix is most similar."""
    obs = np.asarray(observed_prefix, dtype=np.float64)
    p = obs.shape[0]
    target = p - 1 + d
    L = snapshot.maps.shape[1]
    if p < 1:
        raise ValueError("need at least one observed layer")
    if target >= L:
        raise ValueError(f"target layer {target} beyond the last layer {L - 1}")
    if snapshot.is_empty:
        return MatchResult(_uniform(snapshot.maps.shape[2]), 0.0, None, target)
    scores = trajectory_scores(obs[None], snapshot, p)[0]
    slot = snapshot.argmax_lowest_id(scores)
    return MatchResult(snapshot.maps[slot, target], float(scores[slot]), int(snapshot.context_ids[slot]), target)


def best_match_scores(queries_emb, queries_maps, snapshot: StoreSnapshot) -> tuple[np.ndarray, np.ndarray]:
    """Best semantic and best full-map cosine for each held-out query."""
    sem = semantic_scores(queries_emb, snapshot).max(axis=1)
    maps = np.asarray(queries_maps, dtype=np.float64)
    flat = maps.reshape(maps.shape[0], -1)
    flat = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    stored = snapshot.maps_flat / snapshot.prefix_norms[:, -1:]
    traj = (flat @ stored.T).max(axis=1)
    return sem, traj


def bench_matcher(
    batch: int = 4,
    capacity: int = 1024,
    hidden_dim: int = 1024,
    num_layers: int = 32,
    experts: int = 8,
    repeats: int = 50,
    seed: int = 0,
) -> dict:
    """Wall-clock cost of one batched scoring pass (semantic + full-prefix
    trajectory) against a full store."""
    rng = np.random.default_rng(seed)
    maps = rng.dirichlet(np.ones(experts), size=(capacity, num_layers))
    snap = StoreSnapshot(np.arange(capacity), rng.standard_normal((capacity, hidden_dim)), maps, [("", -1)] * capacity)
    q_emb = rng.standard_normal((batch, hidden_dim))
    q_maps = rng.dirichlet(np.ones(experts), size=(batch, num_layers - 1))
    timings = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        sem = semantic_scores(q_emb, snap)
        traj = trajectory_scores(q_maps, snap, num_layers - 1)
        for row in sem:
            snap.argmax_lowest_id(row)
        for row in traj:
            snap.argmax_lowest_id(row)
        timings.append((time.perf_counter() - t0) * 1e3)
    timings.sort()
    return {
        "batch": batch,
        "capacity": capacity,
        "hidden_dim": hidden_dim,
        "num_layers": num_layers,
        "experts": experts,
        "median_ms": timings[len(timings) // 2],
        "max_ms": timings[-1],
        "min_ms": timings[0],
    }
