"""Offline references that see the whole trace.

``belady_demand_oracle``: demand paging with MIN replacement (every miss is
inserted). ``brute_force_offline_optimal``: exact minimum number of expert
loads over every feasible cache schedule, bypass allowed, for tiny
instances. Loading an expert ahead of time costs the same T_e as loading it
on demand, so the minimum load count bounds every online policy's loading
cost from below.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

from .metrics import RunReport
from .trace_model import Workload

MAX_CELLS = 12
MAX_ITERATIONS = 6


class InstanceTooLargeError(ValueError):
    pass


def access_sequence(workload: Workload) -> list[tuple[int, int]]:
    """Sequential access order: request, iteration, layer, ascending expert."""
    seq = []
    for req in workload.requests:
        for it in req.iterations:
            for layer, experts in enumerate(it.activated):
                seq.extend((layer, int(j)) for j in sorted(experts))
    return seq


def layer_blocks(workload: Workload) -> list[frozenset]:
    """One block per (iteration, layer): the experts that must be present
    together."""
    blocks = []
    for req in workload.requests:
        for it in req.iterations:
            for layer, experts in enumerate(it.activated):
                blocks.append(frozenset((layer, int(j)) for j in experts))
    return blocks


def belady_misses(seq: list, capacity: int) -> int:
    n = len(seq)
    next_use = [n] * n
    last: dict = {}
    for i in range(n - 1, -1, -1):
        next_use[i] = last.get(seq[i], n)
        last[seq[i]] = i
    resident: dict = {}  # key -> next use index
    misses = 0
    for i, key in enumerate(seq):
        if key in resident:
            resident[key] = next_use[i]
            continue
        misses += 1
        if capacity == 0:
            continue
        if len(resident) >= capacity:
            # furthest next use; never-again counts as infinitely far, ties to lowest key
            victim = max(resident, key=lambda k: (resident[k], tuple(-x for x in k)))
            del resident[victim]
        resident[key] = next_use[i]
    return misses


def belady_demand_oracle(workload: Workload, capacity: int, load_time_ms: float = 1.0) -> RunReport:
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    seq = access_sequence(workload)
    misses = belady_misses(seq, capacity)
    rep = RunReport(
        policy_name="belady",
        total_activations=len(seq),
        hits=len(seq) - misses,
        misses=misses,
        total_stall_ms=misses * load_time_ms,
        transfers=misses,
        load_time_ms=load_time_ms,
    )
    rep.extra["infeasible"] = capacity < workload.shape.top_k
    return rep


def _check_size(workload: Workload) -> list[frozenset]:
    shape = workload.shape
    if shape.num_layers * shape.experts_per_layer > MAX_CELLS or workload.total_iterations > MAX_ITERATIONS:
        raise InstanceTooLargeError(
            f"instance too large for exhaustive search (L*J={shape.num_layers * shape.experts_per_layer}, "
            f"iterations={workload.total_iterations}; limits {MAX_CELLS}, {MAX_ITERATIONS})"
        )
    return layer_blocks(workload)


def min_loads(blocks: list[frozenset], capacity: int) -> int:
    """Memoized search over (block index, cache contents)."""

    @lru_cache(maxsize=None)
    def best(i: int, cache: frozenset) -> int:
        if i == len(blocks):
            return 0
        block = blocks[i]
        cost = len(block - cache)
        pool = sorted(cache | block)
        keep = min(capacity, len(pool))
        # keeping more never hurts, so only maximal subsets are explored
        return cost + min(best(i + 1, frozenset(s)) for s in itertools.combinations(pool, keep))

    return best(0, frozenset())


def min_loads_dfs(blocks: list[frozenset], capacity: int) -> int:
    """Plain depth-first enumeration of every kept subset, no memo. Branches
    are cut only by an admissible bound: every future expert that is not
    cached must be loaded at least once."""
    best = [None]
    future = [frozenset().union(*blocks[i:]) for i in range(len(blocks) + 1)]

    def go(i, cache, acc):
        if best[0] is not None and acc + len(future[i] - cache) >= best[0]:
            return
        if i == len(blocks):
            best[0] = acc
            return
        pool = sorted(cache | blocks[i])
        cost = len(blocks[i] - cache)
        for r in range(min(capacity, len(pool)), -1, -1):
            for s in itertools.combinations(pool, r):
                go(i + 1, frozenset(s), acc + cost)

    go(0, frozenset(), 0)
    return best[0]


def brute_force_offline_optimal(workload: Workload, capacity: int, load_time_ms: float) -> float:
    """Minimum total loading time T = T_e * loads over all cache schedules."""
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    blocks = _check_size(workload)
    return load_time_ms * min_loads(blocks, capacity)
