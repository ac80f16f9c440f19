import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expert_offload.cache_sim import ExpertCache, LatencyModel
from expert_offload.offload_policy import eviction_priority, pressure_admission
from expert_offload.trace_model import MIXTRAL_8X7B


def test_latency_model_defaults():
    lat = LatencyModel()
    assert lat.load_time_ms == pytest.approx(352_321_536 / 32e6)
    assert LatencyModel.for_shape(MIXTRAL_8X7B, bandwidth_gbps=16).load_time_ms == pytest.approx(2 * lat.load_time_ms)
    assert LatencyModel(load_time_override_ms=3.0).load_time_ms == 3.0
    with pytest.raises(ValueError):
        LatencyModel(per_layer_compute_ms=0)


def test_hit_and_cold_miss():
    c = ExpertCache(4, 4.0)
    r = c.access((0, 1), 0.0)
    assert not r.hit and r.stall_ms == 4.0
    r = c.access((0, 1), 10.0)
    assert r.hit and r.stall_ms == 0.0
    assert c.resident[(0, 1)].freq == 2


def test_miss_behind_inflight_prefetch():
    c = ExpertCache(4, 4.0)
    c.enqueue_prefetch((1, 0), 0.5, 0.5, 0.0)
    r = c.access((0, 0), 2.0)  # 2 ms of the prefetch remain
    assert r.stall_ms == pytest.approx(2.0 + 4.0)


def test_timeline_on_demand_preempts_queue():
    log = []
    c = ExpertCache(8, 4.0, log=log)
    c.enqueue_prefetch((1, 0), 0.9, 0.9, 0.0)
    c.enqueue_prefetch((1, 1), 0.5, 0.5, 0.0)
    r = c.access((0, 3), 1.0)
    assert r.stall_ms == pytest.approx(7.0)
    c.step_to(20.0)
    done = [(e["t"], e["kind"], e["expert"]) for e in log if e["ev"] == "done"]
    assert done == [(4.0, "prefetch", 0), (8.0, "on_demand", 3), (12.0, "prefetch", 1)]


def test_step_to_examples():
    c = ExpertCache(4, 4.0)
    assert c.step_to(3.0) == []
    c.enqueue_prefetch((0, 0), 1.0, 1.0, 3.0)
    assert c.step_to(6.9) == []
    done = c.step_to(7.0)
    assert len(done) == 1 and done[0].completion_time == 7.0
    assert done[0].completion_time - done[0].start_time == 4.0
    with pytest.raises(ValueError):
        c.step_to(1.0)


def test_priority_order_and_tiebreak():
    log = []
    c = ExpertCache(8, 1.0, log=log)
    c.paused = True
    c.enqueue_prefetch((2, 0), 0.2, 0.2, 0.0)
    c.enqueue_prefetch((3, 5), 0.9, 0.9, 0.0)
    c.enqueue_prefetch((2, 4), 0.5, 0.5, 0.0)
    c.enqueue_prefetch((1, 7), 0.5, 0.5, 0.0)
    c.paused = False
    c.step_to(0.0)
    c._start_next(0.0)
    c.step_to(10.0)
    starts = [(e["layer"], e["expert"]) for e in log if e["ev"] == "start"]
    assert starts == [(3, 5), (1, 7), (2, 4), (2, 0)]


def test_prefetch_of_resident_dropped_and_duplicates_coalesced():
    c = ExpertCache(4, 1.0)
    c.access((0, 0), 0.0)
    assert not c.enqueue_prefetch((0, 0), 1.0, 1.0, 2.0)
    assert c.enqueue_prefetch((0, 1), 0.1, 0.1, 2.0)
    assert not c.enqueue_prefetch((0, 1), 0.9, 0.9, 2.0)  # in flight
    c.paused = True
    assert c.enqueue_prefetch((0, 2), 0.1, 0.1, 2.0)
    assert not c.enqueue_prefetch((0, 2), 0.7, 0.7, 2.0)
    assert c.queue[(0, 2)].priority == 0.7
    assert c.transfers == 2 and c.prefetches_issued == 2


def test_eviction_matches_priority_oracle():
    rank = lambda key, e, now: eviction_priority(e.last_guidance_p, e.freq)
    c = ExpertCache(3, 1.0, eviction_rank=rank)
    probs = {(0, 0): 0.5, (0, 1): 0.1, (0, 2): 0.3}
    t = 0.0
    for key, p in probs.items():
        c.enqueue_prefetch(key, p, p, t)
        t += 1.0
        c.step_to(t)
    c.access((0, 0), t)  # freq 2
    ranks = {k: eviction_priority(e.last_guidance_p, e.freq) for k, e in c.resident.items()}
    expected = max(ranks, key=ranks.get)
    c.enqueue_prefetch((1, 0), 0.9, 0.9, t)
    c.step_to(t + 1.0)
    assert expected == (0, 1) and expected not in c.resident and (1, 0) in c.resident


def test_builtin_guided_rank_equals_callable():
    rng = np.random.default_rng(0)
    ops = [(int(rng.integers(0, 3)), int(rng.integers(0, 4)), float(rng.random())) for _ in range(200)]
    rank = lambda key, e, now: eviction_priority(e.last_guidance_p, e.freq)
    caches = [ExpertCache(4, 1.0, eviction_rank="guided", log=[]), ExpertCache(4, 1.0, eviction_rank=rank, log=[])]
    for c in caches:
        t = 0.0
        for layer, j, p in ops:
            if p < 0.4:
                c.access((layer, j), t)
            else:
                c.enqueue_prefetch((layer, j), p, p, t)
            t = max(t, c.clock) + 0.7
    assert caches[0].log == caches[1].log


def test_tie_evicts_least_recently_inserted():
    c = ExpertCache(2, 1.0, eviction_rank=lambda k, e, now: 1.0)
    for j, t in ((0, 0.0), (1, 2.0), (2, 4.0)):
        c.access((0, j), t)
    assert set(c.resident) == {(0, 1), (0, 2)}


def test_late_prefetch_partial_credit():
    c = ExpertCache(4, 4.0)
    c.enqueue_prefetch((0, 5), 1.0, 1.0, 0.0)
    r = c.access((0, 5), 3.0)
    assert not r.hit and r.late_prefetch and r.stall_ms == pytest.approx(1.0)
    assert c.transfers == 1 and c.resident[(0, 5)].used


def test_queued_prefetch_cancelled_by_demand():
    c = ExpertCache(4, 4.0)
    c.enqueue_prefetch((0, 1), 1.0, 1.0, 0.0)
    c.enqueue_prefetch((0, 2), 0.5, 0.5, 0.0)
    r = c.access((0, 2), 1.0)
    assert r.stall_ms == pytest.approx(3.0 + 4.0)
    c.step_to(50.0)
    assert c.transfers == 2


def test_abort_inflight_mode():
    log = []
    c = ExpertCache(4, 4.0, abort_inflight=True, log=log)
    c.enqueue_prefetch((1, 0), 0.9, 0.9, 0.0)
    r = c.access((0, 0), 1.0)
    assert r.stall_ms == pytest.approx(4.0)
    c.step_to(20.0)
    assert [e["ev"] for e in log if e["ev"] == "abort"] == ["abort"]
    assert (1, 0) in c.resident


def test_wasted_prefetch_counted():
    c = ExpertCache(1, 1.0)
    c.enqueue_prefetch((0, 0), 1.0, 1.0, 0.0)
    c.step_to(1.0)
    c.access((0, 1), 2.0)
    assert c.prefetches_wasted == 1
    c.enqueue_prefetch((0, 2), 1.0, 1.0, 5.0)
    c.step_to(6.0)
    c.access((0, 2), 6.0)
    c.access((0, 3), 7.0)
    assert c.prefetches_wasted == 1


def test_zero_capacity():
    c = ExpertCache(0, 2.0)
    assert not c.enqueue_prefetch((0, 0), 1.0, 1.0, 0.0) or c.transfers == 0
    r1 = c.access((0, 0), 0.0)
    r2 = c.access((0, 0), 5.0)
    assert (r1.hit, r2.hit) == (False, False)
    assert c.resident == {} and c.peak_resident == 0


def test_access_layer_pauses_prefetching():
    log = []
    c = ExpertCache(8, 1.0, log=log)
    c.paused = True
    c.enqueue_prefetch((3, 0), 0.9, 0.9, 0.0)
    c.paused = False
    results, stall = c.access_layer(0, [2, 1], 0.0)
    assert [r.key for r in results] == [(0, 1), (0, 2)]
    assert stall == pytest.approx(2.0)
    starts = [(e["t"], e["kind"]) for e in log if e["ev"] == "start"]
    assert starts == [(0.0, "on_demand"), (1.0, "on_demand"), (2.0, "prefetch")]


def test_admission_hook_rejects():
    c = ExpertCache(1, 1.0, eviction_rank="guided", admit_prefetch=pressure_admission)
    c.note_guidance(0, [0.9, 0.1])
    c.access((0, 0), 0.0)
    c.access((0, 0), 1.0)  # freq 2, p 0.9: rank 0.56
    assert not c.enqueue_prefetch((1, 0), 0.5, 0.5, 2.0) or (0, 0) in c.resident
    c.step_to(5.0)
    assert (0, 0) in c.resident and c.transfers == 1


ops = st.lists(
    st.tuples(st.sampled_from(["access", "prefetch", "step"]), st.integers(0, 2), st.integers(0, 3), st.floats(0, 1)),
    max_size=60,
)


@settings(max_examples=80)
@given(st.integers(0, 6), ops, st.sampled_from(["lru", "lfu", "guided"]), st.booleans())
def test_capacity_and_timing_invariants(cap, seq, rank, abort):
    log = []
    c = ExpertCache(cap, 1.5, eviction_rank=rank, abort_inflight=abort, log=log)
    t = 0.0
    for op, layer, j, x in seq:
        t += x
        if op == "access":
            r = c.access((layer, j), t)
            assert r.stall_ms >= 0
            if not r.hit and not r.late_prefetch and not abort:
                assert r.stall_ms >= 1.5 - 1e-9
            t += r.stall_ms
        elif op == "prefetch":
            c.enqueue_prefetch((layer, j), x, x, t)
        else:
            c.step_to(t)
        assert len(c.resident) <= cap
        assert len(c.resident) <= 12
    c.step_to(t + 100)
    starts = {}
    for e in log:
        if e["ev"] == "start":
            starts[(e["layer"], e["expert"])] = e["t"]
        elif e["ev"] == "done":
            assert e["t"] - starts[(e["layer"], e["expert"])] == pytest.approx(1.5)
            assert e["resident"] <= cap
    times = [e["t"] for e in log]
    assert times == sorted(times)
