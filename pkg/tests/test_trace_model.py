import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from expert_offload.metrics import shannon_entropy
from expert_offload.trace_model import (
    MIXTRAL_8X7B,
    ExpertMap,
    IterationRecord,
    ModelShape,
    RequestTrace,
    SyntheticConfig,
    TraceIOError,
    TraceParseError,
    TraceShapeError,
    Workload,
    generate_synthetic,
    load_workload,
    make_request,
    save_workload,
    top_k_indices,
    validate_trace,
)

from conftest import tiny_shape


def test_model_shape_invariants():
    with pytest.raises(ValueError):
        ModelShape(4, 4, 5, 8, 10)
    with pytest.raises(ValueError):
        ModelShape(0, 4, 1, 8, 10)
    with pytest.raises(ValueError):
        ModelShape(4, 4, 0, 8, 10)
    s = ModelShape(4, 4, 2, 8, 10)
    assert (s.L, s.J, s.K, s.total_experts) == (4, 4, 2, 16)
    assert ModelShape.from_dict(s.to_dict()) == s


def test_mixtral_expert_size():
    # 3 projection matrices of 4096 x 14336 at 2 bytes each
    assert MIXTRAL_8X7B.expert_size_bytes == 352_321_536
    assert (MIXTRAL_8X7B.num_layers, MIXTRAL_8X7B.experts_per_layer, MIXTRAL_8X7B.top_k) == (32, 8, 2)


def test_top_k_ties_lowest_index():
    assert top_k_indices(np.array([0.25, 0.25, 0.25, 0.25]), 2) == (0, 1)
    assert top_k_indices(np.array([0.1, 0.3, 0.3, 0.3]), 2) == (1, 2)
    assert top_k_indices(np.array([0.5, 0.1, 0.4]), 2) == (0, 2)


@given(st.lists(st.integers(0, 5), min_size=2, max_size=8), st.integers(1, 8))
def test_top_k_matches_sort_oracle(vals, k):
    k = min(k, len(vals))
    row = np.array(vals, dtype=np.float64)
    oracle = sorted(range(len(vals)), key=lambda j: (-vals[j], j))[:k]
    assert top_k_indices(row, k) == tuple(sorted(oracle))


def _valid_workload(shape=None):
    shape = shape or tiny_shape()
    cfg = SyntheticConfig(shape, num_clusters=2, requests_per_cluster=2, iterations_range=(2, 3), seed=5)
    return generate_synthetic(cfg)


def test_validate_well_formed_is_empty():
    w = _valid_workload()
    assert validate_trace(w, w.shape) == []


def test_validate_row_sum():
    shape = tiny_shape()
    m = np.full((4, 4), 0.25)
    m[2] = [0.25, 0.25, 0.25, 0.23]
    w = Workload(shape, (make_request("a", np.ones(8), [m], 2),))
    v = validate_trace(w, shape)
    assert len(v) == 1
    assert v[0].rule == "row-sum" and v[0].layer == 2 and v[0].request_id == "a"
    assert "row sum 0.98 outside 1±1e-4" in v[0].message


def test_validate_topk_mismatch():
    shape = tiny_shape()
    m = np.full((4, 4), 0.25)
    m[1] = [0.4, 0.3, 0.2, 0.1]
    act = [(0, 1), (2, 3), (0, 1), (0, 1)]
    it = IterationRecord(0, ExpertMap(m), activated=act)
    w = Workload(shape, (RequestTrace("a", np.ones(8), (it,)),))
    v = validate_trace(w, shape)
    assert [x.rule for x in v] == ["topk-mismatch"]
    assert "activation/top-K mismatch" in v[0].message and v[0].layer == 1 and v[0].iteration == 0


def test_validate_other_rules():
    shape = tiny_shape()
    good = np.full((4, 4), 0.25)
    reqs = (
        make_request("a", np.zeros(8), [good], 2),
        make_request("a", np.ones(5), [good], 2),
        make_request("b", np.ones(8), [np.full((3, 4), 0.25)], 2),
    )
    rules = {v.rule for v in validate_trace(Workload(shape, reqs), shape)}
    assert {"embedding-norm", "duplicate-id", "embedding-length", "row-count"} <= rules
    neg = good.copy()
    neg[0] = [1.2, -0.2, 0.0, 0.0]
    rules = {v.rule for v in validate_trace(Workload(shape, (make_request("n", np.ones(8), [neg], 2),)), shape)}
    assert "negative-entry" in rules
    it = IterationRecord(3, ExpertMap(good), top_k=2)
    w = Workload(shape, (RequestTrace("i", np.ones(8), (it,)),))
    assert [v.rule for v in validate_trace(w, shape)] == ["iteration-index"]


def test_generate_deterministic():
    shape = tiny_shape()
    a = generate_synthetic(SyntheticConfig(shape, seed=1))
    b = generate_synthetic(SyntheticConfig(shape, seed=1))
    c = generate_synthetic(SyntheticConfig(shape, seed=2))
    assert a == b
    assert a != c


def test_generate_embeddings_and_labels():
    w = _valid_workload()
    for r in w:
        assert abs(np.linalg.norm(r.embedding) - 1.0) < 1e-5
    labels = w.labels
    assert set(labels) == {r.request_id for r in w}
    assert sorted(labels.values()) == [0, 0, 1, 1]


def test_activated_sets_are_top_k():
    w = _valid_workload(ModelShape(6, 8, 3, 8, 10))
    for r in w:
        for it in r.iterations:
            for layer, act in enumerate(it.activated):
                assert act == top_k_indices(it.map.distributions[layer], 3)


def _mean_row_entropy(conc, n_rows=1000):
    shape = ModelShape(10, 8, 2, 4, 10)
    cfg = SyntheticConfig(shape, num_clusters=1, requests_per_cluster=10, iterations_range=(10, 10),
                          dirichlet_concentration=conc, seed=11)
    w = generate_synthetic(cfg)
    rows = [row for r in w for it in r.iterations for row in it.map.distributions]
    assert len(rows) == n_rows
    return float(np.mean([shannon_entropy(row) for row in rows]))


def test_low_concentration_low_entropy():
    assert _mean_row_entropy(0.01) < 0.5


def test_high_concentration_near_uniform():
    h = _mean_row_entropy(1000.0)
    assert abs(h - math.log(8)) / math.log(8) < 0.05


def test_config_rejects_bad_values():
    shape = tiny_shape()
    with pytest.raises(ValueError):
        SyntheticConfig(shape, dirichlet_concentration=0.0)
    with pytest.raises(ValueError):
        SyntheticConfig(shape, drift_sigma=-1.0)
    with pytest.raises(ValueError):
        SyntheticConfig(shape, iterations_range=(3, 2))
    cfg = SyntheticConfig(shape, seed=9)
    assert SyntheticConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_round_trip(tmp_path):
    w = _valid_workload()
    save_workload(w, tmp_path / "w")
    back = load_workload(tmp_path / "w")
    assert back == w
    assert back.labels == w.labels


def test_round_trip_with_arrivals(tmp_path):
    cfg = SyntheticConfig(tiny_shape(), num_clusters=2, requests_per_cluster=3, mean_interarrival_ms=7.5, seed=4)
    w = generate_synthetic(cfg)
    assert any(r.arrival_time > 0 for r in w)
    save_workload(w, tmp_path / "w")
    assert load_workload(tmp_path / "w") == w


def test_save_refuses_invalid(tmp_path):
    shape = tiny_shape()
    bad = Workload(shape, (make_request("a", np.zeros(8), [np.full((4, 4), 0.25)], 2),))
    with pytest.raises(ValueError):
        save_workload(bad, tmp_path / "bad")


def test_truncated_file_names_last_record(tmp_path):
    w = _valid_workload()
    path = tmp_path / "w"
    save_workload(w, path)
    data = (path / "requests.jsonl").read_bytes()
    lines = data.split(b"\n")
    cut = b"\n".join(lines[:2]) + b"\n" + lines[2][: len(lines[2]) // 2]
    (path / "requests.jsonl").write_bytes(cut)
    with pytest.raises(TraceParseError) as exc:
        load_workload(path)
    err = exc.value
    assert err.last_complete == w.requests[1].request_id
    assert err.line_no == 3
    assert err.offset == len(lines[0]) + len(lines[1]) + 2


def test_shape_mismatch_names_request_and_layer(tmp_path):
    w = _valid_workload()
    path = tmp_path / "w"
    save_workload(w, path)
    lines = (path / "requests.jsonl").read_text().splitlines()
    rec = json.loads(lines[1])
    rec["iterations"][1][2] = rec["iterations"][1][2][:3]
    lines[1] = json.dumps(rec)
    (path / "requests.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceShapeError) as exc:
        load_workload(path)
    assert (exc.value.request_id, exc.value.iteration, exc.value.layer) == (w.requests[1].request_id, 1, 2)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(TraceIOError):
        load_workload(tmp_path / "nope")


def test_bad_header_is_parse_error(tmp_path):
    w = _valid_workload()
    save_workload(w, tmp_path / "w")
    (tmp_path / "w" / "meta.json").write_text("{not json")
    with pytest.raises(TraceParseError):
        load_workload(tmp_path / "w")


@given(st.integers(0, 2**32 - 1))
def test_float32_text_round_trip(seed):
    rng = np.random.default_rng(seed)
    vals = rng.dirichlet(np.full(8, 0.3)).astype(np.float32)
    text = ",".join(format(float(v), ".9g") for v in vals)
    back = np.array([float(x) for x in text.split(",")], dtype=np.float32)
    assert np.array_equal(back, vals)
