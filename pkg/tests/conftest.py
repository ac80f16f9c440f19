import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from expert_offload.trace_model import ModelShape, SyntheticConfig, Workload, generate_synthetic, make_request

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_shape(L=4, J=4, K=2, h=8, load_ms=1.0):
    return ModelShape(L, J, K, h, 1000, expert_load_time_ms=load_ms)


def one_hot_maps(shape, sets):
    """Maps whose top-K per layer are exactly the given expert sets."""
    maps = []
    for per_layer in sets:
        m = np.full((shape.num_layers, shape.experts_per_layer), 0.0)
        for layer, experts in enumerate(per_layer):
            for rank, j in enumerate(experts):
                m[layer, j] = 1.0 - 0.01 * rank
            m[layer] /= m[layer].sum()
        maps.append(m)
    return maps


def workload_from_sets(shape, requests, seed=0):
    """requests: list of per-iteration lists of per-layer expert tuples."""
    rng = np.random.default_rng(seed)
    reqs = []
    for i, iters in enumerate(requests):
        emb = rng.standard_normal(shape.hidden_dim)
        reqs.append(make_request(f"q{i}", emb, one_hot_maps(shape, iters), shape.top_k))
    return Workload(shape, tuple(reqs))


@pytest.fixture
def small_shape():
    return tiny_shape()


@pytest.fixture(scope="session")
def clustered():
    shape = ModelShape(8, 8, 2, 16, 1000, expert_load_time_ms=1.0)
    cfg = SyntheticConfig(shape, num_clusters=4, requests_per_cluster=5, iterations_range=(4, 8), seed=3)
    return generate_synthetic(cfg)


# acceptance criteria outcomes, printed once at the end of the run
ACCEPTANCE: dict = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
