"""Trace-driven simulator for fine-grained expert offloading in MoE serving."""

from .cache_sim import ExpertCache, LatencyModel
from .map_store import ExpertMapStore, StoreConfig, StoredContext, build_store
from .matcher import match_initial, match_layer
from .metrics import RunReport, entropy_profile, shannon_entropy
from .offload_policy import (
    eviction_priority,
    make_policy,
    prefetch_priority,
    select_prefetch_set,
    selection_threshold,
)
from .oracles import belady_demand_oracle, brute_force_offline_optimal
from .sim_harness import RunConfig, compare_policies, replay, run_simulation, sweep
from .trace_model import (
    MIXTRAL_8X7B,
    PHI35_MOE,
    QWEN15_MOE,
    ModelShape,
    SyntheticConfig,
    Workload,
    generate_synthetic,
    load_workload,
    save_workload,
    validate_trace,
)

__version__ = "0.1.0"
