"""Command-line entry point: gen, run, compare, sweep, analyze-entropy,
bench-matcher."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import metrics
from .cache_sim import LatencyModel
from .matcher import bench_matcher
from .offload_policy import ORACLE_NAMES, POLICY_ALIASES, POLICY_FACTORIES
from .sim_harness import (
    SWEEP_DIMENSIONS,
    RunConfig,
    ShapeMismatchError,
    cache_capacity_for_gb,
    compare_policies,
    events_to_jsonl,
    latency_cdf,
    run_simulation,
    split_workload,
    sweep,
    warm_store_from,
)
from .trace_model import (
    PRESET_SHAPES,
    ModelShape,
    SyntheticConfig,
    TraceFormatError,
    generate_synthetic,
    load_workload,
    save_workload,
    validate_trace,
)

log = logging.getLogger("expert_offload")

POLICY_CHOICES = sorted(POLICY_FACTORIES) + sorted(POLICY_ALIASES) + list(ORACLE_NAMES)
MATCHER_LIMIT_MS = 30.0


def _shape_from_args(args) -> ModelShape:
    shape = PRESET_SHAPES[args.shape]
    changes = {}
    if args.layers:
        changes["num_layers"] = args.layers
    if args.experts:
        changes["experts_per_layer"] = args.experts
    if args.top_k:
        changes["top_k"] = args.top_k
    if args.hidden_dim:
        changes["hidden_dim"] = args.hidden_dim
    return shape.replace(**changes) if changes else shape


def _add_sim_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", required=True, help="workload directory written by `gen`")
    p.add_argument("--warm-store", help="exported map store directory")
    p.add_argument("--history-fraction", type=float, default=0.7,
                   help="without --warm-store: share of requests used to warm the store (0 = none)")
    p.add_argument("--store-capacity", type=int, default=1024)
    p.add_argument("--cold-store", action="store_true", help="start with an empty map store")
    cap = p.add_mutually_exclusive_group()
    cap.add_argument("--cache-gb", type=float)
    cap.add_argument("--cache-experts", type=int)
    cap.add_argument("--cache-fraction", type=float, help="fraction of all offloadable experts")
    p.add_argument("--bandwidth-gbps", type=float, default=32.0)
    p.add_argument("--load-time-ms", type=float, help="override T_e directly")
    p.add_argument("--compute-ms-per-layer", type=float, default=2.0)
    p.add_argument("--match-latency-ms", type=float, default=0.5)
    p.add_argument("--prefetch-distance", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--freq-scope", choices=("request", "global"), default="request")
    p.add_argument("--abort-inflight", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the report here (.json or .csv)")
    p.add_argument("--extended", action="store_true", help="include all report fields")


def _config(args, workload, policy: str) -> RunConfig:
    shape = workload.shape
    lat = LatencyModel(
        channel_bandwidth_bytes_per_ms=args.bandwidth_gbps * 1e6,
        expert_size_bytes=shape.expert_size_bytes,
        per_layer_compute_ms=args.compute_ms_per_layer,
        match_latency_ms=args.match_latency_ms,
        load_time_override_ms=args.load_time_ms if args.load_time_ms is not None else shape.expert_load_time_ms,
    )
    if args.cache_gb is not None:
        cap = cache_capacity_for_gb(args.cache_gb, shape)
    elif args.cache_experts is not None:
        cap = args.cache_experts
    elif args.cache_fraction is not None:
        cap = int(round(args.cache_fraction * shape.total_experts))
    else:
        cap = None
    return RunConfig(
        shape=shape,
        policy=policy,
        latency=lat,
        cache_capacity=cap,
        store_capacity=args.store_capacity,
        prefetch_distance=args.prefetch_distance,
        batch_size=args.batch_size,
        warm_store=args.warm_store,
        cold_store=args.cold_store,
        seed=args.seed,
        freq_scope=args.freq_scope,
        abort_inflight=args.abort_inflight,
    )


def _load(args):
    """Returns (test workload, history workload or None)."""
    workload = load_workload(args.trace)
    problems = validate_trace(workload, workload.shape)
    if problems:
        for v in problems[:20]:
            print(f"invalid trace: {v}", file=sys.stderr)
        raise SystemExit(2)
    if args.warm_store or args.cold_store or args.history_fraction <= 0:
        return workload, None
    history, test = split_workload(workload, args.history_fraction, args.seed)
    log.info("split %d requests: %d history, %d test", len(workload), len(history), len(test))
    return test, history


def _store(args, history, cfg):
    if history is None or cfg.cold_store:
        return None
    return warm_store_from(history, cfg)


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _write_reports(reports, args) -> None:
    if args.out and args.out.endswith(".json"):
        _emit(metrics.reports_to_json(reports, args.extended) + "\n", args.out)
    else:
        _emit(metrics.reports_to_csv(reports, args.extended), args.out)


def cmd_gen(args) -> int:
    shape = _shape_from_args(args)
    if args.load_time_ms is not None:
        shape = shape.replace(expert_load_time_ms=args.load_time_ms)
    cfg = SyntheticConfig(
        shape=shape,
        num_clusters=args.clusters,
        requests_per_cluster=args.requests_per_cluster,
        iterations_range=(args.min_iterations, args.max_iterations),
        dirichlet_concentration=args.concentration,
        embedding_noise_sigma=args.noise_sigma,
        drift_sigma=args.drift_sigma,
        seed=args.seed,
        modes_per_cluster=args.modes,
        mean_interarrival_ms=args.interarrival_ms,
    )
    workload = generate_synthetic(cfg)
    save_workload(workload, args.out)
    print(f"wrote {len(workload)} requests ({workload.total_iterations} iterations) to {args.out}")
    return 0


def cmd_run(args) -> int:
    workload, history = _load(args)
    cfg = _config(args, workload, args.policy)
    res = run_simulation(workload, cfg, store=_store(args, history, cfg))
    if args.events:
        with open(args.events, "w", encoding="utf-8") as f:
            f.write(events_to_jsonl(res.events))
    if args.latency_cdf:
        with open(args.latency_cdf, "w", encoding="utf-8") as f:
            f.write("latency_ms,cdf\n")
            for lat, q in latency_cdf(res.request_latencies.values()):
                f.write(f"{lat!r},{q!r}\n")
    _write_reports([res.report], args)
    return 0


def cmd_compare(args) -> int:
    workload, history = _load(args)
    cfg = _config(args, workload, args.policies[0])
    reports = compare_policies(workload, cfg, args.policies, store=_store(args, history, cfg), baseline=args.baseline)
    _write_reports(reports, args)
    return 0


def cmd_sweep(args) -> int:
    workload, history = _load(args)
    cfg = _config(args, workload, args.policies[0])
    if args.dimension == "cache_capacity" and args.fractions:
        values = [int(round(float(v) * workload.shape.total_experts)) for v in args.values]
    else:
        values = [int(v) for v in args.values]
    res = sweep(workload, cfg, args.dimension, values, args.policies, history=history)
    rows = res.rows()
    if args.out and args.out.endswith(".json"):
        _emit(json.dumps({"rows": rows, "spearman": res.trends}, indent=1) + "\n", args.out)
    else:
        import csv
        import io

        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        for name, rho in res.trends.items():
            buf.write(f"# spearman {name} {rho!r}\n")
        _emit(buf.getvalue(), args.out)
    return 0


def cmd_entropy(args) -> int:
    workload = load_workload(args.trace)
    fine = metrics.entropy_profile(workload, "fine", args.upto)
    coarse = metrics.entropy_profile(workload, "coarse", args.upto, coarse_mode=args.coarse_mode)
    lines = ["layer,fine,coarse"]
    for layer, (f, c) in enumerate(zip(fine.per_layer_mean_entropy, coarse.per_layer_mean_entropy)):
        lines.append(f"{layer},{f!r},{c!r}")
    lines.append(f"mean,{fine.mean!r},{coarse.mean!r}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_bench(args) -> int:
    res = bench_matcher(args.batch, args.capacity, args.hidden_dim, args.layers, args.experts, args.repeats)
    res["limit_ms"] = args.limit_ms
    res["ok"] = res["median_ms"] < args.limit_ms
    print(json.dumps(res, indent=1))
    return 0 if res["ok"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expert-offload", description="MoE expert offloading simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic clustered workload")
    p.add_argument("--out", required=True)
    p.add_argument("--shape", choices=sorted(PRESET_SHAPES), default="mixtral-8x7b")
    p.add_argument("--layers", type=int)
    p.add_argument("--experts", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--load-time-ms", type=float, help="record a fixed T_e in the shape")
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--requests-per-cluster", type=int, default=10)
    p.add_argument("--min-iterations", type=int, default=8)
    p.add_argument("--max-iterations", type=int, default=16)
    p.add_argument("--concentration", type=float, default=0.1)
    p.add_argument("--noise-sigma", type=float, default=0.2)
    p.add_argument("--drift-sigma", type=float, default=0.05)
    p.add_argument("--modes", type=int, default=4)
    p.add_argument("--interarrival-ms", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="simulate one policy")
    _add_sim_args(p)
    p.add_argument("--policy", choices=POLICY_CHOICES, default="fmoe")
    p.add_argument("--events", help="write the event log as JSONL")
    p.add_argument("--latency-cdf", help="write the request latency CDF as CSV")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="simulate several policies on one workload")
    _add_sim_args(p)
    p.add_argument("--policies", nargs="+", choices=POLICY_CHOICES,
                   default=["fmoe", "hit_count", "lfu", "lru", "no_prefetch"])
    p.add_argument("--baseline")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="vary one configuration dimension")
    _add_sim_args(p)
    p.add_argument("--dimension", choices=SWEEP_DIMENSIONS, required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--fractions", action="store_true", help="cache values are fractions of all experts")
    p.add_argument("--policies", nargs="+", choices=POLICY_CHOICES, default=["fmoe"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-entropy", help="fine vs coarse per-layer entropy")
    p.add_argument("--trace", required=True)
    p.add_argument("--upto", type=int, help="only the first N iterations of each request")
    p.add_argument("--coarse-mode", choices=("mass", "counts"), default="mass")
    p.add_argument("--out")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("bench-matcher", help="time batched map matching")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--capacity", type=int, default=1024)
    p.add_argument("--hidden-dim", type=int, default=1024)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--limit-ms", type=float, default=MATCHER_LIMIT_MS)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TraceFormatError, ShapeMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
