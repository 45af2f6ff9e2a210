"""Command-line front end: gen-trace, calibrate, assign, prefetch-eval,
cache-eval, simulate, sweep, and report subcommands.

Flags can be preloaded from a JSON config document (``--config``); explicit
flags override file values.  Every artifact written embeds the resolved
parameters and seed, and reruns with identical parameters produce
byte-identical files.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics_report
from .assignment import AssignmentInstance, makespan
from .cache import replay_trace
from .cost_model import default_cost_model, load_cost_model
from .errors import ConfigError, MoesimError
from .prefetch import (Predictor, activation_frequency_table,
                       calibrate_residuals, feature_predictor,
                       predict_next_layer, prefetch_accuracy, random_predictor,
                       residual_predictor)
from .simulator import SimConfig, run_assignment_policy, simulate_run
from .trace import (ModelConfig, Trace, generate_synthetic_trace,
                    load_gate_params, load_residuals, load_trace,
                    save_gate_params, save_residuals, save_trace)

FORMAT_TAG = "moesim-report-v1"


def _gates_path_for(trace_path: str) -> Path:
    return Path(str(trace_path) + ".gates")


def _attach_gates(trace: Trace, trace_path: str, gates_arg: str | None) -> Trace:
    path = Path(gates_arg) if gates_arg else _gates_path_for(trace_path)
    if path.exists():
        trace.gate_params = load_gate_params(path)
        trace.gate_params.check_shape(trace.model_config)
    elif gates_arg:
        raise ConfigError(f"gate parameter file {path} not found")
    return trace


def _resolve_cost_model(arg: str | None):
    if arg is None or arg == "default":
        return default_cost_model()
    return load_cost_model(arg)


def _model_config_from_args(args) -> ModelConfig:
    if args.model:
        return ModelConfig.preset(args.model)
    missing = [name for name in ("layers", "experts", "top_k", "hidden_dim")
               if getattr(args, name) is None]
    if missing:
        raise ConfigError(
            f"either --model <preset> or all of --layers/--experts/--top-k/"
            f"--hidden-dim are required (missing: {', '.join(missing)})")
    return ModelConfig(num_layers=args.layers, num_routed_experts=args.experts,
                       num_shared_experts=args.shared_experts,
                       top_k=args.top_k, hidden_dim=args.hidden_dim)


def _resolved_spec(subcommand: str, args: argparse.Namespace) -> dict:
    skip = {"config", "func"}
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return {"format": FORMAT_TAG, "subcommand": subcommand, "resolved": resolved}


def _write_json(path, doc: dict) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _write_text(path, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# gen-trace
# ---------------------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    config = _model_config_from_args(args)
    trace = generate_synthetic_trace(
        config, batch_size=args.batch_size, num_steps=args.steps,
        locality=args.locality, drift_scale=args.drift_scale,
        noise_scale=args.noise_scale, seed=args.seed, phase=args.phase)
    spec = _resolved_spec("gen-trace", args)
    trace.generator_params["resolved_spec"] = spec
    save_trace(trace, args.out)
    gates_out = args.gates_out or str(_gates_path_for(args.out))
    save_gate_params(trace.gate_params, gates_out, spec=spec)
    print(f"wrote {trace.num_steps}-step {args.phase} trace to {args.out} "
          f"(gates: {gates_out})")
    return 0


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    trace = _attach_gates(load_trace(args.trace), args.trace, args.gates)
    residuals = calibrate_residuals(trace)
    save_residuals(residuals, args.out, spec=_resolved_spec("calibrate", args))
    print(f"wrote residual vectors for {residuals.num_layers} layers to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# assign
# ---------------------------------------------------------------------------

def cmd_assign(args) -> int:
    with open(args.instance) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.instance}: malformed instance file: {e}")
    if "workloads" not in doc:
        raise ConfigError(f"{args.instance}: instance file needs a 'workloads' array")
    workloads = np.asarray(doc["workloads"], dtype=np.int64)
    resident = np.asarray(doc.get("resident", [False] * len(workloads)), dtype=bool)
    cm = _resolve_cost_model(args.cost_model or doc.get("cost_model"))
    capacity = args.gpu_capacity if args.gpu_capacity is not None \
        else doc.get("gpu_capacity")
    instance = AssignmentInstance(workloads=workloads, resident=resident,
                                  cost_model=cm, gpu_capacity=capacity)
    sim_cfg = SimConfig(cost_model=cm, assignment_policy=args.policy,
                        beam_width=args.beam_width, threshold=args.threshold,
                        gpu_capacity=capacity,
                        exact_solver_limit=args.exact_limit)
    assignment, _ = run_assignment_policy(instance, sim_cfg)
    t_cpu, t_gpu, t_layer = makespan(instance, assignment)
    out = {
        "C": assignment.C.tolist(),
        "G": assignment.G.tolist(),
        "T_cpu_ms": t_cpu,
        "T_gpu_ms": t_gpu,
        "T_layer_ms": t_layer,
        "policy": args.policy,
        "spec": _resolved_spec("assign", args),
    }
    if args.out:
        _write_json(args.out, out)
    print(f"{args.policy}: T_cpu={t_cpu:.3f} ms, T_gpu={t_gpu:.3f} ms, "
          f"T_layer={t_layer:.3f} ms, gpu_experts={int(assignment.G.sum())}")
    return 0


# ---------------------------------------------------------------------------
# prefetch-eval
# ---------------------------------------------------------------------------

def _build_cli_predictor(args, trace: Trace, n_experts: int) -> Predictor:
    kind = args.predictor
    if kind == "residual":
        if not args.residuals:
            raise ConfigError("--predictor residual requires --residuals")
        residuals = load_residuals(args.residuals)
        residuals.check_shape(trace.model_config)
        return residual_predictor(residuals)
    if kind == "feature":
        return feature_predictor()
    if kind == "statistical":
        cal_path = args.calibration_trace
        if not cal_path:
            raise ConfigError("--predictor statistical requires "
                              "--calibration-trace")
        return Predictor(kind="statistical",
                         frequency_table=activation_frequency_table(
                             load_trace(cal_path)))
    if kind == "random":
        return random_predictor(seed=args.seed, n_experts=n_experts)
    raise ConfigError(f"unknown predictor kind {kind!r}")


def cmd_prefetch_eval(args) -> int:
    trace = _attach_gates(load_trace(args.trace), args.trace, args.gates)
    cfg = trace.model_config
    ks = sorted({int(x) for x in args.topk.split(",")})
    if any(k < 1 for k in ks):
        raise ConfigError("--topk values must be >= 1")
    predictor = _build_cli_predictor(args, trace, cfg.num_routed_experts)
    if predictor.kind in ("residual", "feature"):
        if not trace.has_features or trace.gate_params is None:
            raise ConfigError(f"{predictor.kind} prediction needs a featureful "
                              f"trace with gate parameters")
    size = max(ks)
    sums: dict[int, dict[int, list]] = {k: {} for k in ks}
    for step in trace.steps:
        for l in range(cfg.num_layers - 1):
            hidden_l = step.hidden[l] if step.hidden is not None else None
            gate_next = (trace.gate_params.layer(l + 1)
                         if trace.gate_params is not None else None)
            decision = predict_next_layer(predictor, hidden_l, gate_next,
                                          cfg.top_k, size, l)
            true_next = step.workloads[l + 1]
            for k in ks:
                sums[k].setdefault(l + 1, []).append(
                    prefetch_accuracy(decision.prefetch_set, true_next, k))
    rows = []
    for k in ks:
        for layer in sorted(sums[k]):
            rows.append([args.predictor, layer, k,
                         f"{float(np.mean(sums[k][layer]))!r}"])
        overall = float(np.mean([a for acc in sums[k].values() for a in acc]))
        rows.append([args.predictor, "all", k, f"{overall!r}"])
    spec = json.dumps(_resolved_spec("prefetch-eval", args), sort_keys=True)
    text = metrics_report._csv_text(["predictor", "layer", "k", "accuracy"],
                                    rows, [f"spec: {spec}"])
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# cache-eval
# ---------------------------------------------------------------------------

def _capacity_from_args(args, n_experts: int) -> int:
    if args.cache_capacity is not None:
        return args.cache_capacity
    if args.cache_ratio is not None:
        cap = int(round(args.cache_ratio * n_experts))
        return min(max(cap, 1), n_experts - 1)
    raise ConfigError("either --cache-capacity or --cache-ratio is required")


def cmd_cache_eval(args) -> int:
    trace = _attach_gates(load_trace(args.trace), args.trace, args.gates)
    cfg = trace.model_config
    capacity = _capacity_from_args(args, cfg.num_routed_experts)
    u_size = args.u_size
    if u_size is None:
        from .simulator import default_u_size
        u_size = default_u_size(cfg.num_routed_experts, capacity)
    layers = (range(cfg.num_layers) if args.layer is None
              else [args.layer])
    all_records = []
    rows = []
    for layer in layers:
        stats, _ = replay_trace(trace, layer, capacity, args.w_size, u_size,
                                policy=args.policy, seed=args.seed,
                                lookup_top=args.lookup_top)
        all_records.extend(stats.records)
        rows.append(["layer", layer, f"{stats.hit_rate('overall')!r}"])
    from .cache import CacheStats
    combined = CacheStats(records=all_records)
    rows.insert(0, ["overall", "", f"{combined.hit_rate('overall')!r}"])
    group_rates, empty = combined.hit_rate("per-token-group",
                                           group_size=args.group_size)
    for g in sorted(group_rates):
        rows.append(["group", g, f"{group_rates[g]!r}"])
    for g in empty:
        rows.append(["group", g, "excluded"])
    spec = json.dumps(_resolved_spec("cache-eval", args), sort_keys=True)
    text = metrics_report._csv_text(["scope", "key", "hit_rate"], rows,
                                    [f"spec: {spec}"])
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# simulate and sweep
# ---------------------------------------------------------------------------

def _sim_config_from_args(args, trace: Trace) -> SimConfig:
    cm = _resolve_cost_model(args.cost_model)
    cfg = trace.model_config
    residuals = load_residuals(args.residuals) if args.residuals else None
    freq = None
    if args.prefetch == "statistical":
        if not args.calibration_trace:
            raise ConfigError("--prefetch statistical requires "
                              "--calibration-trace")
        freq = activation_frequency_table(load_trace(args.calibration_trace))
    cache_policy = args.cache if args.cache not in (None, "none") else None
    capacity = 0
    if cache_policy is not None:
        capacity = _capacity_from_args(args, cfg.num_routed_experts)
    prefetch_kind = args.prefetch if args.prefetch not in (None, "none") else None
    if prefetch_kind == "residual" and residuals is None:
        raise ConfigError("--prefetch residual requires --residuals (run the "
                          "calibrate subcommand first)")
    return SimConfig(
        cost_model=cm,
        assignment_policy=args.policy,
        beam_width=args.beam_width,
        threshold=args.threshold,
        gpu_capacity=args.gpu_capacity,
        exact_solver_limit=args.exact_limit,
        prefetch_kind=prefetch_kind,
        prefetch_size=args.prefetch_size,
        residuals=residuals,
        frequency_table=freq,
        cache_policy=cache_policy,
        cache_capacity=capacity,
        w_size=args.w_size,
        u_size=args.u_size,
        insert_demand_fetched=args.insert_demand_fetched,
        insert_prefetched=args.insert_prefetched,
        scheduling_overhead_ms=args.scheduling_overhead_ms,
        solver_node_cost_ms=args.solver_node_cost_ms,
        prefetch_compute_ms=args.prefetch_compute_ms,
        non_moe_override=args.non_moe_layer_time,
        seed=args.seed,
        keep_timelines=args.keep_timelines,
    )


def cmd_simulate(args) -> int:
    trace = _attach_gates(load_trace(args.trace), args.trace, args.gates)
    config = _sim_config_from_args(args, trace)
    report = simulate_run(trace, config)
    doc = report.to_dict()
    doc["label"] = args.label or Path(args.trace).stem
    doc["spec"]["cli"] = _resolved_spec("simulate", args)
    _write_json(args.out, doc)
    if args.timelines_out:
        rows = [[t["token_index"], t["layer"], f"{t['cpu_busy']!r}",
                 f"{t['gpu_makespan']!r}", f"{t['layer_latency']!r}",
                 f"{t['sum_demand_trans']!r}", f"{t['sum_compute']!r}"]
                for t in report.timelines]
        text = metrics_report._csv_text(
            ["token_index", "layer", "cpu_busy", "gpu_makespan",
             "layer_latency", "sum_demand_trans", "sum_compute"], rows,
            [f"spec: {json.dumps(_resolved_spec('simulate', args), sort_keys=True)}"])
        _write_text(args.timelines_out, text)
    print(f"{doc['label']}: {report.tokens_per_second:.3f} tokens/s, "
          f"mean token latency {report.mean_token_latency_ms:.3f} ms, "
          f"PCIe busy fraction {report.pcie_busy_fraction:.3f}")
    return 0


_SWEEP_STATE: dict = {}

SWEEPABLE = ("policy", "prefetch", "prefetch_size", "cache", "cache_capacity",
             "cache_ratio", "w_size", "u_size", "beam_width", "seed",
             "gpu_capacity", "threshold")


def _sweep_init(trace_path: str, gates: str | None, base_args: dict) -> None:
    _SWEEP_STATE["trace"] = _attach_gates(load_trace(trace_path), trace_path,
                                          gates)
    _SWEEP_STATE["base_args"] = base_args


def _sweep_cell(cell: dict) -> dict:
    ns = argparse.Namespace(**{**_SWEEP_STATE["base_args"], **cell})
    trace = _SWEEP_STATE["trace"]
    config = _sim_config_from_args(ns, trace)
    report = simulate_run(trace, config)
    row = dict(cell)
    row.update({
        "tokens_per_second": report.tokens_per_second,
        "mean_token_latency_ms": report.mean_token_latency_ms,
        "pcie_busy_fraction": report.pcie_busy_fraction,
        "cache_hit_rate": report.cache_hit_rate,
        "prefetch_top1": (float(np.mean(list(report.prefetch_accuracy_top1.values())))
                          if report.prefetch_accuracy_top1 else None),
    })
    return row


def _parse_sweep_values(name: str, raw: str) -> list:
    out = []
    for tok in str(raw).split(","):
        tok = tok.strip()
        if tok in ("none", "None"):
            out.append(None)
        elif name in ("policy", "prefetch", "cache"):
            out.append(tok)
        elif name in ("cache_ratio", "threshold"):
            out.append(float(tok))
        else:
            out.append(int(tok))
    return out


def cmd_sweep(args) -> int:
    base_args = vars(args).copy()
    base_args.pop("func", None)
    axes = []
    for name in SWEEPABLE:
        raw = base_args.get(name)
        if raw is None:
            continue
        values = _parse_sweep_values(name, raw)
        axes.append((name, values))
    fixed = {name: vals[0] for name, vals in axes if len(vals) == 1}
    varied = [(name, vals) for name, vals in axes if len(vals) > 1]
    base_args.update(fixed)
    for name, _ in varied:
        base_args.pop(name, None)

    cells = []
    names = [name for name, _ in varied]
    for combo in itertools.product(*(vals for _, vals in varied)):
        cells.append(dict(zip(names, combo)))
    if not cells:
        cells = [{}]

    if args.jobs > 1:
        with ProcessPoolExecutor(
                max_workers=args.jobs, initializer=_sweep_init,
                initargs=(args.trace, args.gates, base_args)) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        _sweep_init(args.trace, args.gates, base_args)
        rows = [_sweep_cell(cell) for cell in cells]

    header = names + ["tokens_per_second", "mean_token_latency_ms",
                      "pcie_busy_fraction", "cache_hit_rate", "prefetch_top1"]
    csv_rows = []
    for row in rows:
        csv_rows.append([row.get(h) if not isinstance(row.get(h), float)
                         else f"{row[h]!r}" for h in header])
    spec = json.dumps(_resolved_spec("sweep", args), sort_keys=True, default=str)
    text = metrics_report._csv_text(header, csv_rows, [f"spec: {spec}"])
    _write_text(args.out, text)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    if args.table == "heatmap":
        if not args.trace:
            raise ConfigError("--table heatmap requires --trace")
        trace = load_trace(args.trace)
        table = metrics_report.locality_heatmap(trace, args.layer, args.top_m)
        text = metrics_report.heatmap_csv(
            table, spec=_resolved_spec("report", args)["resolved"])
    else:
        if not args.reports:
            raise ConfigError(f"--table {args.table} requires at least one "
                              f"run report file")
        reports = []
        for path in args.reports:
            with open(path) as f:
                try:
                    rep = json.load(f)
                except json.JSONDecodeError as e:
                    raise ConfigError(f"{path}: malformed report file: {e}")
            rep.setdefault("label", Path(path).stem)
            reports.append(rep)
        builders = {
            "breakdown": metrics_report.breakdown_table,
            "hit-rate-by-group": metrics_report.hit_rate_by_group_table,
            "prefetch-accuracy": metrics_report.prefetch_accuracy_table,
            "pcie-fraction": metrics_report.pcie_fraction_table,
            "load-balance": metrics_report.load_balance_csv,
        }
        text = builders[args.table](reports)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=("deepseek", "qwen", "mixtral"),
                   help="model shape preset")
    p.add_argument("--layers", type=int, help="MoE layer count")
    p.add_argument("--experts", type=int, help="routed experts per layer")
    p.add_argument("--shared-experts", type=int, default=0)
    p.add_argument("--top-k", type=int, help="activated experts per token")
    p.add_argument("--hidden-dim", type=int)


def _add_sim_flags(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    typ = str if sweep else None
    p.add_argument("--cost-model", default="default",
                   help="cost model file, or 'default' for the bundled profile")
    p.add_argument("--policy", default="greedy",
                   **({"type": str} if sweep else
                      {"choices": ("greedy", "optimal", "beam", "all-cpu",
                                   "all-gpu", "static-threshold")}))
    p.add_argument("--beam-width", type=typ or int, default=2)
    p.add_argument("--threshold", type=typ or float, default=None,
                   help="static-threshold cutoff in workload units")
    p.add_argument("--gpu-capacity", type=typ or int, default=None,
                   help="max newly transferred experts per layer")
    p.add_argument("--exact-limit", type=int, default=24)
    p.add_argument("--prefetch", default=None,
                   help="predictor kind: residual|feature|statistical|random|none")
    p.add_argument("--prefetch-size", type=typ or int, default=0)
    p.add_argument("--residuals", default=None, help="residual sidecar file")
    p.add_argument("--calibration-trace", default=None,
                   help="trace for the statistical predictor's table")
    p.add_argument("--cache", default=None,
                   help="cache policy: workload|lru|score|none")
    p.add_argument("--cache-capacity", type=typ or int, default=None)
    p.add_argument("--cache-ratio", type=typ or float, default=None,
                   help="cached experts per layer as a fraction of N")
    p.add_argument("--w-size", type=typ or int, default=4)
    p.add_argument("--u-size", type=typ or int, default=None)
    p.add_argument("--insert-demand-fetched", action="store_true")
    p.add_argument("--insert-prefetched", action="store_true")
    p.add_argument("--scheduling-overhead-ms", type=float, default=0.0)
    p.add_argument("--solver-node-cost-ms", type=float, default=0.0)
    p.add_argument("--prefetch-compute-ms", type=float, default=0.0)
    p.add_argument("--non-moe-layer-time", type=float, default=None)
    p.add_argument("--seed", type=typ or int, default=0)
    p.add_argument("--gates", default=None,
                   help="gate sidecar (default: <trace>.gates when present)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesim",
        description="Trace-driven simulator for hybrid CPU/GPU MoE offloading")
    parser.add_argument("--config", default=None,
                        help="JSON file of flag defaults; explicit flags win")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic trace")
    _add_model_flags(p)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--locality", type=float, default=0.9)
    p.add_argument("--drift-scale", type=float, default=0.0)
    p.add_argument("--noise-scale", type=float, default=0.0)
    p.add_argument("--phase", choices=("prefill", "decode"), default="decode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--gates-out", default=None)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("calibrate", help="calibrate residual vectors")
    p.add_argument("--trace", required=True)
    p.add_argument("--gates", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("assign", help="solve one placement instance")
    p.add_argument("--instance", required=True,
                   help="JSON file with workloads/resident/gpu_capacity")
    p.add_argument("--cost-model", default=None)
    p.add_argument("--policy", default="greedy",
                   choices=("greedy", "optimal", "beam", "all-cpu", "all-gpu",
                            "static-threshold"))
    p.add_argument("--beam-width", type=int, default=2)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--gpu-capacity", type=int, default=None)
    p.add_argument("--exact-limit", type=int, default=24)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("prefetch-eval", help="per-layer prediction accuracy")
    p.add_argument("--trace", required=True)
    p.add_argument("--gates", default=None)
    p.add_argument("--predictor", required=True,
                   choices=("residual", "feature", "statistical", "random"))
    p.add_argument("--residuals", default=None)
    p.add_argument("--calibration-trace", default=None)
    p.add_argument("--topk", default="1,2", help="comma-separated k values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_prefetch_eval)

    p = sub.add_parser("cache-eval", help="replay a trace against a cache policy")
    p.add_argument("--trace", required=True)
    p.add_argument("--gates", default=None)
    p.add_argument("--policy", default="workload",
                   choices=("workload", "lru", "score"))
    p.add_argument("--cache-capacity", type=int, default=None)
    p.add_argument("--cache-ratio", type=float, default=None)
    p.add_argument("--w-size", type=int, default=4)
    p.add_argument("--u-size", type=int, default=None)
    p.add_argument("--layer", type=int, default=None,
                   help="single layer to replay (default: all)")
    p.add_argument("--lookup-top", type=int, default=None,
                   help="experts looked up per step (default: cache capacity)")
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_cache_eval)

    p = sub.add_parser("simulate", help="run the full simulator over a trace")
    p.add_argument("--trace", required=True)
    _add_sim_flags(p)
    p.add_argument("--label", default=None)
    p.add_argument("--keep-timelines", action="store_true")
    p.add_argument("--timelines-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="Cartesian sweep over flag value lists")
    p.add_argument("--trace", required=True)
    _add_sim_flags(p, sweep=True)
    p.add_argument("--label", default=None)
    p.add_argument("--keep-timelines", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="emit named CSV tables from run reports")
    p.add_argument("reports", nargs="*", help="run report JSON files")
    p.add_argument("--table", required=True,
                   choices=("breakdown", "hit-rate-by-group",
                            "prefetch-accuracy", "pcie-fraction",
                            "load-balance", "heatmap"))
    p.add_argument("--trace", default=None, help="trace file (heatmap only)")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--top-m", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def run_subcommand(argv: list[str]) -> int:
    parser = build_parser()
    # Pull --config first so its values become defaults the real parse can
    # override.
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config:
        try:
            with open(known.config) as f:
                defaults = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file {known.config} not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{known.config}: malformed config file: {e}")
        if not isinstance(defaults, dict):
            raise ConfigError(f"{known.config}: config must be a JSON object")
        for sp in parser._subparsers._group_actions[0].choices.values():
            valid = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in defaults.items() if k in valid})
            for action in sp._actions:
                if action.required and action.dest in defaults:
                    action.required = False
    args = parser.parse_args(argv)
    return args.func(args)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return run_subcommand(argv)
    except MoesimError as e:
        print(f"error [{e.module}]: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error [cli]: file not found: {e.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
