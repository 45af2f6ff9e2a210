"""Token-by-token simulation of hybrid CPU/GPU MoE offloading inference.

Per layer, the driver consults the expert cache, runs the configured
assignment policy with cached and freshly prefetched experts marked resident,
and schedules the GPU side as a two-resource pipeline: demand transfers
serialize on the PCIe channel, computes serialize on the GPU engine, and each
transferred expert's compute waits for its own transfer.  The CPU side runs
its experts serially.  While a layer executes, the predictor picks next-layer
experts and prefetch transfers fill whatever idle time the channel has left
in that layer's window; only fully transferred experts count as resident for
the next layer.  Cache replacement runs after each layer on its true
workloads, and replacement transfers are charged as a PCIe stall at the
window boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import (Assignment, AssignmentInstance, all_cpu_assign,
                         all_gpu_assign, beam_assign, greedy_assign,
                         optimal_assign_with_stats, static_threshold_assign,
                         validate)
from .cache import (CacheStats, force_insert, init_cache, lookup,
                    record_and_maybe_replace)
from .cost_model import CostModel
from .errors import SimulationError
from .prefetch import (Predictor, feature_predictor, predict_next_layer,
                       prefetch_accuracy, random_predictor, residual_predictor)
from .trace import ResidualVectors, Trace, gate_scores

ASSIGNMENT_POLICIES = ("greedy", "optimal", "beam", "all-cpu", "all-gpu",
                       "static-threshold")


def default_u_size(num_experts: int, capacity: int) -> int:
    """Per-update swap count: 8 for wide expert pools, 1 for narrow ones,
    clamped to the feasible range."""
    u = 8 if num_experts >= 32 else 1
    return max(0, min(u, capacity, num_experts - capacity))


@dataclass
class SimConfig:
    """Everything one run needs besides the trace itself."""

    cost_model: CostModel
    assignment_policy: str = "greedy"
    beam_width: int = 2
    threshold: float | None = None
    gpu_capacity: int | None = None
    exact_solver_limit: int = 24

    prefetch_kind: str | None = None
    prefetch_size: int = 0
    residuals: ResidualVectors | None = None
    frequency_table: np.ndarray | None = None

    cache_policy: str | None = None
    cache_capacity: int = 0
    w_size: int = 4
    u_size: int | None = None
    insert_demand_fetched: bool = False
    insert_prefetched: bool = False

    scheduling_overhead_ms: float = 0.0
    solver_node_cost_ms: float = 0.0
    prefetch_compute_ms: float = 0.0
    non_moe_override: float | None = None

    seed: int = 0
    keep_timelines: bool = False

    @property
    def prefetch_enabled(self) -> bool:
        return self.prefetch_kind is not None and self.prefetch_size > 0

    @property
    def cache_enabled(self) -> bool:
        return self.cache_policy is not None and self.cache_capacity > 0

    def to_dict(self) -> dict:
        return {
            "assignment_policy": self.assignment_policy,
            "beam_width": self.beam_width,
            "threshold": self.threshold,
            "gpu_capacity": self.gpu_capacity,
            "exact_solver_limit": self.exact_solver_limit,
            "prefetch_kind": self.prefetch_kind,
            "prefetch_size": self.prefetch_size,
            "has_residuals": self.residuals is not None,
            "cache_policy": self.cache_policy,
            "cache_capacity": self.cache_capacity,
            "w_size": self.w_size,
            "u_size": self.u_size,
            "insert_demand_fetched": self.insert_demand_fetched,
            "insert_prefetched": self.insert_prefetched,
            "scheduling_overhead_ms": self.scheduling_overhead_ms,
            "solver_node_cost_ms": self.solver_node_cost_ms,
            "prefetch_compute_ms": self.prefetch_compute_ms,
            "non_moe_override": self.non_moe_override,
            "seed": self.seed,
            "cost_model": self.cost_model.to_dict(),
        }


@dataclass
class LayerTimeline:
    """Event schedule of one layer execution, in layer-local milliseconds."""

    cpu_busy: float
    pcie_intervals: list[tuple[float, float, str]]
    gpu_compute_intervals: list[tuple[float, float, int]]
    gpu_makespan: float
    layer_latency: float

    @property
    def demand_transfer_ms(self) -> float:
        return sum(e - s for s, e, p in self.pcie_intervals if p == "demand")

    @property
    def compute_ms(self) -> float:
        return sum(e - s for s, e, _ in self.gpu_compute_intervals)


def run_assignment_policy(instance: AssignmentInstance,
                          config: SimConfig) -> tuple[Assignment, int]:
    """Dispatch to the configured solver; returns (assignment, node count)."""
    policy = config.assignment_policy
    n_act = len(instance.activated)
    if policy == "greedy":
        return greedy_assign(instance), n_act
    if policy == "optimal":
        assignment, _, nodes = optimal_assign_with_stats(
            instance, max_activated=config.exact_solver_limit)
        return assignment, nodes
    if policy == "beam":
        return beam_assign(instance, config.beam_width), n_act * config.beam_width
    if policy == "all-cpu":
        return all_cpu_assign(instance), 0
    if policy == "all-gpu":
        return all_gpu_assign(instance), 0
    if policy == "static-threshold":
        return static_threshold_assign(instance, config.threshold), 0
    raise SimulationError(f"unknown assignment policy {policy!r}; choose from "
                          f"{ASSIGNMENT_POLICIES}")


def simulate_layer(
    workloads: np.ndarray,
    resident: np.ndarray,
    config: SimConfig,
    shared_ms: float = 0.0,
    extra_overhead_ms: float = 0.0,
) -> tuple[Assignment, LayerTimeline]:
    """Assign one layer's experts and schedule the two-resource GPU pipeline."""
    cm = config.cost_model
    instance = AssignmentInstance(workloads=workloads, resident=resident,
                                  cost_model=cm, gpu_capacity=config.gpu_capacity)
    assignment, nodes = run_assignment_policy(instance, config)
    violations = validate(instance, assignment)
    if violations:
        raise SimulationError(
            f"assignment policy {config.assignment_policy!r} produced an "
            f"invalid assignment: {'; '.join(violations)}")

    cpu_busy = float(instance.cpu_times @ assignment.C)

    pcie_intervals: list[tuple[float, float, str]] = []
    compute_intervals: list[tuple[float, float, int]] = []
    pcie_t = 0.0
    engine_t = 0.0
    for idx in instance.sorted_order():
        if not assignment.G[idx]:
            continue
        comp = cm.t_gpu_compute(int(workloads[idx]))
        if resident[idx]:
            start = engine_t
        else:
            tr_end = pcie_t + cm.trans_time
            pcie_intervals.append((pcie_t, tr_end, "demand"))
            pcie_t = tr_end
            start = max(engine_t, tr_end)
        engine_t = start + comp
        compute_intervals.append((start, engine_t, int(idx)))

    gpu_makespan = engine_t
    latency = (max(cpu_busy, gpu_makespan) + shared_ms
               + config.scheduling_overhead_ms
               + config.solver_node_cost_ms * nodes
               + extra_overhead_ms)
    timeline = LayerTimeline(cpu_busy=cpu_busy, pcie_intervals=pcie_intervals,
                             gpu_compute_intervals=compute_intervals,
                             gpu_makespan=gpu_makespan, layer_latency=latency)
    return assignment, timeline


@dataclass
class RunReport:
    """Aggregated latency, traffic, prediction, and cache statistics."""

    tokens: int
    steps: int
    total_time_ms: float
    tokens_per_second: float
    mean_token_latency_ms: float
    cpu_busy_ms: float
    gpu_busy_ms: float
    pcie_demand_ms: float
    pcie_prefetch_ms: float
    pcie_replacement_ms: float
    pcie_busy_ms: float
    pcie_busy_fraction: float
    per_layer_pcie_fraction: dict[int, float]
    prefetch_accuracy_top1: dict[int, float]
    prefetch_accuracy_topk: dict[int, float]
    prefetch_size: int
    cache_hit_rate: float | None
    cache_hit_rate_per_layer: dict[int, float]
    cache_hit_rate_per_group: dict[int, float]
    cache_empty_groups: list[int]
    replacement_events: list[dict]
    spec: dict
    timelines: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "steps": self.steps,
            "total_time_ms": self.total_time_ms,
            "tokens_per_second": self.tokens_per_second,
            "mean_token_latency_ms": self.mean_token_latency_ms,
            "cpu_busy_ms": self.cpu_busy_ms,
            "gpu_busy_ms": self.gpu_busy_ms,
            "pcie_demand_ms": self.pcie_demand_ms,
            "pcie_prefetch_ms": self.pcie_prefetch_ms,
            "pcie_replacement_ms": self.pcie_replacement_ms,
            "pcie_busy_ms": self.pcie_busy_ms,
            "pcie_busy_fraction": self.pcie_busy_fraction,
            "per_layer_pcie_fraction": {str(k): v for k, v in
                                        self.per_layer_pcie_fraction.items()},
            "prefetch_accuracy_top1": {str(k): v for k, v in
                                       self.prefetch_accuracy_top1.items()},
            "prefetch_accuracy_topk": {str(k): v for k, v in
                                       self.prefetch_accuracy_topk.items()},
            "prefetch_size": self.prefetch_size,
            "cache_hit_rate": self.cache_hit_rate,
            "cache_hit_rate_per_layer": {str(k): v for k, v in
                                         self.cache_hit_rate_per_layer.items()},
            "cache_hit_rate_per_group": {str(k): v for k, v in
                                         self.cache_hit_rate_per_group.items()},
            "cache_empty_groups": self.cache_empty_groups,
            "replacement_events": self.replacement_events,
            "spec": self.spec,
            "timelines": self.timelines,
        }


def pcie_fraction(report: RunReport) -> float:
    """Share of simulated wall time the host-to-GPU link spends transferring."""
    return report.pcie_busy_fraction


def _build_predictor(config: SimConfig, trace: Trace) -> Predictor:
    kind = config.prefetch_kind
    n = trace.model_config.num_routed_experts
    if kind == "residual":
        if config.residuals is None:
            raise SimulationError(
                "residual prefetching requires calibrated residual vectors; "
                "run the calibrate step first")
        config.residuals.check_shape(trace.model_config)
        return residual_predictor(config.residuals)
    if kind == "feature":
        return feature_predictor()
    if kind == "statistical":
        if config.frequency_table is None:
            raise SimulationError(
                "statistical prefetching requires a calibration frequency table")
        return Predictor(kind="statistical",
                         frequency_table=np.asarray(config.frequency_table))
    if kind == "random":
        return random_predictor(seed=config.seed, n_experts=n)
    raise SimulationError(f"unknown prefetch kind {kind!r}")


def _validate_run_config(trace: Trace, config: SimConfig) -> None:
    cfg = trace.model_config
    if config.prefetch_enabled:
        # Prefetching is only simulated on featureful traces; workload-only
        # traces serve assignment/cache experiments.
        if not trace.has_features:
            raise SimulationError(
                "prefetching requires a trace with hidden states")
        if config.prefetch_kind in ("residual", "feature") \
                and trace.gate_params is None:
            raise SimulationError(
                "feature-based prefetching requires the trace's gate "
                "parameters (sidecar file)")
        if config.prefetch_size > cfg.num_routed_experts:
            raise SimulationError("prefetch_size cannot exceed the expert count")
    if config.cache_enabled:
        if not (0 < config.cache_capacity < cfg.num_routed_experts):
            raise SimulationError(
                f"cache capacity must be in (0, {cfg.num_routed_experts}), got "
                f"{config.cache_capacity}")
        if config.cache_policy == "score" and not (trace.has_features
                                                   and trace.gate_params is not None):
            raise SimulationError(
                "score cache policy requires a featureful trace with gate "
                "parameters")
    if config.threshold is not None and config.threshold < 0:
        raise SimulationError("static threshold must be >= 0")


def simulate_run(trace: Trace, config: SimConfig) -> RunReport:
    """Drive a full trace through the simulator and aggregate statistics."""
    _validate_run_config(trace, config)
    cfg = trace.model_config
    L, N, k = cfg.num_layers, cfg.num_routed_experts, cfg.top_k
    cm = config.cost_model
    shared_ms = cm.shared_expert_gpu_time if cfg.num_shared_experts > 0 else 0.0
    non_moe = (config.non_moe_override if config.non_moe_override is not None
               else cm.non_moe_layer_time)

    predictor = _build_predictor(config, trace) if config.prefetch_enabled else None
    caches = None
    cache_stats = CacheStats()
    if config.cache_enabled:
        u = (config.u_size if config.u_size is not None
             else default_u_size(N, config.cache_capacity))
        caches = [init_cache(l, N, config.cache_capacity, config.w_size, u,
                             policy=config.cache_policy, seed=config.seed,
                             insert_demand_fetched=config.insert_demand_fetched,
                             insert_prefetched=config.insert_prefetched)
                  for l in range(L)]

    pcie_demand = np.zeros(L)
    pcie_prefetch = np.zeros(L)
    pcie_replace = np.zeros(L)
    layer_time = np.zeros(L)
    cpu_busy = 0.0
    gpu_busy = 0.0
    acc1_sums: dict[int, list] = {}
    acck_sums: dict[int, list] = {}
    replacement_log: list[dict] = []
    timelines: list[dict] = []
    token_latencies: list[float] = []
    tokens = 0
    steps_done = 0

    for step in trace.steps:
        token_ms = 0.0
        prefetched_for: dict[int, np.ndarray] = {}
        for l in range(L):
            w = step.workloads[l]
            resident = np.zeros(N, dtype=bool)
            if caches is not None:
                resident |= caches[l].on_gpu
            arrived = prefetched_for.get(l)
            if arrived is not None and len(arrived):
                resident[arrived] = True

            extra = (config.prefetch_compute_ms
                     if config.prefetch_enabled and l < L - 1 else 0.0)
            assignment, timeline = simulate_layer(w, resident, config,
                                                  shared_ms=shared_ms,
                                                  extra_overhead_ms=extra)

            if caches is not None:
                for e in assignment.gpu_indices:
                    hit = lookup(caches[l], int(e))
                    cache_stats.record(l, step.token_index, hit)
                    if (not hit and caches[l].insert_demand_fetched
                            and caches[l].policy != "lru"
                            and not resident[e]):
                        force_insert(caches[l], int(e))

            # Prefetch for the next layer inside this layer's idle channel time.
            if predictor is not None and l < L - 1:
                gate_next = (trace.gate_params.layer(l + 1)
                             if trace.gate_params is not None else None)
                hidden_l = step.hidden[l] if step.hidden is not None else None
                decision = predict_next_layer(predictor, hidden_l, gate_next, k,
                                              config.prefetch_size, l)
                true_next = step.workloads[l + 1]
                acc1_sums.setdefault(l + 1, []).append(
                    prefetch_accuracy(decision.prefetch_set, true_next, 1))
                acck_sums.setdefault(l + 1, []).append(
                    prefetch_accuracy(decision.prefetch_set, true_next,
                                      min(config.prefetch_size, N)))
                next_resident = (caches[l + 1].on_gpu if caches is not None
                                 else np.zeros(N, dtype=bool))
                candidates = [int(e) for e in decision.prefetch_set
                              if not next_resident[e]]
                demand_end = (timeline.pcie_intervals[-1][1]
                              if timeline.pcie_intervals else 0.0)
                # The channel also idles while this layer's non-MoE work
                # (attention etc.) runs, so the prefetch stream extends into
                # that slot.
                idle = max(0.0, timeline.layer_latency + non_moe - demand_end)
                if cm.trans_time > 0:
                    n_fit = int(idle // cm.trans_time)
                    completed = candidates[:n_fit]
                    consumed = min(len(candidates) * cm.trans_time, idle)
                else:
                    completed = candidates
                    consumed = 0.0
                t = demand_end
                for _ in completed:
                    timeline.pcie_intervals.append((t, t + cm.trans_time,
                                                    "prefetch"))
                    t += cm.trans_time
                if consumed > len(completed) * cm.trans_time:
                    timeline.pcie_intervals.append(
                        (t, demand_end + consumed, "prefetch"))
                pcie_prefetch[l] += consumed
                prefetched_for[l + 1] = np.asarray(completed, dtype=np.int64)
                if caches is not None and caches[l + 1].insert_prefetched:
                    for e in completed:
                        force_insert(caches[l + 1], e)

            boundary_ms = 0.0
            if caches is not None:
                scores = None
                if caches[l].policy == "score":
                    scores = gate_scores(step.hidden[l],
                                         trace.gate_params.layer(l)).sum(axis=0)
                ev = record_and_maybe_replace(caches[l], w, step.token_index,
                                              is_eos=step.eos, gate_scores=scores,
                                              trans_time_ms=cm.trans_time)
                if ev is not None:
                    boundary_ms = ev.transfer_cost_ms
                    pcie_replace[l] += boundary_ms
                    if ev.admitted:
                        replacement_log.append({
                            "token_index": step.token_index,
                            "layer": l,
                            "evicted": ev.evicted,
                            "admitted": ev.admitted,
                            "transfer_cost_ms": ev.transfer_cost_ms,
                        })

            pcie_demand[l] += timeline.demand_transfer_ms
            # The layer's wall-time share includes its non-MoE slot, which
            # the prefetch stream may occupy.
            layer_time[l] += timeline.layer_latency + boundary_ms + non_moe
            cpu_busy += timeline.cpu_busy
            # GPU lane occupancy includes transfer-gated waiting (per-expert
            # time is the max of transfer and compute), matching the lane
            # times the assignment policies balance.
            gpu_busy += timeline.gpu_makespan + shared_ms
            token_ms += timeline.layer_latency + boundary_ms
            if config.keep_timelines:
                timelines.append({
                    "token_index": step.token_index,
                    "layer": l,
                    "cpu_busy": timeline.cpu_busy,
                    "gpu_makespan": timeline.gpu_makespan,
                    "layer_latency": timeline.layer_latency,
                    "sum_demand_trans": timeline.demand_transfer_ms,
                    "sum_compute": timeline.compute_ms,
                    "pcie_intervals": [list(iv) for iv in timeline.pcie_intervals],
                    "gpu_compute_intervals": [list(iv) for iv in
                                              timeline.gpu_compute_intervals],
                })

        token_ms += L * non_moe
        token_latencies.append(token_ms)
        tokens += step.tokens
        steps_done += 1
        if step.eos:
            break

    total_ms = float(sum(token_latencies))
    busy = float(pcie_demand.sum() + pcie_prefetch.sum() + pcie_replace.sum())
    per_layer_fraction = {}
    for l in range(L):
        lt = layer_time[l]
        per_layer_fraction[l] = (
            float((pcie_demand[l] + pcie_prefetch[l] + pcie_replace[l]) / lt)
            if lt > 0 else 0.0)

    hit_overall = None
    hit_per_layer: dict[int, float] = {}
    hit_per_group: dict[int, float] = {}
    empty_groups: list[int] = []
    if caches is not None and cache_stats.records:
        hit_overall = cache_stats.hit_rate("overall")
        hit_per_layer = cache_stats.hit_rate("per-layer")
        hit_per_group, empty_groups = cache_stats.hit_rate("per-token-group",
                                                           group_size=8)

    return RunReport(
        tokens=tokens,
        steps=steps_done,
        total_time_ms=total_ms,
        tokens_per_second=(tokens / (total_ms / 1000.0)) if total_ms > 0 else 0.0,
        mean_token_latency_ms=(total_ms / steps_done) if steps_done else 0.0,
        cpu_busy_ms=float(cpu_busy),
        gpu_busy_ms=float(gpu_busy),
        pcie_demand_ms=float(pcie_demand.sum()),
        pcie_prefetch_ms=float(pcie_prefetch.sum()),
        pcie_replacement_ms=float(pcie_replace.sum()),
        pcie_busy_ms=busy,
        pcie_busy_fraction=(busy / total_ms) if total_ms > 0 else 0.0,
        per_layer_pcie_fraction=per_layer_fraction,
        prefetch_accuracy_top1={l: float(np.mean(v)) for l, v in
                                sorted(acc1_sums.items())},
        prefetch_accuracy_topk={l: float(np.mean(v)) for l, v in
                                sorted(acck_sums.items())},
        prefetch_size=config.prefetch_size,
        cache_hit_rate=hit_overall,
        cache_hit_rate_per_layer=hit_per_layer,
        cache_hit_rate_per_group=hit_per_group,
        cache_empty_groups=empty_groups,
        replacement_events=replacement_log,
        spec=config.to_dict(),
        timelines=timelines,
    )


def breakdown_experiment(trace: Trace, base_config: SimConfig) -> list[dict]:
    """Cumulative technique breakdown: all-CPU, +assignment, +prefetch, +cache.

    Returns one row per configuration with throughput and speedup over the
    all-CPU baseline.
    """
    from dataclasses import replace

    from .prefetch import calibrate_residuals

    if not trace.has_features:
        raise SimulationError("breakdown experiment requires a featureful trace")
    residuals = base_config.residuals
    if residuals is None:
        residuals = calibrate_residuals(trace)

    N = trace.model_config.num_routed_experts
    capacity = base_config.cache_capacity or max(1, N // 2)
    prefetch_size = base_config.prefetch_size or 1
    configs = [
        ("all-cpu", replace(base_config, assignment_policy="all-cpu",
                            prefetch_kind=None, prefetch_size=0,
                            cache_policy=None, cache_capacity=0)),
        ("+greedy", replace(base_config, assignment_policy="greedy",
                            prefetch_kind=None, prefetch_size=0,
                            cache_policy=None, cache_capacity=0)),
        ("+prefetch", replace(base_config, assignment_policy="greedy",
                              prefetch_kind="residual",
                              prefetch_size=prefetch_size, residuals=residuals,
                              cache_policy=None, cache_capacity=0)),
        ("+cache", replace(base_config, assignment_policy="greedy",
                           prefetch_kind="residual",
                           prefetch_size=prefetch_size, residuals=residuals,
                           cache_policy=base_config.cache_policy or "workload",
                           cache_capacity=capacity)),
    ]
    rows = []
    baseline_tps = None
    for name, cfg in configs:
        report = simulate_run(trace, cfg)
        if baseline_tps is None:
            baseline_tps = report.tokens_per_second
        rows.append({
            "config": name,
            "tokens_per_second": report.tokens_per_second,
            "mean_token_latency_ms": report.mean_token_latency_ms,
            "pcie_busy_fraction": report.pcie_busy_fraction,
            "speedup_vs_naive": (report.tokens_per_second / baseline_tps
                                 if baseline_tps else 0.0),
        })
    return rows
