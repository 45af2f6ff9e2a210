"""Per-layer GPU expert cache with three replacement policies.

The workload policy accumulates per-expert token counts over a sliding window
of ``w_size`` tokens; at each window boundary it pairs the (up to) ``u_size``
highest-scoring experts currently off the GPU against the ``u_size``
lowest-scoring experts on it and swaps every pair where the incoming expert
scores at least as high as the outgoing one, then resets the scores.  The
score policy uses the same windowed mechanics over summed gate probabilities
instead of token counts.  The LRU policy mutates on lookup instead: hits
refresh recency and a miss inserts the looked-up expert, evicting the least
recently used one.

Demand-fetched and prefetched experts do not enter the cache unless the
corresponding insert toggle is switched on; only windowed replacement (or LRU
miss insertion) changes the cached set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError

CACHE_POLICIES = ("workload", "lru", "score")


@dataclass
class ReplacementEvent:
    """One window-boundary swap; evicted and admitted always have equal size."""

    token_index: int
    evicted: list[int]
    admitted: list[int]
    transfer_cost_ms: float = 0.0


@dataclass
class CacheState:
    """Mutable cache bookkeeping for a single MoE layer."""

    layer: int
    num_experts: int
    capacity: int
    window_size: int
    update_size: int
    policy: str
    on_gpu: np.ndarray = field(default=None)
    scores: np.ndarray = field(default=None)
    tokens_in_window: int = 0
    stopped: bool = False
    lru_clock: np.ndarray = field(default=None)
    clock: int = 0
    insert_demand_fetched: bool = False
    insert_prefetched: bool = False

    @property
    def expert_on_gpu(self) -> np.ndarray:
        return np.flatnonzero(self.on_gpu)

    @property
    def expert_on_cpu(self) -> np.ndarray:
        return np.flatnonzero(~self.on_gpu)


def init_cache(layer: int, num_experts: int, capacity: int, w_size: int,
               u_size: int, policy: str = "workload", seed: int = 0,
               insert_demand_fetched: bool = False,
               insert_prefetched: bool = False) -> CacheState:
    """Seed a cache with a random resident subset and zeroed scores."""
    if policy not in CACHE_POLICIES:
        raise CacheError(f"unknown cache policy {policy!r}; choose from "
                         f"{CACHE_POLICIES}")
    if not (0 < capacity < num_experts):
        raise CacheError(
            f"capacity must satisfy 0 < capacity < num_experts, got "
            f"capacity={capacity}, num_experts={num_experts}")
    if w_size < 1:
        raise CacheError(f"w_size must be >= 1, got {w_size}")
    if not (0 <= u_size <= min(capacity, num_experts - capacity)):
        raise CacheError(
            f"u_size must be in [0, min(capacity, N - capacity)] = "
            f"[0, {min(capacity, num_experts - capacity)}], got {u_size}")
    rng = np.random.default_rng([seed, layer])
    initial = rng.permutation(num_experts)[:capacity]
    on_gpu = np.zeros(num_experts, dtype=bool)
    on_gpu[initial] = True
    return CacheState(
        layer=layer,
        num_experts=num_experts,
        capacity=capacity,
        window_size=w_size,
        update_size=u_size,
        policy=policy,
        on_gpu=on_gpu,
        scores=np.zeros(num_experts, dtype=np.float64),
        lru_clock=np.zeros(num_experts, dtype=np.int64),
        insert_demand_fetched=insert_demand_fetched,
        insert_prefetched=insert_prefetched,
    )


def lookup(state: CacheState, expert: int) -> bool:
    """True iff the expert is cached.  Under LRU this call also updates the
    cache: hits refresh recency, misses insert the expert and evict the least
    recently used one."""
    if not (0 <= expert < state.num_experts):
        raise CacheError(f"expert {expert} out of range [0, {state.num_experts})")
    hit = bool(state.on_gpu[expert])
    if state.policy == "lru":
        state.clock += 1
        if hit:
            state.lru_clock[expert] = state.clock
        else:
            _lru_insert(state, expert)
    return hit


def _lru_insert(state: CacheState, expert: int) -> None:
    cached = state.expert_on_gpu
    victim = cached[np.argmin(state.lru_clock[cached])]
    state.on_gpu[victim] = False
    state.on_gpu[expert] = True
    state.lru_clock[expert] = state.clock


def force_insert(state: CacheState, expert: int) -> int | None:
    """Insert an expert outside the windowed mechanism (demand/prefetch toggles).

    Evicts the lowest-score cached expert (LRU: least recently used) and
    returns the victim, or None if the expert was already cached.
    """
    if state.on_gpu[expert]:
        return None
    cached = state.expert_on_gpu
    if state.policy == "lru":
        victim = cached[np.argmin(state.lru_clock[cached])]
    else:
        victim = cached[np.argsort(state.scores[cached], kind="stable")[0]]
    state.on_gpu[victim] = False
    state.on_gpu[expert] = True
    return int(victim)


def record_and_maybe_replace(
    state: CacheState,
    workload: np.ndarray,
    token_index: int,
    is_eos: bool = False,
    gate_scores: np.ndarray | None = None,
    trans_time_ms: float = 0.0,
) -> ReplacementEvent | None:
    """Feed one token step's workloads into the cache.

    Workload and score policies accumulate and, once the window fills, swap
    up to ``u_size`` of the best off-GPU experts for the worst on-GPU ones
    (ties toward the lower index; pairs that would demote a higher-scoring
    expert are skipped) and reset the scores.  Accumulation stops permanently
    once a step is flagged EOS; an EOS step never triggers the swap.  LRU
    ignores windowing entirely.
    """
    if state.stopped:
        return None
    workload = np.asarray(workload)
    if workload.shape != (state.num_experts,):
        raise CacheError(
            f"workload vector length {workload.shape} != ({state.num_experts},)")
    if state.policy == "score":
        if gate_scores is None:
            raise CacheError("score policy requires per-expert gate scores")
        gate_scores = np.asarray(gate_scores, dtype=np.float64)
        if gate_scores.shape != (state.num_experts,):
            raise CacheError(
                f"gate score vector length {gate_scores.shape} != "
                f"({state.num_experts},)")

    if state.policy in ("workload", "score"):
        vec = workload.astype(np.float64) if state.policy == "workload" else gate_scores
        state.scores += vec
        state.tokens_in_window += 1
    if is_eos:
        state.stopped = True
        return None
    if state.policy == "lru" or state.tokens_in_window < state.window_size:
        return None

    u = state.update_size
    cpu_side = state.expert_on_cpu
    gpu_side = state.expert_on_gpu
    # Highest scores come off the CPU side, lowest leave the GPU side; the
    # stable argsort breaks ties toward the lower expert index.  Pairs are
    # only exchanged while the incoming expert scores at least as high as
    # the outgoing one, so every admitted expert dominates every evicted
    # expert in the same event.
    candidates = cpu_side[np.argsort(-state.scores[cpu_side], kind="stable")[:u]]
    victims = gpu_side[np.argsort(state.scores[gpu_side], kind="stable")[:u]]
    n_swap = 0
    for c, v in zip(candidates, victims):
        if state.scores[c] < state.scores[v]:
            break
        n_swap += 1
    admitted = candidates[:n_swap]
    evicted = victims[:n_swap]
    state.on_gpu[evicted] = False
    state.on_gpu[admitted] = True
    state.scores[:] = 0.0
    state.tokens_in_window = 0
    return ReplacementEvent(
        token_index=token_index,
        evicted=[int(e) for e in evicted],
        admitted=[int(a) for a in admitted],
        transfer_cost_ms=len(admitted) * trans_time_ms,
    )


@dataclass
class CacheStats:
    """Hit/miss accounting across lookups, grouped on demand."""

    records: list[tuple[int, int, bool]] = field(default_factory=list)

    def record(self, layer: int, token_index: int, hit: bool) -> None:
        self.records.append((layer, token_index, hit))

    @property
    def hits(self) -> int:
        return sum(1 for _, _, h in self.records if h)

    @property
    def misses(self) -> int:
        return sum(1 for _, _, h in self.records if not h)

    def hit_rate(self, grouping: str = "overall", group_size: int = 8):
        """Hit rates under the requested grouping.

        "overall" returns a float; "per-layer" a {layer: rate} dict;
        "per-token-group" a ({group: rate}, empty_groups) pair where groups
        with no lookups are excluded from the rates and flagged.
        """
        if not self.records:
            raise CacheError("no lookups recorded")
        if grouping == "overall":
            return self.hits / len(self.records)
        if grouping == "per-layer":
            out: dict[int, list[int]] = {}
            for layer, _, h in self.records:
                agg = out.setdefault(layer, [0, 0])
                agg[0] += int(h)
                agg[1] += 1
            return {layer: agg[0] / agg[1] for layer, agg in sorted(out.items())}
        if grouping == "per-token-group":
            if group_size < 1:
                raise CacheError("group_size must be >= 1")
            counts: dict[int, list[int]] = {}
            max_group = 0
            for _, token, h in self.records:
                g = token // group_size
                max_group = max(max_group, g)
                agg = counts.setdefault(g, [0, 0])
                agg[0] += int(h)
                agg[1] += 1
            rates = {g: agg[0] / agg[1] for g, agg in sorted(counts.items())}
            empty = [g for g in range(max_group + 1) if g not in counts]
            return rates, empty
        raise CacheError(f"unknown grouping {grouping!r}")


def replay_trace(
    trace,
    layer: int,
    capacity: int,
    w_size: int,
    u_size: int,
    policy: str = "workload",
    seed: int = 0,
    lookup_top: int | None = None,
    gate_params=None,
    trans_time_ms: float = 0.0,
) -> tuple[CacheStats, list[ReplacementEvent]]:
    """Replay one layer of a trace against a fresh cache.

    Each step looks up every activated expert in descending workload order
    (or only the ``lookup_top`` highest, when given), standing in for the
    demand stream when no assignment policy is in play, then feeds the
    step's workloads to the replacement policy.
    """
    from .trace import gate_scores as compute_gate_scores

    cfg = trace.model_config
    if not (0 <= layer < cfg.num_layers):
        raise CacheError(f"layer {layer} out of range")
    state = init_cache(layer, cfg.num_routed_experts, capacity, w_size, u_size,
                       policy=policy, seed=seed)
    stats = CacheStats()
    events: list[ReplacementEvent] = []
    needs_scores = policy == "score"
    gp = gate_params if gate_params is not None else trace.gate_params
    if needs_scores and (gp is None or not trace.has_features):
        raise CacheError("score policy replay needs a featureful trace with "
                         "gate parameters")
    for step in trace.steps:
        if state.stopped:
            break
        w = step.workloads[layer]
        accessed = np.flatnonzero(w > 0)
        accessed = accessed[np.argsort(-w[accessed], kind="stable")]
        if lookup_top is not None:
            accessed = accessed[:lookup_top]
        for e in accessed:
            stats.record(layer, step.token_index, lookup(state, int(e)))
        scores = None
        if needs_scores:
            scores = compute_gate_scores(step.hidden[layer],
                                         gp.layer(layer)).sum(axis=0)
        ev = record_and_maybe_replace(state, w, step.token_index,
                                      is_eos=step.eos, gate_scores=scores,
                                      trans_time_ms=trans_time_ms)
        if ev is not None:
            events.append(ev)
    return stats, events
