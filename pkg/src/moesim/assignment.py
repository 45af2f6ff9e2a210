"""Per-layer expert placement between CPU and GPU.

Solvers minimize the layer makespan max(T_cpu, T_gpu), where T_cpu sums the
CPU times of CPU-assigned experts and T_gpu sums, per GPU-assigned expert,
the max of its transfer and compute times.  Three solvers share one expert
ordering (largest |t_gpu - t_cpu| first): an exact branch-and-bound, the
greedy completion-time heuristic, and a beam-search variant.

GPU capacity, when configured, caps the number of *newly transferred* experts
per layer; experts already resident on the GPU occupy cache memory, not
transfer slots, and may always be GPU-assigned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cost_model import CostModel
from .errors import AssignmentError, ConstraintViolation

EXACT_SOLVER_LIMIT = 24


@dataclass
class Assignment:
    """Binary placement vectors; C[i] = 1 for CPU, G[i] = 1 for GPU."""

    C: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.int8)
        self.G = np.asarray(self.G, dtype=np.int8)
        if self.C.shape != self.G.shape:
            raise AssignmentError("C and G must have the same length")

    @property
    def cpu_indices(self) -> np.ndarray:
        return np.flatnonzero(self.C)

    @property
    def gpu_indices(self) -> np.ndarray:
        return np.flatnonzero(self.G)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Assignment)
                and np.array_equal(self.C, other.C)
                and np.array_equal(self.G, other.G))


@dataclass
class AssignmentInstance:
    """One layer's placement problem: workloads, residency, costs, capacity."""

    workloads: np.ndarray
    resident: np.ndarray
    cost_model: CostModel | None = None
    gpu_capacity: int | None = None
    _cpu_times: np.ndarray | None = field(default=None, repr=False)
    _gpu_times: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.workloads = np.asarray(self.workloads, dtype=np.int64)
        self.resident = np.asarray(self.resident, dtype=bool)
        if self.workloads.shape != self.resident.shape:
            raise AssignmentError(
                f"workloads ({self.workloads.shape}) and resident flags "
                f"({self.resident.shape}) must share length")
        if (self.workloads < 0).any():
            raise AssignmentError("workloads must be nonnegative")
        if self.gpu_capacity is not None and self.gpu_capacity < 0:
            raise AssignmentError("gpu_capacity must be >= 0")
        if self._cpu_times is None:
            if self.cost_model is None:
                raise AssignmentError("either a cost model or explicit times required")
            self._cpu_times = self.cost_model.cpu_times(self.workloads)
            self._gpu_times = self.cost_model.gpu_times(self.workloads, self.resident)

    @classmethod
    def from_times(cls, cpu_times, gpu_times, workloads=None, resident=None,
                   gpu_capacity=None) -> "AssignmentInstance":
        """Build an instance from explicit per-expert times (mainly for tests)."""
        cpu_times = np.asarray(cpu_times, dtype=np.float64)
        gpu_times = np.asarray(gpu_times, dtype=np.float64)
        if cpu_times.shape != gpu_times.shape:
            raise AssignmentError("time vectors must share length")
        n = len(cpu_times)
        if workloads is None:
            workloads = ((cpu_times > 0) | (gpu_times > 0)).astype(np.int64)
        if resident is None:
            resident = np.zeros(n, dtype=bool)
        inst = cls.__new__(cls)
        inst.workloads = np.asarray(workloads, dtype=np.int64)
        inst.resident = np.asarray(resident, dtype=bool)
        inst.cost_model = None
        inst.gpu_capacity = gpu_capacity
        inst._cpu_times = cpu_times
        inst._gpu_times = gpu_times
        return inst

    @property
    def n_experts(self) -> int:
        return len(self.workloads)

    @property
    def cpu_times(self) -> np.ndarray:
        return self._cpu_times

    @property
    def gpu_times(self) -> np.ndarray:
        return self._gpu_times

    @property
    def activated(self) -> np.ndarray:
        return np.flatnonzero(self.workloads > 0)

    def sorted_order(self) -> np.ndarray:
        """Activated experts by descending |t_gpu - t_cpu|, ties to lower index."""
        act = self.activated
        gap = np.abs(self.gpu_times[act] - self.cpu_times[act])
        return act[np.argsort(-gap, kind="stable")]


def validate(instance: AssignmentInstance, assignment: Assignment) -> list[str]:
    """Return every violated placement constraint; empty list means valid."""
    violations = []
    C, G = assignment.C, assignment.G
    if len(C) != instance.n_experts:
        return [f"length mismatch: assignment has {len(C)} experts, "
                f"instance has {instance.n_experts}"]
    both = np.flatnonzero((C + G) > 1)
    for i in both:
        violations.append(f"mutual exclusion violated at expert {i} (C=G=1)")
    bad = np.flatnonzero((C < 0) | (C > 1) | (G < 0) | (G > 1))
    for i in bad:
        violations.append(f"non-binary entry at expert {i}")
    n_assigned = int((C + G).sum())
    n_activated = int((instance.workloads > 0).sum())
    if n_assigned != n_activated:
        violations.append(
            f"activation count violated: {n_assigned} assigned vs "
            f"{n_activated} activated")
    unassigned = np.flatnonzero((instance.workloads > 0) & ((C + G) == 0))
    for i in unassigned:
        violations.append(
            f"activation constraint violated: activated expert {i} unassigned")
    idle_assigned = np.flatnonzero((instance.workloads == 0) & ((C + G) > 0))
    for i in idle_assigned:
        violations.append(f"unactivated expert {i} assigned")
    if instance.gpu_capacity is not None:
        new_transfers = int((G.astype(bool) & ~instance.resident).sum())
        if new_transfers > instance.gpu_capacity:
            violations.append(
                f"GPU capacity violated: {new_transfers} newly transferred "
                f"experts > capacity {instance.gpu_capacity}")
    return violations


def makespan(instance: AssignmentInstance,
             assignment: Assignment) -> tuple[float, float, float]:
    """(T_cpu, T_gpu, T_layer) for a constraint-valid assignment."""
    violations = validate(instance, assignment)
    if violations:
        raise ConstraintViolation(violations)
    t_cpu = float(instance.cpu_times @ assignment.C)
    t_gpu = float(instance.gpu_times @ assignment.G)
    return t_cpu, t_gpu, max(t_cpu, t_gpu)


def greedy_assign(instance: AssignmentInstance) -> Assignment:
    """Completion-time greedy placement.

    Experts are visited by descending |t_gpu - t_cpu| and each goes to the
    device with the smaller cumulative completion time; the GPU wins ties.
    Unactivated experts stay unassigned.  When GPU transfer slots run out,
    non-resident experts fall back to the CPU.
    """
    n = instance.n_experts
    C = np.zeros(n, dtype=np.int8)
    G = np.zeros(n, dtype=np.int8)
    t_cpu_total = 0.0
    t_gpu_total = 0.0
    slots_left = instance.gpu_capacity if instance.gpu_capacity is not None else None
    for idx in instance.sorted_order():
        gpu_time = instance.gpu_times[idx]
        cpu_time = instance.cpu_times[idx]
        gpu_allowed = (slots_left is None or slots_left > 0
                       or bool(instance.resident[idx]))
        if gpu_allowed and t_gpu_total + gpu_time <= t_cpu_total + cpu_time:
            G[idx] = 1
            t_gpu_total += gpu_time
            if slots_left is not None and not instance.resident[idx]:
                slots_left -= 1
        else:
            C[idx] = 1
            t_cpu_total += cpu_time
    return Assignment(C=C, G=G)


def beam_assign(instance: AssignmentInstance, beam_width: int = 2) -> Assignment:
    """Beam search over the same expert order as the greedy solver.

    Each state is (T_cpu, T_gpu, choices); per expert every surviving state
    expands to a GPU child and a CPU child and the ``beam_width`` states with
    the smallest max(T_cpu, T_gpu) survive (stable, GPU child first, so
    beam_width=1 reproduces the greedy schedule exactly).  The greedy schedule
    is kept as a fallback: if it ends up strictly better than the surviving
    beam, it is returned, so widening the beam can never lose to greedy.
    """
    if beam_width < 1:
        raise AssignmentError(f"beam_width must be >= 1, got {beam_width}")
    order = instance.sorted_order()
    cap = instance.gpu_capacity
    # state: (t_cpu, t_gpu, slots_used, gpu_set, cpu_set)
    states = [(0.0, 0.0, 0, (), ())]
    for idx in order:
        gpu_time = float(instance.gpu_times[idx])
        cpu_time = float(instance.cpu_times[idx])
        needs_slot = not bool(instance.resident[idx])
        children = []
        for (tc, tg, used, gset, cset) in states:
            gpu_child = None
            if cap is None or not needs_slot or used < cap:
                gpu_child = (tc, tg + gpu_time, used + (1 if needs_slot else 0),
                             gset + (int(idx),), cset)
            cpu_child = (tc + cpu_time, tg, used, gset, cset + (int(idx),))
            # Emit the greedy-preferred child first; the stable sort below then
            # resolves score ties exactly like the greedy device rule.
            if gpu_child is not None and tg + gpu_time <= tc + cpu_time:
                children.extend((gpu_child, cpu_child))
            elif gpu_child is not None:
                children.extend((cpu_child, gpu_child))
            else:
                children.append(cpu_child)
        children.sort(key=lambda s: max(s[0], s[1]))
        states = children[:beam_width]

    best = states[0]
    greedy = greedy_assign(instance)
    _, _, greedy_mk = makespan(instance, greedy)
    if greedy_mk < max(best[0], best[1]):
        return greedy
    n = instance.n_experts
    C = np.zeros(n, dtype=np.int8)
    G = np.zeros(n, dtype=np.int8)
    G[list(best[3])] = 1
    C[list(best[4])] = 1
    return Assignment(C=C, G=G)


def optimal_assign(instance: AssignmentInstance,
                   max_activated: int = EXACT_SOLVER_LIMIT,
                   ) -> tuple[Assignment, float]:
    """Exact minimum-makespan placement via branch and bound.

    Branches each activated expert to CPU or GPU; a node is pruned when
    max(T_cpu, T_gpu, (T_cpu + T_gpu + remaining best-case) / 2) exceeds the
    incumbent.  Ties break toward fewer GPU-assigned experts, then toward the
    lexicographically smallest GPU index set; honoring that canonical choice
    means equal-makespan subtrees are still explored, so instances where many
    experts share identical costs can be slow near the ``max_activated``
    limit.  Refuses instances with more activated experts than
    ``max_activated``.
    """
    assignment, mk, _ = optimal_assign_with_stats(instance, max_activated)
    return assignment, mk


def optimal_assign_with_stats(instance: AssignmentInstance,
                              max_activated: int = EXACT_SOLVER_LIMIT,
                              ) -> tuple[Assignment, float, int]:
    """optimal_assign plus the explored branch-and-bound node count."""
    order = instance.sorted_order()
    n_act = len(order)
    if n_act > max_activated:
        raise AssignmentError(
            f"exact solver limited to {max_activated} activated experts, "
            f"instance has {n_act}; use greedy_assign instead")

    cpu_t = instance.cpu_times[order]
    gpu_t = instance.gpu_times[order]
    needs_slot = (~instance.resident[order]).astype(np.int64)
    cap = instance.gpu_capacity
    # Best-case remaining contribution at depth i: each undecided expert adds
    # at least min(t_cpu, t_gpu) to one of the lanes.
    min_t = np.minimum(cpu_t, gpu_t)
    rem_min = np.concatenate([np.cumsum(min_t[::-1])[::-1], [0.0]])

    greedy = greedy_assign(instance)
    _, _, ub = makespan(instance, greedy)
    best_key: list = [ub, int(greedy.G.sum()), tuple(greedy.gpu_indices.tolist())]
    best_choice = [None]
    nodes = [0]

    choice = np.zeros(n_act, dtype=np.int8)  # 1 = GPU

    def dfs(depth: int, t_cpu: float, t_gpu: float, slots_used: int,
            n_gpu: int) -> None:
        nodes[0] += 1
        lb = max(t_cpu, t_gpu, (t_cpu + t_gpu + rem_min[depth]) / 2.0)
        if lb > best_key[0]:
            return
        # Equal-makespan completions can only win the tie with fewer GPU
        # assignments, and the GPU count never shrinks down a branch.
        if lb == best_key[0] and n_gpu > best_key[1]:
            return
        if depth == n_act:
            mk = max(t_cpu, t_gpu)
            gpu_idx = tuple(sorted(int(order[i]) for i in range(n_act) if choice[i]))
            key = [mk, len(gpu_idx), gpu_idx]
            if key < best_key:
                best_key[:] = key
                best_choice[0] = choice.copy()
            return
        gpu_ok = cap is None or slots_used + needs_slot[depth] <= cap
        # Explore the locally better device first for earlier tight incumbents.
        gpu_first = t_gpu + gpu_t[depth] <= t_cpu + cpu_t[depth]
        branches = (1, 0) if gpu_first else (0, 1)
        for dev in branches:
            if dev == 1:
                if not gpu_ok:
                    continue
                choice[depth] = 1
                dfs(depth + 1, t_cpu, t_gpu + gpu_t[depth],
                    slots_used + needs_slot[depth], n_gpu + 1)
            else:
                choice[depth] = 0
                dfs(depth + 1, t_cpu + cpu_t[depth], t_gpu, slots_used, n_gpu)
        choice[depth] = 0

    dfs(0, 0.0, 0.0, 0, 0)

    if best_choice[0] is None:
        # The greedy incumbent was never improved or tied differently.
        return greedy, float(best_key[0]), nodes[0]
    n = instance.n_experts
    C = np.zeros(n, dtype=np.int8)
    G = np.zeros(n, dtype=np.int8)
    for i, dev in enumerate(best_choice[0]):
        if dev:
            G[order[i]] = 1
        else:
            C[order[i]] = 1
    return Assignment(C=C, G=G), float(best_key[0]), nodes[0]


def static_threshold_assign(instance: AssignmentInstance,
                            threshold: float | None = None) -> Assignment:
    """Workload-threshold placement: GPU iff w_i >= threshold.

    With no threshold given, the median positive workload is used, putting
    roughly half the activated experts on the GPU.  Capacity overflow falls
    back to the CPU in descending-workload order.
    """
    act = instance.activated
    n = instance.n_experts
    C = np.zeros(n, dtype=np.int8)
    G = np.zeros(n, dtype=np.int8)
    if len(act) == 0:
        return Assignment(C=C, G=G)
    if threshold is None:
        threshold = float(np.median(instance.workloads[act]))
    slots_left = instance.gpu_capacity if instance.gpu_capacity is not None else None
    by_workload = act[np.argsort(-instance.workloads[act], kind="stable")]
    for idx in by_workload:
        wants_gpu = instance.workloads[idx] >= threshold
        gpu_allowed = (slots_left is None or slots_left > 0
                       or bool(instance.resident[idx]))
        if wants_gpu and gpu_allowed:
            G[idx] = 1
            if slots_left is not None and not instance.resident[idx]:
                slots_left -= 1
        else:
            C[idx] = 1
    return Assignment(C=C, G=G)


def all_cpu_assign(instance: AssignmentInstance) -> Assignment:
    n = instance.n_experts
    C = np.zeros(n, dtype=np.int8)
    C[instance.activated] = 1
    return Assignment(C=C, G=np.zeros(n, dtype=np.int8))


def all_gpu_assign(instance: AssignmentInstance) -> Assignment:
    """Everything on the GPU; capacity overflow falls back to the CPU."""
    n = instance.n_experts
    C = np.zeros(n, dtype=np.int8)
    G = np.zeros(n, dtype=np.int8)
    slots_left = instance.gpu_capacity if instance.gpu_capacity is not None else None
    for idx in instance.activated:
        gpu_allowed = (slots_left is None or slots_left > 0
                       or bool(instance.resident[idx]))
        if gpu_allowed:
            G[idx] = 1
            if slots_left is not None and not instance.resident[idx]:
                slots_left -= 1
        else:
            C[idx] = 1
    return Assignment(C=C, G=G)
