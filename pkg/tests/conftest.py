import numpy as np
import pytest

from moesim.assignment import AssignmentInstance
from moesim.cost_model import default_cost_model
from moesim.trace import ModelConfig


@pytest.fixture(scope="session")
def cost_model():
    return default_cost_model()


@pytest.fixture
def small_config():
    return ModelConfig(num_layers=4, num_routed_experts=16,
                       num_shared_experts=0, top_k=2, hidden_dim=32)


def random_instance(rng, cost_model, n_act_range=(1, 11), max_workload=60,
                    resident_prob=0.0, capacity_prob=0.0):
    """Random placement instance backed by the bundled cost model."""
    n_act = int(rng.integers(*n_act_range))
    n_experts = n_act + int(rng.integers(0, 6))
    idx = rng.choice(n_experts, n_act, replace=False)
    w = np.zeros(n_experts, dtype=np.int64)
    w[idx] = rng.integers(1, max_workload, n_act)
    resident = rng.random(n_experts) < resident_prob
    cap = None
    if rng.random() < capacity_prob:
        cap = int(rng.integers(0, n_act + 1))
    return AssignmentInstance(workloads=w, resident=resident,
                              cost_model=cost_model, gpu_capacity=cap)


def random_times_instance(rng, n_act_range=(1, 11), resident_prob=0.3,
                          capacity_prob=0.5):
    """Random instance with explicit dyadic times.

    Times live on a 1/64 grid so lane sums are exact in float64 regardless
    of summation order; exact-equality comparisons against enumeration are
    then meaningful.
    """
    n_act = int(rng.integers(*n_act_range))
    n_experts = n_act + int(rng.integers(0, 5))
    idx = rng.choice(n_experts, n_act, replace=False)
    w = np.zeros(n_experts, dtype=np.int64)
    w[idx] = rng.integers(1, 60, n_act)
    tc = np.round(rng.uniform(0.5, 40, n_experts) * 64) / 64
    tg = np.round(rng.uniform(0.5, 20, n_experts) * 64) / 64
    tc[w == 0] = 0.0
    tg[w == 0] = 0.0
    resident = rng.random(n_experts) < resident_prob
    cap = None
    if rng.random() < capacity_prob:
        cap = int(rng.integers(0, n_act + 1))
    return AssignmentInstance.from_times(tc, tg, workloads=w, resident=resident,
                                         gpu_capacity=cap)


def enumerate_optimal_makespan(instance):
    """Brute-force oracle: try every CPU/GPU split of the activated experts."""
    act = instance.activated
    n = len(act)
    tc = instance.cpu_times[act]
    tg = instance.gpu_times[act]
    nonres = (~instance.resident[act]).astype(np.int64)
    masks = np.arange(1 << n)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(np.float64)
    t_gpu = bits @ tg
    t_cpu = (1 - bits) @ tc
    mk = np.maximum(t_cpu, t_gpu)
    if instance.gpu_capacity is not None:
        feasible = (bits @ nonres) <= instance.gpu_capacity
        mk = np.where(feasible, mk, np.inf)
    return float(mk.min())
