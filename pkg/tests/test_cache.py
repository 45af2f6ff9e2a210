import numpy as np
import pytest

from moesim.cache import (CacheStats, force_insert, init_cache, lookup,
                          record_and_maybe_replace, replay_trace)
from moesim.errors import CacheError
from moesim.trace import ModelConfig, generate_synthetic_trace


def fresh_cache(n=8, cap=4, w=4, u=2, policy="workload", seed=0):
    return init_cache(layer=0, num_experts=n, capacity=cap, w_size=w,
                      u_size=u, policy=policy, seed=seed)


# --- init ---------------------------------------------------------------------

def test_init_partitions_experts():
    st = fresh_cache(n=8, cap=4)
    assert len(st.expert_on_gpu) == 4
    assert len(st.expert_on_cpu) == 4
    assert set(st.expert_on_gpu) | set(st.expert_on_cpu) == set(range(8))


def test_init_deterministic_per_seed():
    a = fresh_cache(seed=9)
    b = fresh_cache(seed=9)
    assert np.array_equal(a.on_gpu, b.on_gpu)


def test_init_rejects_full_capacity():
    with pytest.raises(CacheError):
        fresh_cache(n=8, cap=8)
    with pytest.raises(CacheError):
        fresh_cache(n=8, cap=0)


def test_init_rejects_oversized_update():
    with pytest.raises(CacheError, match="u_size"):
        init_cache(0, 8, 6, 4, 3, policy="workload")  # min(6, 2) = 2 < 3


def test_init_larger_capacity_nests_smaller():
    small = init_cache(0, 16, 4, 4, 1, seed=3)
    large = init_cache(0, 16, 8, 4, 1, seed=3)
    assert set(small.expert_on_gpu) <= set(large.expert_on_gpu)


# --- windowed replacement -------------------------------------------------------

def test_worked_replacement_example():
    # cache_size=4, w_size=4, u_size=2, 8 experts, experts 0-3 cached.
    # Accumulated scores [9,1,8,2 | 7,0,6,0]: evict the two lowest-score
    # cached experts (1 and 3), admit the two highest-score uncached (4, 6).
    st = fresh_cache(n=8, cap=4, w=4, u=2)
    st.on_gpu[:] = False
    st.on_gpu[[0, 1, 2, 3]] = True
    per_token = np.array([9.0, 1.0, 8.0, 2.0, 7.0, 0.0, 6.0, 0.0]) / 4.0
    events = [record_and_maybe_replace(st, per_token, t) for t in range(4)]
    assert events[:3] == [None, None, None]
    ev = events[3]
    assert sorted(ev.evicted) == [1, 3]
    assert sorted(ev.admitted) == [4, 6]
    assert sorted(st.expert_on_gpu) == [0, 2, 4, 6]
    # scores reset exactly to zero after the swap
    assert (st.scores == 0.0).all()


def test_replacement_tie_breaks_to_lower_index():
    st = fresh_cache(n=8, cap=4, w=1, u=2)
    st.on_gpu[:] = False
    st.on_gpu[[0, 1, 2, 3]] = True
    ev = record_and_maybe_replace(st, np.zeros(8), 0)
    assert ev.evicted == [0, 1]
    assert ev.admitted == [4, 5]


def test_zero_update_size_is_noop():
    st = fresh_cache(n=8, cap=4, w=2, u=0)
    before = st.on_gpu.copy()
    ev1 = record_and_maybe_replace(st, np.arange(8.0), 0)
    ev2 = record_and_maybe_replace(st, np.arange(8.0), 1)
    assert ev1 is None
    assert ev2 is not None and ev2.evicted == [] and ev2.admitted == []
    assert np.array_equal(st.on_gpu, before)
    assert (st.scores == 0.0).all()  # window still resets


def test_scores_accumulate_elementwise_between_events():
    st = fresh_cache(n=4, cap=2, w=3, u=1)
    w1 = np.array([1.0, 0.0, 2.0, 0.0])
    w2 = np.array([0.0, 5.0, 1.0, 0.0])
    record_and_maybe_replace(st, w1, 0)
    record_and_maybe_replace(st, w2, 1)
    assert np.array_equal(st.scores, w1 + w2)


def test_eos_stops_updates_without_replacement():
    st = fresh_cache(n=8, cap=4, w=2, u=1)
    record_and_maybe_replace(st, np.ones(8), 0)
    ev = record_and_maybe_replace(st, np.ones(8), 1, is_eos=True)
    assert ev is None
    assert st.stopped
    assert record_and_maybe_replace(st, np.ones(8), 2) is None


def test_partition_invariant_under_random_updates():
    rng = np.random.default_rng(3)
    st = fresh_cache(n=12, cap=5, w=3, u=2)
    for t in range(60):
        record_and_maybe_replace(st, rng.integers(0, 9, 12).astype(float), t)
        assert len(st.expert_on_gpu) == 5
        assert set(st.expert_on_gpu) | set(st.expert_on_cpu) == set(range(12))
        assert set(st.expert_on_gpu) & set(st.expert_on_cpu) == set()


def test_admitted_scores_dominate_evicted():
    rng = np.random.default_rng(5)
    st = fresh_cache(n=10, cap=4, w=4, u=2)
    window = []
    for t in range(40):
        w = rng.integers(0, 7, 10).astype(float)
        window.append(w)
        ev = record_and_maybe_replace(st, w, t)
        if ev is not None:
            acc = np.sum(window, axis=0)
            assert min(acc[ev.admitted]) >= max(acc[ev.evicted]) - 1e-12
            window = []


def test_workload_policy_rejects_bad_vector():
    st = fresh_cache(n=8, cap=4)
    with pytest.raises(CacheError):
        record_and_maybe_replace(st, np.ones(5), 0)


def test_score_policy_requires_gate_scores():
    st = fresh_cache(policy="score")
    with pytest.raises(CacheError, match="gate scores"):
        record_and_maybe_replace(st, np.ones(8), 0)


def test_score_policy_accumulates_scores_not_counts():
    st = fresh_cache(n=8, cap=4, w=1, u=1, policy="score")
    st.on_gpu[:] = False
    st.on_gpu[[0, 1, 2, 3]] = True
    counts = np.array([5.0, 0, 0, 0, 1, 0, 0, 0])
    probs = np.array([0.0, 0, 0, 0, 0, 0.9, 0, 0])
    ev = record_and_maybe_replace(st, counts, 0, gate_scores=probs)
    assert ev.admitted == [5]  # highest summed probability off-GPU


def test_replacement_transfer_cost_charged():
    st = fresh_cache(n=8, cap=4, w=1, u=2)
    ev = record_and_maybe_replace(st, np.ones(8), 0, trans_time_ms=3.0)
    assert ev.transfer_cost_ms == pytest.approx(6.0)


# --- lookup and LRU --------------------------------------------------------------

def test_lookup_hit_and_miss():
    st = fresh_cache()
    cached = int(st.expert_on_gpu[0])
    uncached = int(st.expert_on_cpu[0])
    assert lookup(st, cached) is True
    assert lookup(st, uncached) is False


def test_lookup_out_of_range():
    st = fresh_cache()
    with pytest.raises(CacheError):
        lookup(st, 99)


def test_workload_policy_lookup_does_not_mutate():
    st = fresh_cache()
    before = st.on_gpu.copy()
    lookup(st, int(st.expert_on_cpu[0]))
    assert np.array_equal(st.on_gpu, before)


def test_lru_miss_inserts_and_evicts_least_recent():
    st = fresh_cache(n=6, cap=2, policy="lru")
    st.on_gpu[:] = False
    st.on_gpu[[0, 1]] = True
    lookup(st, 0)          # 0 is now most recent
    assert lookup(st, 4) is False
    # 1 was least recently used, so it made way for 4
    assert sorted(st.expert_on_gpu) == [0, 4]
    assert lookup(st, 1) is False
    assert sorted(st.expert_on_gpu) == [1, 4]  # 0 evicted (oldest now)


def test_lru_windowing_is_disabled():
    st = fresh_cache(n=6, cap=2, w=1, u=1, policy="lru")
    before = st.on_gpu.copy()
    assert record_and_maybe_replace(st, np.ones(6), 0) is None
    assert np.array_equal(st.on_gpu, before)


def test_force_insert_evicts_lowest_score():
    st = fresh_cache(n=6, cap=2, w=8, u=1)
    st.on_gpu[:] = False
    st.on_gpu[[0, 1]] = True
    record_and_maybe_replace(st, np.array([4.0, 1.0, 0, 0, 0, 0]), 0)
    victim = force_insert(st, 5)
    assert victim == 1
    assert sorted(st.expert_on_gpu) == [0, 5]


# --- hit-rate accounting -----------------------------------------------------------

def test_hit_rate_overall():
    stats = CacheStats()
    for hit in (True, True, True, False):
        stats.record(0, 0, hit)
    assert stats.hit_rate("overall") == 0.75


def test_hit_rate_requires_records():
    with pytest.raises(CacheError):
        CacheStats().hit_rate("overall")


def test_hit_rate_per_token_group_counts():
    stats = CacheStats()
    for token in range(64):
        stats.record(0, token, token % 2 == 0)
    rates, empty = stats.hit_rate("per-token-group", group_size=8)
    assert len(rates) == 8
    assert empty == []
    assert all(r == 0.5 for r in rates.values())


def test_hit_rate_empty_group_excluded_and_flagged():
    stats = CacheStats()
    stats.record(0, 0, True)
    stats.record(0, 17, False)
    rates, empty = stats.hit_rate("per-token-group", group_size=8)
    assert set(rates) == {0, 2}
    assert empty == [1]


def test_hit_rate_per_layer():
    stats = CacheStats()
    stats.record(0, 0, True)
    stats.record(1, 0, False)
    stats.record(1, 1, True)
    assert stats.hit_rate("per-layer") == {0: 1.0, 1: 0.5}


# --- trace replay -------------------------------------------------------------------

def test_replay_stationary_trace_reaches_full_hit_rate():
    cfg = ModelConfig(num_layers=1, num_routed_experts=8,
                      num_shared_experts=0, top_k=2, hidden_dim=16)
    tr = generate_synthetic_trace(cfg, batch_size=2, num_steps=64,
                                  locality=1.0, noise_scale=0.0, seed=31)
    stats, events = replay_trace(tr, layer=0, capacity=4, w_size=4, u_size=2,
                                 policy="workload", seed=1)
    assert events, "stationary replay should still trigger window swaps"
    rates, _ = stats.hit_rate("per-token-group", group_size=8)
    groups = [rates[g] for g in sorted(rates)]
    # After the first replacement the hot set is cached and stays cached.
    assert all(r == 1.0 for r in groups[1:])
    for a, b in zip(groups[1:], groups[2:]):
        assert b >= a


def test_replay_deterministic(small_config):
    tr = generate_synthetic_trace(small_config, 4, 24, locality=0.85, seed=77)
    for policy in ("workload", "lru", "score"):
        s1, e1 = replay_trace(tr, 0, 4, 4, 1, policy=policy, seed=5)
        s2, e2 = replay_trace(tr, 0, 4, 4, 1, policy=policy, seed=5)
        assert s1.records == s2.records
        assert [(e.token_index, e.evicted, e.admitted) for e in e1] == \
               [(e.token_index, e.evicted, e.admitted) for e in e2]


def test_replay_score_policy_needs_features(small_config):
    from moesim.trace import TokenStep, Trace
    steps = [TokenStep(token_index=0, tokens=1,
                       workloads=np.ones((4, 16), dtype=np.int64))]
    tr = Trace(model_config=small_config, batch_size=1, phase="decode",
               steps=steps)
    with pytest.raises(CacheError, match="featureful"):
        replay_trace(tr, 0, 4, 4, 1, policy="score", seed=0)


def test_replay_workload_beats_lru_and_score_on_locality_trace():
    # Scaled-down version of the acceptance relationship.
    cfg = ModelConfig(num_layers=1, num_routed_experts=16,
                      num_shared_experts=0, top_k=2, hidden_dim=32)
    means = {}
    for policy in ("workload", "lru", "score"):
        rates = []
        for seed in range(8):
            tr = generate_synthetic_trace(cfg, batch_size=16, num_steps=48,
                                          locality=0.85, seed=500 + seed)
            stats, _ = replay_trace(tr, 0, 8, 4, 1, policy=policy, seed=seed)
            rates.append(stats.hit_rate("overall"))
        means[policy] = np.mean(rates)
    assert means["workload"] > means["lru"]
    assert means["workload"] > means["score"]
