"""Next-layer expert prediction for prefetching, plus calibration and metrics.

Four predictor kinds are provided.  The residual kind shifts the current
layer's gating inputs by a calibrated mean inter-layer feature delta before
applying the next layer's gate; the feature kind applies the next gate to the
raw inputs; the statistical kind ranks experts by calibration-time activation
counts regardless of input; the random kind ranks them by a seeded shuffle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PrefetchError
from .trace import (ResidualVectors, Trace, derive_workloads,
                    topk_indices)

PREDICTOR_KINDS = ("residual", "feature", "statistical", "random")


@dataclass
class PrefetchDecision:
    """Prediction for one upcoming layer.

    ``prefetch_set`` holds the chosen experts ordered by predicted workload
    (descending, ties toward the lower index).
    """

    layer: int
    predicted_workloads: np.ndarray
    prefetch_set: np.ndarray


@dataclass
class Predictor:
    kind: str
    residuals: ResidualVectors | None = None
    frequency_table: np.ndarray | None = None
    seed: int = 0
    n_experts: int | None = None
    _rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise PrefetchError(f"unknown predictor kind {self.kind!r}; "
                                f"choose from {PREDICTOR_KINDS}")
        if self.kind == "residual" and self.residuals is None:
            raise PrefetchError("residual predictor requires calibrated residual "
                                "vectors")
        if self.kind == "statistical" and self.frequency_table is None:
            raise PrefetchError("statistical predictor requires a calibration "
                                "frequency table")
        if self.kind == "random":
            self._rng = np.random.default_rng(self.seed)


def residual_predictor(residuals: ResidualVectors) -> Predictor:
    return Predictor(kind="residual", residuals=residuals)


def feature_predictor() -> Predictor:
    return Predictor(kind="feature")


def statistical_predictor(calibration_trace: Trace) -> Predictor:
    """Rank experts by their per-layer activation counts in the calibration trace."""
    table = activation_frequency_table(calibration_trace)
    return Predictor(kind="statistical", frequency_table=table)


def random_predictor(seed: int = 0, n_experts: int | None = None) -> Predictor:
    return Predictor(kind="random", seed=seed, n_experts=n_experts)


def activation_frequency_table(trace: Trace) -> np.ndarray:
    """Per-layer summed workloads over all trace steps, shape (L, N)."""
    if not trace.steps:
        raise PrefetchError("calibration trace has no steps")
    cfg = trace.model_config
    table = np.zeros((cfg.num_layers, cfg.num_routed_experts), dtype=np.int64)
    for step in trace.steps:
        table += step.workloads
    return table


def calibrate_residuals(calibration_trace: Trace) -> ResidualVectors:
    """Mean hidden-state delta between adjacent layers over all calibration tokens."""
    if not calibration_trace.has_features:
        raise PrefetchError("residual calibration requires a trace with hidden "
                            "states")
    cfg = calibration_trace.model_config
    L, d = cfg.num_layers, cfg.hidden_dim
    if L < 2:
        raise PrefetchError("residual calibration requires at least two layers")
    sums = np.zeros((L - 1, d))
    count = 0
    for step in calibration_trace.steps:
        sums += step.hidden[1:].sum(axis=1) - step.hidden[:-1].sum(axis=1)
        count += step.hidden.shape[1]
    if count == 0:
        raise PrefetchError("calibration trace contains no tokens")
    return ResidualVectors(sums / count)


def predict_next_layer(
    predictor: Predictor,
    hidden_states: np.ndarray | None,
    gate_next: np.ndarray | None,
    k: int,
    prefetch_size: int,
    current_layer: int,
) -> PrefetchDecision:
    """Predict layer ``current_layer + 1`` workloads and pick a prefetch set.

    ``hidden_states`` are the current layer's gating inputs (tokens, d) and
    ``gate_next`` is the next layer's gate matrix; both may be None for the
    input-independent kinds.
    """
    if prefetch_size < 0:
        raise PrefetchError("prefetch_size must be >= 0")
    if predictor.kind in ("residual", "feature"):
        if hidden_states is None or gate_next is None:
            raise PrefetchError(f"{predictor.kind} predictor requires hidden "
                                f"states and the next layer's gate")
        hidden_states = np.atleast_2d(np.asarray(hidden_states, dtype=np.float64))
        if predictor.kind == "residual":
            if current_layer >= predictor.residuals.num_layers - 1:
                raise PrefetchError(
                    f"no residual vector for layer {current_layer}; the last "
                    f"layer has nothing to prefetch")
            shifted = hidden_states + predictor.residuals.layer(current_layer)
            predicted = derive_workloads(shifted, gate_next, k)
        else:
            predicted = derive_workloads(hidden_states, gate_next, k)
    elif predictor.kind == "statistical":
        table = predictor.frequency_table
        if not (0 <= current_layer + 1 < table.shape[0]):
            raise PrefetchError(f"layer {current_layer + 1} outside calibration "
                                f"table with {table.shape[0]} layers")
        predicted = table[current_layer + 1].copy()
    else:  # random
        n = predictor.n_experts
        if n is None and gate_next is not None:
            n = np.asarray(gate_next).shape[1]
        if n is None:
            raise PrefetchError("random predictor needs n_experts or gate_next "
                                "to size its score vector")
        predicted = predictor._rng.permutation(n).astype(np.int64)

    prefetch_set = topk_indices(predicted.astype(np.float64),
                                min(prefetch_size, len(predicted)))
    return PrefetchDecision(layer=current_layer + 1,
                            predicted_workloads=np.asarray(predicted, dtype=np.int64),
                            prefetch_set=prefetch_set)


def prefetch_accuracy(predicted_set, true_workloads, k: int) -> float:
    """Share of the true top-k workload experts present in the predicted top-k."""
    predicted_set = np.asarray(predicted_set)
    if k < 1:
        raise PrefetchError("k must be >= 1")
    if len(predicted_set) < k:
        raise PrefetchError(f"predicted set has {len(predicted_set)} experts, "
                            f"need at least k={k}")
    true_top = topk_indices(np.asarray(true_workloads, dtype=np.float64), k)
    return len(set(predicted_set[:k].tolist()) & set(true_top.tolist())) / k


@dataclass
class CosineSimilarityRow:
    layer: int
    corrected: float
    uncorrected: float
    tokens: int
    excluded: int


def cosine_similarity_report(trace: Trace,
                             residuals: ResidualVectors) -> list[CosineSimilarityRow]:
    """Per-layer mean cosine similarity to the next layer's gating inputs.

    Compares the residual-corrected current features against the raw ones.
    Token rows where either vector is zero are excluded and counted.
    """
    if not trace.has_features:
        raise PrefetchError("cosine similarity analysis requires a trace with "
                            "hidden states")
    cfg = trace.model_config
    if residuals.num_layers != cfg.num_layers:
        raise PrefetchError(
            f"residuals calibrated for {residuals.num_layers} layers, trace has "
            f"{cfg.num_layers}")
    rows = []
    for l in range(cfg.num_layers - 1):
        corr_sum = 0.0
        unc_sum = 0.0
        used = 0
        excluded = 0
        for step in trace.steps:
            cur = step.hidden[l]
            nxt = step.hidden[l + 1]
            shifted = cur + residuals.layer(l)
            for row in range(cur.shape[0]):
                n_cur = np.linalg.norm(cur[row])
                n_nxt = np.linalg.norm(nxt[row])
                n_shf = np.linalg.norm(shifted[row])
                if n_cur == 0.0 or n_nxt == 0.0 or n_shf == 0.0:
                    excluded += 1
                    continue
                corr_sum += float(shifted[row] @ nxt[row]) / (n_shf * n_nxt)
                unc_sum += float(cur[row] @ nxt[row]) / (n_cur * n_nxt)
                used += 1
        if used == 0:
            raise PrefetchError(f"layer {l}: every token excluded (zero vectors)")
        rows.append(CosineSimilarityRow(layer=l, corrected=corr_sum / used,
                                        uncorrected=unc_sum / used,
                                        tokens=used, excluded=excluded))
    return rows
