"""Workload/feature trace data model, gating math, synthetic generation, and file I/O.

A trace records, per token step and per MoE layer, the gating inputs (hidden
states) and the resulting expert workloads (token counts routed to each
expert).  Decode traces carry one step per generated token with ``batch_size``
hidden rows; prefill traces aggregate all prompt positions into a single step.
Traces without hidden states ("workload-only") are accepted everywhere except
by feature-based prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import TraceError

TRACE_FORMAT = "moesim-trace-v1"
GATES_FORMAT = "moesim-gates-v1"
RESIDUALS_FORMAT = "moesim-residuals-v1"

# Gate logit magnitude for the synthetic generator, chosen so softmax stays
# fairly flat (wide expert pools route with modest confidence).  Top-k
# selection only depends on the logit ordering, so this does not affect
# workload dynamics, only probability-valued consumers.
_GATE_LOGIT_SCALE = 0.4

# Per-expert gate column scale range; unequal column norms give experts
# unequal logit variance, as routing specialization does.
_GATE_NORM_SPREAD = (0.15, 1.85)

MODEL_PRESETS = {
    "deepseek": dict(num_layers=27, num_routed_experts=64, num_shared_experts=2,
                     top_k=6, hidden_dim=2048),
    "qwen": dict(num_layers=48, num_routed_experts=128, num_shared_experts=0,
                 top_k=8, hidden_dim=2048),
    "mixtral": dict(num_layers=32, num_routed_experts=8, num_shared_experts=0,
                    top_k=2, hidden_dim=4096),
}


@dataclass(frozen=True)
class ModelConfig:
    """MoE shape: layer count, routed/shared expert counts, top-k, hidden width."""

    num_layers: int
    num_routed_experts: int
    num_shared_experts: int
    top_k: int
    hidden_dim: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise TraceError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise TraceError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not (1 <= self.top_k <= self.num_routed_experts):
            raise TraceError(
                f"top_k must be in [1, num_routed_experts], got "
                f"top_k={self.top_k}, num_routed_experts={self.num_routed_experts}")
        if self.num_shared_experts < 0:
            raise TraceError("num_shared_experts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_routed_experts": self.num_routed_experts,
            "num_shared_experts": self.num_shared_experts,
            "top_k": self.top_k,
            "hidden_dim": self.hidden_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(d[k]) for k in
                      ("num_layers", "num_routed_experts", "num_shared_experts",
                       "top_k", "hidden_dim")})

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise TraceError(f"unknown model preset {name!r}; "
                             f"choose from {sorted(MODEL_PRESETS)}")
        return cls(**MODEL_PRESETS[name])


@dataclass
class GateParams:
    """Per-layer gate weight matrices, shape (num_layers, hidden_dim, num_routed_experts)."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise TraceError(f"gate weights must be 3-d (L, d, N), got shape "
                             f"{self.weights.shape}")

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]

    def layer(self, l: int) -> np.ndarray:
        return self.weights[l]

    def check_shape(self, config: ModelConfig) -> None:
        expect = (config.num_layers, config.hidden_dim, config.num_routed_experts)
        if self.weights.shape != expect:
            raise TraceError(
                f"gate weights shape {self.weights.shape} does not match model "
                f"config {expect}")


@dataclass
class ResidualVectors:
    """Calibrated per-layer mean feature shift, shape (num_layers - 1, hidden_dim).

    Entry ``l`` corrects layer ``l`` features toward layer ``l + 1``; the last
    layer has no entry because nothing is predicted beyond it.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise TraceError(f"residual vectors must be 2-d (L-1, d), got shape "
                             f"{self.values.shape}")

    @property
    def num_layers(self) -> int:
        """Layer count of the model these residuals were calibrated for."""
        return self.values.shape[0] + 1

    def layer(self, l: int) -> np.ndarray:
        return self.values[l]

    def check_shape(self, config: ModelConfig) -> None:
        expect = (config.num_layers - 1, config.hidden_dim)
        if self.values.shape != expect:
            raise TraceError(
                f"residual vectors shape {self.values.shape} does not match "
                f"model config {expect}")

    @classmethod
    def zeros(cls, num_layers: int, hidden_dim: int) -> "ResidualVectors":
        return cls(np.zeros((num_layers - 1, hidden_dim)))


@dataclass
class TokenStep:
    """One decode step (or one aggregated prefill step).

    workloads: int array (num_layers, N); entry is the token count routed to
    that expert at this step.
    hidden: optional float array (num_layers, tokens, hidden_dim) holding the
    gating input of every aggregated token position.
    """

    token_index: int
    tokens: int
    workloads: np.ndarray
    hidden: np.ndarray | None = None
    eos: bool = False

    def __post_init__(self):
        self.workloads = np.asarray(self.workloads, dtype=np.int64)
        if self.hidden is not None:
            self.hidden = np.asarray(self.hidden, dtype=np.float64)


@dataclass
class Trace:
    """Ordered token steps plus the model shape and (optionally) gate parameters."""

    model_config: ModelConfig
    batch_size: int
    phase: str
    steps: list[TokenStep] = field(default_factory=list)
    generator_seed: int = 0
    gate_params: GateParams | None = None
    generator_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in ("prefill", "decode"):
            raise TraceError(f"phase must be 'prefill' or 'decode', got {self.phase!r}")
        if self.batch_size < 1:
            raise TraceError("batch_size must be >= 1")

    @property
    def has_features(self) -> bool:
        return bool(self.steps) and all(s.hidden is not None for s in self.steps)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def validate(self, check_gating: bool = False) -> None:
        """Structural validation; with check_gating also recompute workloads."""
        cfg = self.model_config
        L, N, d = cfg.num_layers, cfg.num_routed_experts, cfg.hidden_dim
        if self.gate_params is not None:
            self.gate_params.check_shape(cfg)
        for i, step in enumerate(self.steps):
            if step.workloads.shape != (L, N):
                raise TraceError(
                    f"step {i}: workloads shape {step.workloads.shape} != ({L}, {N})")
            if (step.workloads < 0).any():
                lay, exp = np.argwhere(step.workloads < 0)[0]
                raise TraceError(
                    f"step {i} layer {lay}: negative workload at expert {exp}")
            if step.hidden is not None:
                if step.hidden.shape != (L, step.tokens, d):
                    raise TraceError(
                        f"step {i}: hidden shape {step.hidden.shape} != "
                        f"({L}, {step.tokens}, {d})")
            if check_gating and step.hidden is not None and self.gate_params is not None:
                for l in range(L):
                    recomputed = derive_workloads(
                        step.hidden[l], self.gate_params.layer(l), cfg.top_k)
                    if not np.array_equal(recomputed, step.workloads[l]):
                        raise TraceError(
                            f"step {i} layer {l}: stored workloads do not match "
                            f"gating recomputation")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically shifted by the row max."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken toward the lower index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return order[:k]


def gate_scores(hidden: np.ndarray, gate_matrix: np.ndarray) -> np.ndarray:
    """Softmax expert scores for each token row, shape (tokens, N)."""
    hidden = np.atleast_2d(np.asarray(hidden, dtype=np.float64))
    gate_matrix = np.asarray(gate_matrix, dtype=np.float64)
    if hidden.shape[1] != gate_matrix.shape[0]:
        raise TraceError(
            f"hidden dim {hidden.shape[1]} does not match gate matrix rows "
            f"{gate_matrix.shape[0]}")
    return softmax(hidden @ gate_matrix)


def derive_workloads(hidden: np.ndarray, gate_matrix: np.ndarray, k: int) -> np.ndarray:
    """Route each token row to its top-k experts and count tokens per expert.

    Returns an int vector of length N summing to ``tokens * k``.
    """
    scores = gate_scores(hidden, gate_matrix)
    n_experts = scores.shape[1]
    if not (1 <= k <= n_experts):
        raise TraceError(f"top_k {k} out of range for {n_experts} experts")
    workload = np.zeros(n_experts, dtype=np.int64)
    for row in scores:
        workload[topk_indices(row, k)] += 1
    return workload


def _renormalize_rows(h: np.ndarray, target_norm: float) -> np.ndarray:
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return h * (target_norm / norms)


def generate_synthetic_trace(
    config: ModelConfig,
    batch_size: int,
    num_steps: int,
    locality: float = 0.9,
    drift_scale: float = 0.0,
    noise_scale: float = 0.0,
    seed: int = 0,
    phase: str = "decode",
) -> Trace:
    """Generate a featureful trace with controllable temporal locality and drift.

    Each sequence's layer-0 hidden state evolves as an AR(1) mix,
    ``h' = locality * h + (1 - locality) * fresh``, renormalized to a constant
    norm so gating temperatures stay comparable across steps.  Layer
    transitions add a fixed per-layer drift vector (norm ``drift_scale *
    sqrt(d)``) plus fresh noise with per-component scale ``noise_scale``;
    no renormalization is applied there, so calibration recovers the drift
    exactly when ``noise_scale`` is zero.  Deterministic in ``seed``.
    """
    if not (0.0 <= locality <= 1.0):
        raise TraceError(f"locality must be in [0, 1], got {locality}")
    if drift_scale < 0 or noise_scale < 0:
        raise TraceError("drift_scale and noise_scale must be >= 0")
    if num_steps < 1:
        raise TraceError("num_steps must be >= 1")
    if batch_size < 1:
        raise TraceError("batch_size must be >= 1")

    rng = np.random.default_rng(seed)
    L, N, d, k = (config.num_layers, config.num_routed_experts,
                  config.hidden_dim, config.top_k)
    target_norm = float(np.sqrt(d))

    weights = rng.normal(size=(L, d, N)) * (_GATE_LOGIT_SCALE / np.sqrt(d))
    col_scale = rng.permuted(
        np.tile(np.linspace(*_GATE_NORM_SPREAD, N), (L, 1)), axis=1)
    gate = GateParams(weights * col_scale[:, None, :])
    if L > 1:
        raw = rng.normal(size=(L - 1, d))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        drifts = drift_scale * target_norm * raw
    else:
        drifts = np.zeros((0, d))

    state = _renormalize_rows(rng.normal(size=(batch_size, d)), target_norm)

    def layer_stack(rows: np.ndarray) -> np.ndarray:
        stack = np.empty((L, rows.shape[0], d))
        stack[0] = rows
        for l in range(L - 1):
            noise = rng.normal(size=rows.shape) * noise_scale
            stack[l + 1] = stack[l] + drifts[l] + noise
        return stack

    def workloads_for(stack: np.ndarray) -> np.ndarray:
        w = np.empty((L, N), dtype=np.int64)
        for l in range(L):
            w[l] = derive_workloads(stack[l], gate.layer(l), k)
        return w

    steps: list[TokenStep] = []
    if phase == "prefill":
        # All prompt positions aggregate into one step; positions within a
        # sequence follow the same AR chain as decode steps would.
        rows = np.empty((batch_size * num_steps, d))
        for t in range(num_steps):
            rows[t * batch_size:(t + 1) * batch_size] = state
            if t < num_steps - 1:
                fresh = rng.normal(size=state.shape)
                state = _renormalize_rows(
                    locality * state + (1.0 - locality) * fresh, target_norm)
        stack = layer_stack(rows)
        steps.append(TokenStep(token_index=0, tokens=rows.shape[0],
                               workloads=workloads_for(stack), hidden=stack,
                               eos=True))
    else:
        for t in range(num_steps):
            stack = layer_stack(state)
            steps.append(TokenStep(token_index=t, tokens=batch_size,
                                   workloads=workloads_for(stack), hidden=stack,
                                   eos=(t == num_steps - 1)))
            if t < num_steps - 1:
                fresh = rng.normal(size=state.shape)
                state = _renormalize_rows(
                    locality * state + (1.0 - locality) * fresh, target_norm)

    return Trace(
        model_config=config,
        batch_size=batch_size,
        phase=phase,
        steps=steps,
        generator_seed=seed,
        gate_params=gate,
        generator_params={
            "num_steps": num_steps,
            "locality": locality,
            "drift_scale": drift_scale,
            "noise_scale": noise_scale,
            "drift_vectors": drifts.tolist(),
        },
    )


# ---------------------------------------------------------------------------
# File I/O.  Traces are line-delimited JSON: one header object, then one
# object per token step.  Gate parameters and residual vectors live in
# sidecar files with their own headers.  json round-trips Python floats
# exactly, which keeps save/load an identity on the arrays.
# ---------------------------------------------------------------------------

def save_trace(trace: Trace, path) -> None:
    header = {
        "format": TRACE_FORMAT,
        "model_config": trace.model_config.to_dict(),
        "batch_size": trace.batch_size,
        "phase": trace.phase,
        "generator_seed": trace.generator_seed,
        "has_features": trace.has_features,
        "generator_params": trace.generator_params,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for step in trace.steps:
            rec = {
                "token_index": step.token_index,
                "tokens": step.tokens,
                "eos": step.eos,
                "workloads": step.workloads.tolist(),
            }
            if step.hidden is not None:
                rec["hidden"] = step.hidden.tolist()
            f.write(json.dumps(rec) + "\n")


def load_trace(path) -> Trace:
    """Load and structurally validate a trace file.

    Rejects malformed records with the offending line number.
    """
    with open(path) as f:
        lines = f.readlines()
    if not lines:
        raise TraceError(f"{path}: empty trace file")
    header = _parse_json_line(lines[0], path, 1)
    if header.get("format") != TRACE_FORMAT:
        raise TraceError(f"{path}:1: not a trace file (format tag "
                         f"{header.get('format')!r})")
    config = ModelConfig.from_dict(header["model_config"])
    L, N, d = config.num_layers, config.num_routed_experts, config.hidden_dim
    has_features = bool(header.get("has_features", False))

    batch_size = int(header["batch_size"])
    steps = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = _parse_json_line(line, path, lineno)
        step_id = rec.get("token_index", lineno - 2)
        workloads = rec.get("workloads")
        if workloads is None or len(workloads) != L:
            raise TraceError(
                f"{path}:{lineno}: step {step_id}: expected {L} per-layer "
                f"workload vectors")
        for l, wl in enumerate(workloads):
            if len(wl) != N:
                raise TraceError(
                    f"{path}:{lineno}: step {step_id} layer {l}: workload "
                    f"vector length {len(wl)} != {N}")
            for v in wl:
                if not isinstance(v, int) or v < 0:
                    raise TraceError(
                        f"{path}:{lineno}: step {step_id} layer {l}: workload "
                        f"entries must be nonnegative integers, got {v!r}")
        tokens = int(rec.get("tokens", batch_size))
        hidden = None
        if "hidden" in rec:
            hidden = np.asarray(rec["hidden"], dtype=np.float64)
            if hidden.shape != (L, tokens, d):
                raise TraceError(
                    f"{path}:{lineno}: step {step_id}: hidden shape "
                    f"{hidden.shape} != ({L}, {tokens}, {d})")
        elif has_features:
            raise TraceError(
                f"{path}:{lineno}: step {step_id}: header declares features "
                f"but record has none")
        steps.append(TokenStep(token_index=int(step_id), tokens=tokens,
                               workloads=np.asarray(workloads, dtype=np.int64),
                               hidden=hidden, eos=bool(rec.get("eos", False))))

    trace = Trace(
        model_config=config,
        batch_size=batch_size,
        phase=header["phase"],
        steps=steps,
        generator_seed=int(header.get("generator_seed", 0)),
        generator_params=header.get("generator_params", {}),
    )
    trace.validate()
    return trace


def _parse_json_line(line: str, path, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise TraceError(f"{path}:{lineno}: malformed record: {e}") from e
    if not isinstance(rec, dict):
        raise TraceError(f"{path}:{lineno}: record is not an object")
    return rec


def save_gate_params(gate: GateParams, path, spec: dict | None = None) -> None:
    L, d, N = gate.weights.shape
    header = {"format": GATES_FORMAT, "num_layers": L, "hidden_dim": d,
              "num_routed_experts": N}
    if spec is not None:
        header["spec"] = spec
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for l in range(L):
            f.write(json.dumps({"layer": l,
                                "weights": gate.weights[l].tolist()}) + "\n")


def load_gate_params(path) -> GateParams:
    with open(path) as f:
        lines = f.readlines()
    if not lines:
        raise TraceError(f"{path}: empty gate parameter file")
    header = _parse_json_line(lines[0], path, 1)
    if header.get("format") != GATES_FORMAT:
        raise TraceError(f"{path}:1: not a gate parameter file")
    L, d, N = (int(header["num_layers"]), int(header["hidden_dim"]),
               int(header["num_routed_experts"]))
    weights = np.zeros((L, d, N))
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = _parse_json_line(line, path, lineno)
        l = int(rec["layer"])
        if not (0 <= l < L):
            raise TraceError(f"{path}:{lineno}: layer {l} out of range")
        mat = np.asarray(rec["weights"], dtype=np.float64)
        if mat.shape != (d, N):
            raise TraceError(
                f"{path}:{lineno}: layer {l} matrix shape {mat.shape} != ({d}, {N})")
        weights[l] = mat
        seen.add(l)
    if len(seen) != L:
        raise TraceError(f"{path}: expected {L} layer matrices, found {len(seen)}")
    return GateParams(weights)


def save_residuals(residuals: ResidualVectors, path, spec: dict | None = None) -> None:
    n_minus_1, d = residuals.values.shape
    header = {"format": RESIDUALS_FORMAT, "num_layers": n_minus_1 + 1,
              "hidden_dim": d}
    if spec is not None:
        header["spec"] = spec
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for l in range(n_minus_1):
            f.write(json.dumps({"layer": l,
                                "values": residuals.values[l].tolist()}) + "\n")


def load_residuals(path) -> ResidualVectors:
    with open(path) as f:
        lines = f.readlines()
    if not lines:
        raise TraceError(f"{path}: empty residual file")
    header = _parse_json_line(lines[0], path, 1)
    if header.get("format") != RESIDUALS_FORMAT:
        raise TraceError(f"{path}:1: not a residual vector file")
    L, d = int(header["num_layers"]), int(header["hidden_dim"])
    values = np.zeros((L - 1, d))
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = _parse_json_line(line, path, lineno)
        l = int(rec["layer"])
        if not (0 <= l < L - 1):
            raise TraceError(f"{path}:{lineno}: layer {l} out of range")
        vec = np.asarray(rec["values"], dtype=np.float64)
        if vec.shape != (d,):
            raise TraceError(
                f"{path}:{lineno}: layer {l} vector length {vec.shape} != {d}")
        values[l] = vec
        seen.add(l)
    if len(seen) != L - 1:
        raise TraceError(f"{path}: expected {L - 1} residual vectors, found {len(seen)}")
    return ResidualVectors(values)
