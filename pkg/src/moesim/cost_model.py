"""Profiled timing curves for expert execution and PCIe transfer.

The CPU and GPU compute curves are piecewise-linear in the expert workload,
anchored at (0, 0) and extrapolated linearly past the last sample.  A single
``trans_time`` constant covers the host-to-GPU weight transfer of one expert;
all routed experts are the same size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CostModelError


def _interp(w: float, xs: np.ndarray, ys: np.ndarray) -> float:
    """Piecewise-linear lookup with extrapolation beyond the last sample."""
    if w <= xs[-1]:
        return float(np.interp(w, xs, ys))
    if len(xs) >= 2:
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
    else:
        slope = 0.0
    return float(ys[-1] + slope * (w - xs[-1]))


def _validate_samples(samples, name: str) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise CostModelError(f"{name}: at least one (workload, ms) sample required")
    pts = sorted((float(w), float(ms)) for w, ms in samples)
    xs = [0.0]
    ys = [0.0]
    for w, ms in pts:
        if w < 0:
            raise CostModelError(f"{name}: negative workload sample {w}")
        if w == xs[-1]:
            if w == 0.0 and ms == 0.0:
                continue
            raise CostModelError(f"{name}: duplicate workload sample at w={w}")
        if ms < ys[-1]:
            raise CostModelError(
                f"{name}: latency must be nondecreasing in workload; "
                f"({w}, {ms}) falls below ({xs[-1]}, {ys[-1]})")
        xs.append(w)
        ys.append(ms)
    if len(xs) < 2:
        raise CostModelError(f"{name}: at least one nonzero-workload sample required")
    return np.asarray(xs), np.asarray(ys)


@dataclass
class CostModel:
    """Immutable timing model; lookups are pure.

    cpu_xs/cpu_ys and gpu_xs/gpu_ys hold the sorted sample tables including
    the (0, 0) anchor.
    """

    cpu_xs: np.ndarray
    cpu_ys: np.ndarray
    gpu_xs: np.ndarray
    gpu_ys: np.ndarray
    trans_time: float
    shared_expert_gpu_time: float = 0.0
    non_moe_layer_time: float = 0.0

    def t_cpu(self, w: float) -> float:
        """CPU execution time of one expert at workload w; 0 when unactivated."""
        if w < 0:
            raise CostModelError(f"workload must be >= 0, got {w}")
        if w == 0:
            return 0.0
        return _interp(w, self.cpu_xs, self.cpu_ys)

    def t_gpu_compute(self, w: float) -> float:
        if w < 0:
            raise CostModelError(f"workload must be >= 0, got {w}")
        if w == 0:
            return 0.0
        return _interp(w, self.gpu_xs, self.gpu_ys)

    def t_gpu(self, w: float, resident: bool = False) -> float:
        """GPU-side time of one expert: max of its transfer and its compute.

        The transfer term is 0 for an unactivated expert and for one already
        resident on the GPU.
        """
        if w < 0:
            raise CostModelError(f"workload must be >= 0, got {w}")
        if w == 0:
            return 0.0
        trans = 0.0 if resident else self.trans_time
        return max(trans, self.t_gpu_compute(w))

    def cpu_times(self, workloads) -> np.ndarray:
        return np.array([self.t_cpu(w) for w in workloads])

    def gpu_times(self, workloads, resident) -> np.ndarray:
        return np.array([self.t_gpu(w, bool(r))
                         for w, r in zip(workloads, resident)])

    def to_dict(self) -> dict:
        return {
            "cpu_samples": [[float(x), float(y)] for x, y in
                            zip(self.cpu_xs[1:], self.cpu_ys[1:])],
            "gpu_samples": [[float(x), float(y)] for x, y in
                            zip(self.gpu_xs[1:], self.gpu_ys[1:])],
            "trans_time": self.trans_time,
            "shared_expert_gpu_time": self.shared_expert_gpu_time,
            "non_moe_layer_time": self.non_moe_layer_time,
        }


def fit_cost_model(
    cpu_samples,
    gpu_samples,
    trans_time: float,
    shared_expert_gpu_time: float = 0.0,
    non_moe_layer_time: float = 0.0,
) -> CostModel:
    """Build a CostModel from profiled (workload, ms) samples.

    Samples are sorted, anchored at (0, 0), and rejected if latency decreases
    with workload.
    """
    if trans_time < 0:
        raise CostModelError(f"trans_time must be >= 0, got {trans_time}")
    if shared_expert_gpu_time < 0 or non_moe_layer_time < 0:
        raise CostModelError("per-layer constants must be >= 0")
    cpu_xs, cpu_ys = _validate_samples(cpu_samples, "cpu_curve")
    gpu_xs, gpu_ys = _validate_samples(gpu_samples, "gpu_compute_curve")
    return CostModel(cpu_xs=cpu_xs, cpu_ys=cpu_ys, gpu_xs=gpu_xs, gpu_ys=gpu_ys,
                     trans_time=float(trans_time),
                     shared_expert_gpu_time=float(shared_expert_gpu_time),
                     non_moe_layer_time=float(non_moe_layer_time))


def default_cost_model(shared_expert_gpu_time: float = 0.0,
                       non_moe_layer_time: float = 0.0) -> CostModel:
    """Bundled "3090-like" profile.

    Transfer dwarfs per-token GPU compute and the CPU slope dwarfs the GPU
    slope, so low-workload experts favor the CPU and high-workload experts
    favor the GPU.  Values are illustrative, not measurements.
    """
    return fit_cost_model(
        cpu_samples=[(1, 2.0), (16, 32.0), (64, 128.0), (256, 512.0)],
        gpu_samples=[(1, 0.10), (16, 1.60), (64, 6.40), (256, 25.6)],
        trans_time=3.0,
        shared_expert_gpu_time=shared_expert_gpu_time,
        non_moe_layer_time=non_moe_layer_time,
    )


def save_cost_model(model: CostModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model.to_dict(), f, indent=2)
        f.write("\n")


def load_cost_model(path) -> CostModel:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise CostModelError(f"{path}: malformed cost model file: {e}") from e
    try:
        return fit_cost_model(
            cpu_samples=[tuple(p) for p in doc["cpu_samples"]],
            gpu_samples=[tuple(p) for p in doc["gpu_samples"]],
            trans_time=float(doc["trans_time"]),
            shared_expert_gpu_time=float(doc.get("shared_expert_gpu_time", 0.0)),
            non_moe_layer_time=float(doc.get("non_moe_layer_time", 0.0)),
        )
    except KeyError as e:
        raise CostModelError(f"{path}: missing cost model key {e}") from e
