"""Aggregation of run reports and traces into CSV-shaped tables.

Tables are plain CSV with a fixed column order; provenance (the resolved
run spec) is embedded as leading ``#`` comment lines.  No plotting here,
figures are reproduced as data tables.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ReportError
from .trace import Trace, topk_indices


@dataclass
class HeatmapTable:
    """Adjacent-step co-occurrence of high-workload experts.

    Cell (m, n) counts steps where expert m is in the true top-``top_m``
    workload set at step i and expert n is in that set at step i + 1.
    ``diagonal_ratio`` is the mean fraction of top experts that stay top at
    the next step (diagonal mass / (top_m * (steps - 1))).
    """

    matrix: np.ndarray
    top_m: int
    steps: int

    @property
    def total_mass(self) -> int:
        return int(self.matrix.sum())

    @property
    def diagonal_ratio(self) -> float:
        return float(np.trace(self.matrix) / (self.top_m * (self.steps - 1)))


def locality_heatmap(trace: Trace, layer: int, top_m: int = 3) -> HeatmapTable:
    """Temporal-locality heatmap of one layer's high-workload experts."""
    cfg = trace.model_config
    if not (0 <= layer < cfg.num_layers):
        raise ReportError(f"layer {layer} out of range [0, {cfg.num_layers})")
    if trace.num_steps < 2:
        raise ReportError("heatmap needs at least 2 steps")
    if not (1 <= top_m <= cfg.num_routed_experts):
        raise ReportError(f"top_m must be in [1, {cfg.num_routed_experts}]")
    N = cfg.num_routed_experts
    matrix = np.zeros((N, N), dtype=np.int64)
    tops = [topk_indices(step.workloads[layer].astype(np.float64), top_m)
            for step in trace.steps]
    for prev, nxt in zip(tops[:-1], tops[1:]):
        for m in prev:
            matrix[m, nxt] += 1
    return HeatmapTable(matrix=matrix, top_m=top_m, steps=trace.num_steps)


def load_balance_table(reports: list[dict]) -> list[dict]:
    """CPU vs GPU busy time and the max/min imbalance ratio per run report."""
    rows = []
    for rep in reports:
        cpu = float(rep["cpu_busy_ms"])
        gpu = float(rep["gpu_busy_ms"])
        lo, hi = min(cpu, gpu), max(cpu, gpu)
        ratio = float("inf") if lo == 0 else hi / lo
        rows.append({
            "label": rep.get("label", ""),
            "cpu_busy_ms": cpu,
            "gpu_busy_ms": gpu,
            "imbalance_ratio": ratio,
        })
    return rows


def imbalance_ratio(cpu_busy_ms: float, gpu_busy_ms: float) -> float:
    lo = min(cpu_busy_ms, gpu_busy_ms)
    hi = max(cpu_busy_ms, gpu_busy_ms)
    return float("inf") if lo == 0 else hi / lo


def _csv_text(header: list[str], rows: list[list], comments: list[str]) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _spec_comments(reports: list[dict]) -> list[str]:
    out = []
    for rep in reports:
        label = rep.get("label", "")
        spec = json.dumps(rep.get("spec", {}), sort_keys=True)
        out.append(f"spec {label}: {spec}")
    return out


def breakdown_table(reports: list[dict]) -> str:
    """Cumulative speedups relative to the first report."""
    if not reports:
        raise ReportError("breakdown table needs at least one run report")
    base = float(reports[0]["tokens_per_second"])
    rows = []
    for rep in reports:
        tps = float(rep["tokens_per_second"])
        rows.append([rep.get("label", ""), f"{tps!r}",
                     f"{(tps / base if base else 0.0)!r}",
                     f"{float(rep['pcie_busy_fraction'])!r}"])
    return _csv_text(["label", "tokens_per_second", "speedup_vs_first",
                      "pcie_busy_fraction"], rows, _spec_comments(reports))


def hit_rate_by_group_table(reports: list[dict]) -> str:
    rows = []
    for rep in reports:
        groups = rep.get("cache_hit_rate_per_group", {})
        if not groups:
            raise ReportError(
                f"report {rep.get('label', '')!r} has no cache hit-rate groups")
        for g, rate in sorted(groups.items(), key=lambda kv: int(kv[0])):
            rows.append([rep.get("label", ""), int(g), f"{float(rate)!r}"])
        for g in rep.get("cache_empty_groups", []):
            rows.append([rep.get("label", ""), int(g), "excluded"])
    return _csv_text(["label", "token_group", "hit_rate"], rows,
                     _spec_comments(reports))


def prefetch_accuracy_table(reports: list[dict]) -> str:
    rows = []
    for rep in reports:
        top1 = rep.get("prefetch_accuracy_top1", {})
        topk = rep.get("prefetch_accuracy_topk", {})
        if not top1:
            raise ReportError(
                f"report {rep.get('label', '')!r} has no prefetch accuracy data")
        for layer in sorted(top1, key=int):
            rows.append([rep.get("label", ""), int(layer),
                         f"{float(top1[layer])!r}",
                         f"{float(topk.get(layer, 0.0))!r}",
                         rep.get("prefetch_size", 0)])
    return _csv_text(["label", "layer", "top1_accuracy", "topk_accuracy",
                      "prefetch_size"], rows, _spec_comments(reports))


def pcie_fraction_table(reports: list[dict]) -> str:
    rows = []
    for rep in reports:
        rows.append([rep.get("label", ""),
                     f"{float(rep['pcie_busy_fraction'])!r}",
                     f"{float(rep['pcie_demand_ms'])!r}",
                     f"{float(rep['pcie_prefetch_ms'])!r}",
                     f"{float(rep['pcie_replacement_ms'])!r}",
                     f"{float(rep['total_time_ms'])!r}"])
    return _csv_text(["label", "pcie_busy_fraction", "demand_ms", "prefetch_ms",
                      "replacement_ms", "total_time_ms"], rows,
                     _spec_comments(reports))


def load_balance_csv(reports: list[dict]) -> str:
    rows = []
    for entry in load_balance_table(reports):
        rows.append([entry["label"], f"{entry['cpu_busy_ms']!r}",
                     f"{entry['gpu_busy_ms']!r}", f"{entry['imbalance_ratio']!r}"])
    return _csv_text(["label", "cpu_busy_ms", "gpu_busy_ms", "imbalance_ratio"],
                     rows, _spec_comments(reports))


def heatmap_csv(table: HeatmapTable, spec: dict | None = None) -> str:
    comments = []
    if spec is not None:
        comments.append(f"spec: {json.dumps(spec, sort_keys=True)}")
    comments.append(f"top_m: {table.top_m}")
    comments.append(f"steps: {table.steps}")
    comments.append(f"diagonal_ratio: {table.diagonal_ratio!r}")
    n = table.matrix.shape[0]
    header = ["expert"] + [str(j) for j in range(n)]
    rows = [[str(i)] + [int(v) for v in table.matrix[i]] for i in range(n)]
    return _csv_text(header, rows, comments)
