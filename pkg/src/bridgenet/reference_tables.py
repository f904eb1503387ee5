"""Benchmark metric cells for NYUD-v2 and PASCAL Context ablations.

Each table stores single-task reference values and per-row multi-task
metrics together with the reported relative gains, so the gain arithmetic
can be regression-tested without training anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .metrics import MetricsReport, TaskResult

# name -> (metric, lower_is_better)
TASK_METRICS = {
    "seg": ("miou", False),
    "depth": ("rmse", True),
    "normals": ("merr", True),
    "edges": ("odsf", False),
    "parts": ("miou", False),
    "saliency": ("maxf", False),
}


@dataclass(frozen=True)
class TableRow:
    label: str
    values: dict  # task -> metric value
    delta_mtl: float  # reported, percent
    gains: dict = field(default_factory=dict)  # task -> reported per-task gain, percent

    def report(self, reference: dict) -> MetricsReport:
        tasks = [TaskResult(t, TASK_METRICS[t][0], v, TASK_METRICS[t][1]) for t, v in self.values.items()]
        return MetricsReport(tasks, 0, self.label).with_reference(reference)


@dataclass(frozen=True)
class Table:
    name: str
    reference: dict
    rows: tuple


NYUD_STL = {"seg": 50.95, "depth": 0.5698, "normals": 19.08, "edges": 78.28}

NYUD_COMPONENTS = Table("nyud-components", NYUD_STL, (
    TableRow("mtl-baseline", {"seg": 48.30, "depth": 0.5605, "normals": 19.08, "edges": 77.42}, -1.17),
    TableRow("+bfe", {"seg": 50.30, "depth": 0.5367, "normals": 19.00, "edges": 77.40}, 0.96),
    TableRow("+bfe+tpp", {"seg": 50.22, "depth": 0.5312, "normals": 18.97, "edges": 77.68}, 1.29),
    TableRow("+bfe+tpp+tfr-huge", {"seg": 51.14, "depth": 0.5186, "normals": 18.92, "edges": 77.98}, 2.45),
))

NYUD_TASK_SETS = Table("nyud-task-sets", NYUD_STL, (
    TableRow("seg+depth", {"seg": 52.73, "depth": 0.5247}, 5.70, {"seg": 3.49, "depth": 7.92}),
    TableRow("seg+normals", {"seg": 50.30, "normals": 19.03}, -0.51, {"seg": -1.28, "normals": 0.26}),
    TableRow("depth+normals", {"depth": 0.5416, "normals": 18.90}, 2.94, {"depth": 4.95, "normals": 0.94}),
    TableRow("seg+depth+normals", {"seg": 50.20, "depth": 0.5305, "normals": 19.03}, 1.90,
             {"seg": -1.47, "depth": 6.90, "normals": 0.26}),
    TableRow("depth+normals+edges", {"depth": 0.5351, "normals": 18.89, "edges": 77.60}, 2.07,
             {"depth": 6.09, "normals": 1.00, "edges": -0.87}),
    TableRow("all", {"seg": 50.36, "depth": 0.5267, "normals": 19.04, "edges": 77.86}, 1.52,
             {"seg": -1.16, "depth": 7.56, "normals": 0.21, "edges": -0.54}),
))

PASCAL_STL = {"seg": 79.69, "parts": 71.15, "saliency": 84.77, "normals": 13.26, "edges": 73.00}

# The saliency+normals+edges row prints its edge cell as 2.50; its own gain
# column (-0.68) implies 72.50, which is stored here.
PASCAL_TASK_SETS = Table("pascal-task-sets", PASCAL_STL, (
    TableRow("seg+parts", {"seg": 80.70, "parts": 71.95}, 1.20, {"seg": 1.27, "parts": 1.12}),
    TableRow("seg+saliency", {"seg": 78.93, "saliency": 85.20}, -0.22, {"seg": -0.95, "saliency": 0.51}),
    TableRow("seg+parts+saliency", {"seg": 79.68, "parts": 70.74, "saliency": 85.19}, -0.03,
             {"seg": -0.01, "parts": -0.58, "saliency": 0.50}),
    TableRow("saliency+normals+edges", {"saliency": 85.12, "normals": 13.35, "edges": 72.50}, -0.31,
             {"saliency": 0.41, "normals": -0.68, "edges": -0.68}),
    TableRow("seg+parts+saliency+normals", {"seg": 76.71, "parts": 67.33, "saliency": 84.79, "normals": 13.49},
             -2.70, {"seg": -3.74, "parts": -5.37, "saliency": 0.02, "normals": -1.73}),
    TableRow("all", {"seg": 77.98, "parts": 68.19, "saliency": 85.06, "normals": 13.48, "edges": 72.96}, -1.54,
             {"seg": -2.15, "parts": -4.16, "saliency": 0.34, "normals": -1.65, "edges": -0.05}),
))

TABLES = {t.name: t for t in (NYUD_COMPONENTS, NYUD_TASK_SETS, PASCAL_TASK_SETS)}


def recompute(table: Table) -> list:
    """``(label, recomputed delta, reported delta)`` for every row."""
    return [(row.label, row.report(table.reference).delta_mtl, row.delta_mtl) for row in table.rows]
