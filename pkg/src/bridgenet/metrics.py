"""Dense-prediction metrics, relative gains and the multi-task average.

Accumulators are mergeable: shard the data, accumulate per shard and
``merge`` the partial results; never average finished metric values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# 0.01 .. 0.99; a zero probability is never a positive prediction
THRESHOLDS = np.round(np.arange(1, 100) / 100, 2)


class EmptyEvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# segmentation


class ConfusionMatrix:
    def __init__(self, num_classes: int, ignore_index: int = 255):
        if num_classes <= 0:
            raise ValueError(f"num_classes must be positive, got {num_classes}")
        self.k = num_classes
        self.ignore_index = ignore_index
        self.mat = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        valid = gt != self.ignore_index
        idx = self.k * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
        self.mat += np.bincount(idx, minlength=self.k**2).reshape(self.k, self.k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.mat += other.mat
        return self

    def miou(self) -> float:
        if self.mat.sum() == 0:
            raise EmptyEvaluationError("empty evaluation: every pixel is ignored")
        inter = np.diag(self.mat)
        union = self.mat.sum(0) + self.mat.sum(1) - inter
        present = self.mat.sum(1) > 0
        return float(np.mean(inter[present] / union[present]))


def miou(pred_labels, gt_labels, num_classes: int, ignore_index: int = 255) -> float:
    """Mean IoU over the classes that occur in the ground truth."""
    return ConfusionMatrix(num_classes, ignore_index).update(pred_labels, gt_labels).miou()


# ---------------------------------------------------------------------------
# regression


@dataclass
class ErrorSums:
    sq: float = 0.0
    count: int = 0

    def update(self, err, mask=None):
        err = np.asarray(err, dtype=np.float64)
        m = np.ones(err.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), err.shape)
        self.sq += float((err[m] ** 2).sum())
        self.count += int(m.sum())
        return self

    def merge(self, other: "ErrorSums") -> "ErrorSums":
        self.sq += other.sq
        self.count += other.count
        return self

    def rmse(self) -> float:
        if self.count == 0:
            raise EmptyEvaluationError("rmse over an empty mask")
        return float(np.sqrt(self.sq / self.count))


def rmse(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return ErrorSums().update(pred - gt, mask).rmse()


def angle_errors(pred_normals, gt_normals, axis: int = 0) -> np.ndarray:
    """Per-pixel angle in degrees; zero-length predictions count as 90 degrees."""
    p = np.asarray(pred_normals, np.float64)
    g = np.asarray(gt_normals, np.float64)
    norm = np.linalg.norm(p, axis=axis, keepdims=True)
    unit = np.divide(p, norm, out=np.zeros_like(p), where=norm > 0)
    dot = np.clip((unit * g).sum(axis=axis), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


@dataclass
class AngleSums:
    total: float = 0.0
    sq: float = 0.0
    count: int = 0

    def update(self, pred, gt, mask=None, axis: int = 0):
        err = angle_errors(pred, gt, axis)
        m = np.ones(err.shape, bool) if mask is None else np.asarray(mask, bool)
        self.total += float(err[m].sum())
        self.sq += float((err[m] ** 2).sum())
        self.count += int(m.sum())
        return self

    def merge(self, other: "AngleSums") -> "AngleSums":
        self.total += other.total
        self.sq += other.sq
        self.count += other.count
        return self

    def mean(self) -> float:
        if self.count == 0:
            raise EmptyEvaluationError("angle error over an empty mask")
        return self.total / self.count

    def rmse(self) -> float:
        if self.count == 0:
            raise EmptyEvaluationError("angle error over an empty mask")
        return float(np.sqrt(self.sq / self.count))


def mean_angle_error(pred_normals, gt_normals, mask=None, axis: int = 0) -> float:
    """Mean angular error in degrees between normal fields (channel ``axis``)."""
    return AngleSums().update(pred_normals, gt_normals, mask, axis).mean()


# ---------------------------------------------------------------------------
# F-measures


def f_score(tp_p: float, n_pred: float, tp_r: float, n_gt: float) -> float:
    """F1 from matched counts; two empty sets score 1, otherwise empty sides score 0."""
    if n_pred == 0 and n_gt == 0:
        return 1.0
    p = tp_p / n_pred if n_pred else 0.0
    r = tp_r / n_gt if n_gt else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class ThresholdCounts:
    """Per-threshold match counters (mergeable)."""

    thresholds: np.ndarray = field(default_factory=lambda: THRESHOLDS.copy())
    tp_p: np.ndarray = None
    n_pred: np.ndarray = None
    tp_r: np.ndarray = None
    n_gt: np.ndarray = None

    def __post_init__(self):
        n = len(self.thresholds)
        for name in ("tp_p", "n_pred", "tp_r", "n_gt"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=np.int64))

    def merge(self, other: "ThresholdCounts") -> "ThresholdCounts":
        for name in ("tp_p", "n_pred", "tp_r", "n_gt"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def scores(self) -> np.ndarray:
        return np.array([f_score(*c) for c in zip(self.tp_p, self.n_pred, self.tp_r, self.n_gt)])

    def best(self) -> float:
        return float(self.scores().max())


def _as_list(x):
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return [x]
    return list(x)


def max_f_counts(probs, gts, thresholds=THRESHOLDS) -> ThresholdCounts:
    counts = ThresholdCounts(np.asarray(thresholds, dtype=np.float64))
    for p, g in zip(_as_list(probs), _as_list(gts)):
        p = np.asarray(p, np.float64).reshape(-1)
        g = np.asarray(g).reshape(-1).astype(bool)
        for i, t in enumerate(counts.thresholds):
            pred = p >= t
            tp = int((pred & g).sum())
            counts.tp_p[i] += tp
            counts.n_pred[i] += int(pred.sum())
            counts.tp_r[i] += tp
            counts.n_gt[i] += int(g.sum())
    return counts


def max_f(probs, gts, thresholds=THRESHOLDS) -> float:
    """Best dataset-level F1 over a shared threshold sweep (``prob >= t`` is positive)."""
    return max_f_counts(probs, gts, thresholds).best()


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask
    return ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1,) * 2, bool))


def ods_counts(edge_probs, gt_edges, radius: int = 1, thresholds=THRESHOLDS) -> ThresholdCounts:
    counts = ThresholdCounts(np.asarray(thresholds, dtype=np.float64))
    for p, g in zip(_as_list(edge_probs), _as_list(gt_edges)):
        p = np.asarray(p, np.float64)
        g = np.asarray(g).astype(bool)
        g_near = _dilate(g, radius)
        for i, t in enumerate(counts.thresholds):
            pred = p >= t
            counts.tp_p[i] += int((pred & g_near).sum())
            counts.n_pred[i] += int(pred.sum())
            counts.tp_r[i] += int((g & _dilate(pred, radius)).sum())
            counts.n_gt[i] += int(g.sum())
    return counts


def ods_f(edge_probs, gt_edges, radius: int = 1, thresholds=THRESHOLDS) -> float:
    """Optimal-dataset-scale F with Chebyshev-radius tolerance matching.

    Precision counts predicted pixels within ``radius`` of a ground-truth edge
    pixel; recall counts ground-truth pixels within ``radius`` of a prediction.
    """
    return ods_counts(edge_probs, gt_edges, radius, thresholds).best()


# ---------------------------------------------------------------------------
# multi-task gains


def relative_gain(m_mtl: float, m_stl: float, lower_is_better: bool) -> float:
    """Signed percent improvement of a multi-task metric over its single-task reference."""
    if m_stl == 0:
        raise ZeroDivisionError("single-task reference metric is zero")
    sign = -1.0 if lower_is_better else 1.0
    return sign * (m_mtl - m_stl) / m_stl * 100.0


def delta_mtl(gains) -> float:
    gains = list(gains)
    if not gains:
        raise ValueError("delta_mtl of an empty gain list")
    return float(sum(gains) / len(gains))


@dataclass
class TaskResult:
    name: str
    metric: str
    value: float
    lower_is_better: bool
    reference: float | None = None

    @property
    def gain(self) -> float | None:
        if self.reference is None:
            return None
        return relative_gain(self.value, self.reference, self.lower_is_better)


@dataclass
class MetricsReport:
    tasks: list
    samples: int = 0
    label: str = ""

    @property
    def delta_mtl(self) -> float | None:
        gains = [t.gain for t in self.tasks]
        if not gains or any(g is None for g in gains):
            return None
        return delta_mtl(gains)

    def with_reference(self, reference: dict) -> "MetricsReport":
        """Attach single-task reference values (``{task: value}``)."""
        tasks = [TaskResult(t.name, t.metric, t.value, t.lower_is_better, reference.get(t.name))
                 for t in self.tasks]
        return MetricsReport(tasks, self.samples, self.label)

    def values(self) -> dict:
        return {t.name: t.value for t in self.tasks}

    def format_table(self) -> str:
        arrow = lambda t: "↓" if t.lower_is_better else "↑"  # noqa: E731
        head = ["model"] + [f"{t.name} {t.metric}{arrow(t)}" for t in self.tasks] + ["dMTL(%)↑"]
        row = [self.label or "-"] + [f"{t.value:.4f}" for t in self.tasks]
        d = self.delta_mtl
        row.append("absent" if d is None else f"{d:+.2f}")
        gains = ["gain(%)"] + ["absent" if t.gain is None else f"{t.gain:+.2f}" for t in self.tasks] + ["-"]
        widths = [max(len(a), len(b), len(c)) for a, b, c in zip(head, row, gains)]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
        return "\n".join([fmt(head), fmt(row), fmt(gains)])

    def format_kv(self) -> str:
        lines = [f"label = {self.label}", f"samples = {self.samples}"]
        for t in self.tasks:
            lines.append(f"{t.name}.{t.metric} = {t.value:.6f}")
            lines.append(f"{t.name}.lower_is_better = {int(t.lower_is_better)}")
            if t.reference is not None:
                lines.append(f"{t.name}.reference = {t.reference:.6f}")
                lines.append(f"{t.name}.gain_pct = {t.gain:.4f}")
        d = self.delta_mtl
        lines.append(f"delta_mtl_pct = {'absent' if d is None else f'{d:.4f}'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_kv(cls, text: str) -> "MetricsReport":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, val = line.partition("=")
                kv[key.strip()] = val.strip()
        tasks = []
        for key, val in kv.items():
            name, _, attr = key.partition(".")
            if attr in ("miou", "rmse", "merr", "odsf", "maxf"):
                ref = kv.get(f"{name}.reference")
                tasks.append(TaskResult(name, attr, float(val), kv.get(f"{name}.lower_is_better") == "1",
                                        float(ref) if ref is not None else None))
        return cls(tasks, int(kv.get("samples", 0)), kv.get("label", ""))
