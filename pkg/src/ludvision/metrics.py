"""Thematic-map accuracy: producer's/user's accuracy and class IoU.

A confusion matrix is indexed ``counts[truth][predicted]``. For class c::

    producers = counts[c][c] / row_sum(c)
    users     = counts[c][c] / col_sum(c)
    iou       = counts[c][c] / (row_sum(c) + col_sum(c) - counts[c][c])

A zero denominator yields ``None`` (rendered "n/a").
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError
from .raster import IGNORE, LabelMask

METRIC_NAMES = ("producers_acc", "users_acc", "class_iou")
DEFAULT_GROUPS = ("10/15 m", "40 m", "70 m")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))


@dataclass(frozen=True)
class ClassMetrics:
    producers: float | None
    users: float | None
    iou: float | None

    def as_tuple(self):
        return (self.producers, self.users, self.iou)


def confusion_matrix(pred: LabelMask, gt: LabelMask, num_classes: int = 2) -> ConfusionMatrix:
    p = pred.data if isinstance(pred, LabelMask) else np.asarray(pred)
    g = gt.data if isinstance(gt, LabelMask) else np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} vs ground truth {g.shape}")
    if np.any(p == IGNORE):
        raise ValueError("predictions may not contain the ignore code")
    if np.any(p >= num_classes):
        raise ValueError(f"prediction codes must be < {num_classes}")
    valid = g != IGNORE
    if np.any(g[valid] >= num_classes):
        raise ValueError(f"ground-truth codes must be < {num_classes} or {IGNORE}")
    idx = g[valid].astype(np.int64) * num_classes + p[valid].astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def _ratio(num: int, den: int):
    return None if den == 0 else num / den


def accuracy_metrics(cm: ConfusionMatrix) -> dict[int, ClassMetrics]:
    c = cm.counts
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    out = {}
    for k in range(cm.num_classes):
        tp = int(c[k, k])
        out[k] = ClassMetrics(
            _ratio(tp, int(rows[k])),
            _ratio(tp, int(cols[k])),
            _ratio(tp, int(rows[k] + cols[k] - tp)),
        )
    return out


@dataclass
class EvalReport:
    """Rows ``(group, metric, class, value)``; confusion counts pooled per group."""

    rows: list = field(default_factory=list)
    averaging: str = "micro"

    def value(self, group: str, metric: str, cls: int):
        for g, m, c, v in self.rows:
            if (g, m, c) == (group, metric, cls):
                return v
        raise KeyError((group, metric, cls))

    @property
    def groups(self) -> list:
        seen = []
        for g, *_ in self.rows:
            if g not in seen:
                seen.append(g)
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "metric", "class", "value"])
        for g, m, c, v in self.rows:
            w.writerow([g, m, c, "n/a" if v is None else repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != ["group", "metric", "class", "value"]:
            raise ValueError(f"unexpected report header {header}")
        rows = []
        for g, m, c, v in reader:
            rows.append((g, m, int(c), None if v == "n/a" else float(v)))
        return cls(rows)


def _group_order(labels: Iterable[str], groups: Sequence[str] | None):
    labels = list(dict.fromkeys(labels))
    if groups is not None:
        missing = [g for g in labels if g not in groups]
        if missing:
            raise ValueError(f"pairs carry groups not listed: {missing}")
        return [g for g in groups if g in labels]
    known = [g for g in DEFAULT_GROUPS if g in labels]
    return known + [g for g in labels if g not in DEFAULT_GROUPS]


def pooled_matrices(pairs, num_classes: int = 2) -> dict[str, ConfusionMatrix]:
    pooled: dict[str, ConfusionMatrix] = {}
    for pred, gt, label in pairs:
        cm = confusion_matrix(pred, gt, num_classes)
        pooled[label] = pooled[label] + cm if label in pooled else cm
    return pooled


def report_from_matrices(pooled: dict, classes: Sequence[int] = (1,),
                         groups: Sequence[str] | None = None) -> EvalReport:
    order = _group_order(pooled.keys(), groups)
    metrics = {g: accuracy_metrics(pooled[g]) for g in order}
    rows = []
    for mi, name in enumerate(METRIC_NAMES):
        for g in order:
            for c in classes:
                rows.append((g, name, int(c), metrics[g][c].as_tuple()[mi]))
    return EvalReport(rows)


def evaluation_report(pairs, classes: Sequence[int] = (1,), num_classes: int = 2,
                      groups: Sequence[str] | None = None) -> EvalReport:
    """Table-shaped report over ``(pred, gt, group)`` triples.

    Matrices are summed within each group before metrics are computed.
    Rows run metric-major (producer's, user's, IoU), then group, then class.
    Known altitude groups come first in their canonical order.
    """
    return report_from_matrices(pooled_matrices(pairs, num_classes), classes, groups)
