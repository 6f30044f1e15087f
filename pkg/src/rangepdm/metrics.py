"""Confusion-matrix IoU/mIoU and the range-image upper bound."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rangepdm.cloud_io import PointCloud, SensorSpec
from rangepdm.projection import IGNORE_LABEL, project, reproject_labels


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    n_classes: int
    ignore: Optional[int] = IGNORE_LABEL
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, gt, pred) -> "ConfusionMatrix":
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"gt has {gt.size} labels, pred has {pred.size}")
        for name, a in (("gt", gt), ("pred", pred)):
            if a.size and (a.min() < 0 or a.max() >= self.n_classes):
                raise ValueError(f"{name} label outside [0, {self.n_classes})")
        keep = gt != self.ignore if self.ignore is not None else np.ones(gt.shape, dtype=bool)
        flat = gt[keep] * self.n_classes + pred[keep]
        self.counts += np.bincount(flat, minlength=self.n_classes ** 2).reshape(
            self.n_classes, self.n_classes
        )
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes or other.ignore != self.ignore:
            raise ValueError("confusion matrices are not compatible")
        return ConfusionMatrix(self.n_classes, self.ignore, self.counts + other.counts)

    def iou(self):
        """Return ``(per_class, miou)``; ``per_class`` is NaN where undefined."""
        return iou(self)


def iou(cm: ConfusionMatrix):
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.full(cm.n_classes, np.nan)
    ok = denom > 0
    per_class[ok] = tp[ok] / denom[ok]
    scored = ok.copy()
    if cm.ignore is not None and 0 <= cm.ignore < cm.n_classes:
        scored[cm.ignore] = False
    miou = float(per_class[scored].mean()) if scored.any() else float("nan")
    return per_class, miou


def confusion(gt, pred, n_classes: Optional[int] = None, ignore: Optional[int] = IGNORE_LABEL) -> ConfusionMatrix:
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(gt.max(initial=0), pred.max(initial=0))) + 1
    return ConfusionMatrix(n_classes, ignore).accumulate(gt, pred)


def upper_bound_miou(cloud: PointCloud, spec: SensorSpec, n_classes: Optional[int] = None,
                     ignore: int = IGNORE_LABEL) -> float:
    """mIoU of ground truth pushed through the keep-one range image and back."""
    if cloud.labels is None:
        raise ValueError("upper bound needs a labeled cloud")
    img, lut = project(cloud, spec)
    pred = reproject_labels(img, lut)
    return iou(confusion(cloud.labels, pred, n_classes, ignore))[1]


def report(cm: ConfusionMatrix, names=None) -> dict:
    """JSON-ready summary: per-class IoU, mIoU and point counts."""
    per_class, miou = iou(cm)
    names = names or [str(c) for c in range(cm.n_classes)]
    return {
        "miou": None if np.isnan(miou) else miou,
        "iou": {
            names[c]: (None if np.isnan(per_class[c]) else float(per_class[c]))
            for c in range(cm.n_classes)
            if c != cm.ignore
        },
        "points": {names[c]: int(cm.counts[c].sum()) for c in range(cm.n_classes)},
        "scored_points": cm.total,
    }
