"""Confusion-matrix scoring for label grids: semantic mIoU and occupancy IoU/precision/recall.

Per-class IoU uses the usual TP / (TP + FP + FN). Undefined ratios are
reported as -1 instead of NaN.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .scene import VoxelGridSpec

IGNORE_LABEL = 255
UNDEFINED = -1.0


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den > 0 else UNDEFINED


@dataclass
class ConfusionMatrix:
    n_classes: int
    ignore_label: int = IGNORE_LABEL
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.n_classes, self.ignore_label, self.counts + other.counts)


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Add one grid pair; rows are ground truth, columns predictions."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    keep = gt != conf.ignore_label
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= conf.n_classes or p.max() >= conf.n_classes):
        raise ValueError("label outside the class range")
    k = conf.n_classes
    conf.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return conf


@dataclass
class EvalReport:
    per_class_iou: List[float] = field(default_factory=list)
    miou: float = UNDEFINED
    geo_iou: float = UNDEFINED
    precision: float = UNDEFINED
    recall: float = UNDEFINED

    def to_dict(self, prefix: str = "") -> Dict[str, float]:
        out = {f"{prefix}miou": self.miou, f"{prefix}geo_iou": self.geo_iou,
               f"{prefix}precision": self.precision, f"{prefix}recall": self.recall}
        for c, v in enumerate(self.per_class_iou, start=1):
            out[f"{prefix}iou_class_{c}"] = v
        return out


def miou(conf: ConfusionMatrix) -> EvalReport:
    """Mean IoU over semantic classes 1..M; classes with no TP+FP+FN are excluded and get -1."""
    cm = conf.counts
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    ious = [_ratio(tp[c], tp[c] + fp[c] + fn[c]) for c in range(1, conf.n_classes)]
    defined = [v for v in ious if v != UNDEFINED]
    return EvalReport(per_class_iou=ious, miou=float(np.mean(defined)) if defined else UNDEFINED)


def geometric_scores(conf: ConfusionMatrix):
    """(IoU, precision, recall) of occupied (label >= 1) vs empty."""
    cm = conf.counts
    tp = cm[1:, 1:].sum()
    fp = cm[0, 1:].sum()
    fn = cm[1:, 0].sum()
    return _ratio(tp, tp + fp + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn)


def evaluate_confusion(conf: ConfusionMatrix) -> EvalReport:
    report = miou(conf)
    report.geo_iou, report.precision, report.recall = geometric_scores(conf)
    return report


def crop_to_range(grid: np.ndarray, spec: VoxelGridSpec, max_range: float, ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    """Relabel voxels whose center lies farther than `max_range` forward (x) of the origin."""
    x = spec.origin[0] + (np.arange(spec.dims[0]) + 0.5) * spec.voxel_size[0] - spec.origin[0]
    out = np.array(grid, copy=True)
    out[x > max_range] = ignore_label
    return out


def range_eval(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], spec: VoxelGridSpec,
               ranges: Sequence[float], n_classes: int, ignore_label: int = IGNORE_LABEL) -> List[EvalReport]:
    """One report per range, accumulated over all (pred, gt) pairs."""
    if isinstance(preds, np.ndarray) and preds.ndim == 3:
        preds, gts = [preds], [gts]
    if list(ranges) != sorted(ranges):
        raise ValueError("ranges must be ascending")
    reports = []
    for r in ranges:
        conf = ConfusionMatrix(n_classes, ignore_label)
        for p, g in zip(preds, gts):
            cropped = crop_to_range(g, spec, r, ignore_label)
            accumulate(conf, np.where(cropped == ignore_label, ignore_label, p), cropped)
        reports.append(evaluate_confusion(conf))
    return reports


REPORT_HEADER = "# per-class IoU = TP / (TP + FP + FN); -1 marks undefined ratios"


def format_report(values: Dict[str, float]) -> str:
    """Flat `metric = value` text, one entry per line, stable ordering."""
    lines = [REPORT_HEADER]
    lines += [f"{k} = {v:.6f}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, float]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = float(value)
    return out
