"""Training objective: scene-class affinity, CE, Lovasz-softmax, depth BCE and point-wise terms.

Voxel-wise losses take `probs` as (V, C) class distributions and `labels` as
(V,) integer targets; callers flatten grids first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .depth import DepthBins

IGNORE_LABEL = 255
EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_ssc: float = 1.0
    lambda_point: float = 1.0

    def __post_init__(self):
        for name in ("lambda_ssc", "lambda_point"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossReport:
    scal_sem: torch.Tensor
    scal_geo: torch.Tensor
    ce: torch.Tensor
    depth_d: torch.Tensor
    depth_s: torch.Tensor
    point_ce: torch.Tensor
    point_lovasz: torch.Tensor
    total: Optional[torch.Tensor] = None

    def components(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "total"}

    def as_floats(self) -> Dict[str, float]:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in values.items() if v is not None}


def _flatten(probs: torch.Tensor, labels: torch.Tensor, ignore_label: int):
    probs = probs.reshape(-1, probs.shape[-1])
    labels = labels.reshape(-1)
    keep = labels != ignore_label
    return probs[keep], labels[keep]


def _log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp(min=EPS))


def _prs_terms(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-(log P + log R + log S) for one class; terms with an empty denominator are skipped."""
    loss = p.new_zeros(())
    nominator = (p * target).sum()
    if p.sum() > 0:
        loss = loss - _log(nominator / p.sum())
    if target.sum() > 0:
        loss = loss - _log(nominator / target.sum())
    neg = 1 - target
    if neg.sum() > 0:
        loss = loss - _log(((1 - p) * neg).sum() / neg.sum())
    return loss


def scal_loss(probs: torch.Tensor, labels: torch.Tensor, mode: str = "sem", ignore_label: int = IGNORE_LABEL) -> torch.Tensor:
    """Scene-class affinity loss.

    sem: averaged over classes present in the ground truth.
    geo: a single occupied-vs-empty term, occupancy probability = 1 - p(empty).
    """
    probs, labels = _flatten(probs, labels, ignore_label)
    if mode == "geo":
        return _prs_terms(1 - probs[:, 0], (labels != 0).to(probs.dtype))
    if mode != "sem":
        raise ValueError(f"unknown scal mode {mode!r}")
    total, count = probs.new_zeros(()), 0
    for c in range(probs.shape[1]):
        target = (labels == c).to(probs.dtype)
        if target.sum() == 0:
            continue
        total = total + _prs_terms(probs[:, c], target)
        count += 1
    return total / max(count, 1)


def voxel_ce(logits: torch.Tensor, labels: torch.Tensor, ignore_label: int = IGNORE_LABEL) -> torch.Tensor:
    """Unweighted cross-entropy; logits (N, C, ...) and labels (N, ...)."""
    return F.cross_entropy(logits, labels.long(), ignore_index=ignore_label)


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Discrete gradient of the Jaccard loss along a sorted ground-truth indicator."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1].clone()
    return jaccard


def lovasz_softmax(probs: torch.Tensor, labels: torch.Tensor, ignore_label: int = IGNORE_LABEL,
                   per_class: bool = False):
    """Lovasz extension of the Jaccard loss, averaged over classes present in `labels`."""
    probs, labels = _flatten(probs, labels, ignore_label)
    losses = {}
    for c in range(probs.shape[1]):
        fg = (labels == c).to(probs.dtype)
        if fg.sum() == 0:
            continue
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True)
        losses[c] = torch.dot(errors_sorted, lovasz_grad(fg[perm]))
    if per_class:
        return losses
    if not losses:
        return probs.sum() * 0.0
    return torch.stack(list(losses.values())).mean()


def depth_bce(D_pred: torch.Tensor, depth_gt: torch.Tensor, bins: DepthBins) -> Tuple[torch.Tensor, bool]:
    """Binary cross-entropy against one-hot bin targets.

    D_pred (N, D, h, w), depth_gt (N, h, w) at the same resolution. Summed over
    bins, averaged over supervised pixels. Returns (loss, supervised).
    """
    idx, valid = bins.bin_index(depth_gt)
    if not bool(valid.any()):
        return D_pred.sum() * 0.0, False
    target = F.one_hot(idx, bins.D).permute(0, 3, 1, 2).to(D_pred.dtype)
    p = D_pred.clamp(EPS, 1 - EPS)
    bce = -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).sum(dim=1)
    return bce[valid].mean(), True


class PointHead(nn.Module):
    """Two-layer MLP on concatenated image/voxel point features."""

    def __init__(self, in_channels: int, n_classes: int, hidden: int = 32):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_channels, hidden), nn.ReLU(), nn.Linear(hidden, n_classes))

    def forward(self, F_point: torch.Tensor, V_point: torch.Tensor) -> torch.Tensor:
        """(N, C1, P), (N, C2, P) -> (N*P, n_classes) logits."""
        if F_point.shape[-1] != V_point.shape[-1]:
            raise ValueError("point feature counts differ")
        x = torch.cat([F_point, V_point], dim=1).transpose(1, 2)
        return self.mlp(x).reshape(-1, self.mlp[-1].out_features)


def point_loss(F_point, V_point, point_labels, head: PointHead) -> Tuple[torch.Tensor, torch.Tensor]:
    logits = head(F_point, V_point)
    labels = point_labels.reshape(-1).long()
    ce = F.cross_entropy(logits, labels, ignore_index=IGNORE_LABEL)
    lov = lovasz_softmax(logits.softmax(dim=-1), labels)
    return ce, lov


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str):
        super().__init__(f"non-finite loss component: {component}")
        self.component = component


def total_loss(report: LossReport, weights: LossWeights = LossWeights()) -> torch.Tensor:
    comps = report.components()
    for name, value in comps.items():
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NonFiniteLossError(name)
    ssc = comps["scal_sem"] + comps["scal_geo"] + comps["ce"] + comps["depth_d"] + comps["depth_s"]
    point = comps["point_ce"] + comps["point_lovasz"]
    return weights.lambda_ssc * ssc + weights.lambda_point * point
