"""Depth binning, monocular/binocular/temporal depth distributions and plane warping.

Feature maps are (N, C, h, w); depth distributions are (N, D, h, w) and sum to
one over D. Intrinsics passed here must already be at feature scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene import CameraIntrinsics, CameraPose
from .semantic import _normalize_coords

K_CANDIDATES = 8
CORRELATION_GROUPS = 4
_LOG_EPS = 1e-6


@dataclass(frozen=True)
class DepthBins:
    d_min: float
    d_max: float
    D: int

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got ({self.d_min}, {self.d_max})")
        if self.D < 1:
            raise ValueError("need at least one bin")

    @property
    def width(self) -> float:
        return (self.d_max - self.d_min) / self.D

    @property
    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.D) + 0.5) * self.width

    def centers_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(self.centers, dtype=dtype, device=device)

    def bin_index(self, depth: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(index, valid) of the bin containing each depth; 0 and out-of-range are invalid."""
        idx = torch.floor((depth - self.d_min) / self.width).long()
        valid = (depth > 0) & (depth >= self.d_min) & (depth <= self.d_max)
        return idx.clamp(0, self.D - 1), valid


def make_depth_bins(d_min: float, d_max: float, D: int) -> DepthBins:
    return DepthBins(float(d_min), float(d_max), int(D))


class MonoDepthHead(nn.Module):
    """conv3x3-ReLU-conv1x1 to D logits, softmax over bins. Biases start at zero."""

    def __init__(self, in_channels: int, D: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1), nn.ReLU(), nn.Conv2d(hidden, D, 1)
        )
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                nn.init.zeros_(m.bias)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.net(feat).softmax(dim=1)


def _pixel_centers(h: int, w: int, dtype, device=None) -> Tuple[torch.Tensor, torch.Tensor]:
    v, u = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device) + 0.5,
        torch.arange(w, dtype=dtype, device=device) + 0.5,
        indexing="ij",
    )
    return u, v


def stereo_cost_volume(
    F_l: torch.Tensor,
    F_r: torch.Tensor,
    intr: CameraIntrinsics,
    baseline: float,
    bins: DepthBins,
    groups: int = CORRELATION_GROUPS,
    rel_pose: Optional[CameraPose] = None,
) -> torch.Tensor:
    """Group-wise correlation of F_l with F_r shifted by the disparity of every depth bin.

    Scores are averaged over groups; hypotheses sampling outside the right map
    score 0. If `rel_pose` (left -> right camera) is given it must be a pure
    x translation, and its magnitude overrides `baseline`.
    """
    if rel_pose is not None:
        t = rel_pose.translation
        if not np.allclose(rel_pose.rotation, np.eye(3), atol=1e-9) or abs(t[1]) > 1e-9 or abs(t[2]) > 1e-9:
            raise ValueError("stereo pair is not rectified")
        baseline = float(-t[0])
    if F_l.shape != F_r.shape:
        raise ValueError("left/right feature shapes differ")
    n, c, h, w = F_l.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    depth = bins.centers_tensor(F_l.dtype, F_l.device)
    disp = intr.fx * baseline / depth  # (D,)
    u, v = _pixel_centers(h, w, F_l.dtype, F_l.device)
    u_src = u[None] - disp[:, None, None]  # (D, h, w), continuous coords
    valid = (u_src >= 0) & (u_src < w)
    coords = torch.stack([u_src - 0.5, (v - 0.5).expand_as(u_src)], dim=-1)
    grid = _normalize_coords(coords, (w, h)).reshape(1, -1, w, 2).expand(n, -1, -1, -1)
    warped = F.grid_sample(F_r, grid, mode="bilinear", padding_mode="border", align_corners=True)
    warped = warped.view(n, c, bins.D, h, w)
    prod = (F_l[:, :, None] * warped).view(n, groups, c // groups, bins.D, h, w)
    score = prod.mean(dim=2).mean(dim=1)
    return score * valid[None].to(score.dtype)


class MIEFusion(nn.Module):
    """Per-pixel, per-bin gate mixing softmax(F_bino) with an incoming depth distribution."""

    def __init__(self, D: int):
        super().__init__()
        self.gate = nn.Conv2d(2 * D, D, 3, padding=1)

    def forward(self, F_bino: torch.Tensor, D_in: torch.Tensor, return_gate: bool = False):
        if F_bino.shape != D_in.shape:
            raise ValueError(f"shape mismatch {tuple(F_bino.shape)} vs {tuple(D_in.shape)}")
        g = torch.sigmoid(self.gate(torch.cat([F_bino, torch.log(D_in + _LOG_EPS)], dim=1)))
        mixed = g * F_bino.softmax(dim=1) + (1 - g) * D_in
        out = mixed / mixed.sum(dim=1, keepdim=True)
        return (out, g) if return_gate else out


def mie_fuse(module: MIEFusion, F_bino: torch.Tensor, D_mono: torch.Tensor) -> torch.Tensor:
    return module(F_bino, D_mono)


def warp_to_reference(
    F_src: torch.Tensor,
    intr: CameraIntrinsics,
    pose_ref_to_src: CameraPose,
    depth: Union[float, torch.Tensor],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Resample F_src onto the reference pixel grid assuming the given per-pixel depth.

    `depth` is a scalar (fronto-parallel plane) or a (N, K, h, w) tensor of
    hypotheses; the result is (N, C, h, w) or (N, C, K, h, w) plus a validity
    mask that zeroes samples behind the source camera or outside its frame.
    """
    n, c, h, w = F_src.shape
    dtype, device = F_src.dtype, F_src.device
    scalar = not torch.is_tensor(depth)
    if scalar:
        if depth <= 0:
            raise ValueError("depth must be positive")
        depth = torch.full((n, 1, h, w), float(depth), dtype=dtype, device=device)
    k = depth.shape[1]
    u, v = _pixel_centers(h, w, dtype, device)
    ray = torch.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, torch.ones_like(u)], dim=0)
    pts = depth[:, :, None] * ray[None, None]  # (n, k, 3, h, w)
    R = torch.as_tensor(pose_ref_to_src.rotation, dtype=dtype, device=device)
    t = torch.as_tensor(pose_ref_to_src.translation, dtype=dtype, device=device)
    src = torch.einsum("ij,nkjhw->nkihw", R, pts) + t[None, None, :, None, None]
    z = src[:, :, 2]
    in_front = z > 1e-6
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    us = intr.fx * src[:, :, 0] / z_safe + intr.cx
    vs = intr.fy * src[:, :, 1] / z_safe + intr.cy
    valid = in_front & (us >= 0) & (us < w) & (vs >= 0) & (vs < h)
    coords = torch.stack([us - 0.5, vs - 0.5], dim=-1)  # (n, k, h, w, 2)
    grid = _normalize_coords(coords, (w, h)).reshape(n, k * h, w, 2)
    out = F.grid_sample(F_src, grid, mode="bilinear", padding_mode="border", align_corners=True)
    out = out.view(n, c, k, h, w) * valid[:, None].to(dtype)
    if scalar:
        return out[:, :, 0], valid[:, 0]
    return out, valid


def homography_warp(F_src, intr, pose_ref_to_src, depth: float, return_mask: bool = False):
    """Plane-sweep warp of F_src onto the reference view at a fronto-parallel depth."""
    out, valid = warp_to_reference(F_src, intr, pose_ref_to_src, float(depth))
    return (out, valid) if return_mask else out


def splat_to_bins(cand_depth: torch.Tensor, cand_prob: torch.Tensor, bins: DepthBins) -> torch.Tensor:
    """Distribute candidate probabilities onto bins with linear (hat) interpolation.

    cand_*: (N, K, h, w) -> (N, D, h, w); total mass per pixel is preserved.
    """
    pos = ((cand_depth - bins.d_min) / bins.width - 0.5).clamp(0, bins.D - 1)
    idx = torch.arange(bins.D, dtype=cand_depth.dtype, device=cand_depth.device)
    hat = (1 - (pos[:, :, None] - idx[None, None, :, None, None]).abs()).clamp(min=0)
    return (hat * cand_prob[:, :, None]).sum(dim=1)


class TemporalStereo(nn.Module):
    """Single-pass multi-frame stereo depth with predicted search center/range and weight map."""

    def __init__(self, in_channels: int, hidden: int = 32, k_candidates: int = K_CANDIDATES, eps: float = 1e-3):
        super().__init__()
        self.k_candidates = k_candidates
        self.eps = eps
        self.center_range = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1), nn.ReLU(), nn.Conv2d(hidden, 2, 1)
        )
        self.weight = nn.Conv2d(in_channels, 1, 3, padding=1)

    def forward(
        self,
        F_ref: torch.Tensor,
        F_srcs: Sequence[torch.Tensor],
        poses: Sequence[CameraPose],
        intr: CameraIntrinsics,
        bins: DepthBins,
        D_mono_ref: torch.Tensor,
        return_aux: bool = False,
    ):
        if len(F_srcs) == 0:
            raise ValueError("temporal stereo needs at least one source frame")
        if len(F_srcs) != len(poses):
            raise ValueError("one pose per source frame required")
        cr = self.center_range(F_ref)
        center = bins.d_min + (bins.d_max - bins.d_min) * torch.sigmoid(cr[:, :1])
        half_range = F.softplus(cr[:, 1:]) + self.eps
        steps = torch.linspace(-1.0, 1.0, self.k_candidates, dtype=F_ref.dtype, device=F_ref.device)
        cand = (center + half_range * steps[None, :, None, None]).clamp(bins.d_min, bins.d_max)

        score = 0.0
        for F_src, pose in zip(F_srcs, poses):
            warped, _ = warp_to_reference(F_src, intr, pose, cand)
            score = score + (F_ref[:, :, None] * warped).mean(dim=1)
        stereo = splat_to_bins(cand, score.softmax(dim=1), bins)

        w = torch.sigmoid(self.weight(F_ref))
        mixed = w * stereo + (1 - w) * D_mono_ref
        out = mixed / mixed.sum(dim=1, keepdim=True)
        if return_aux:
            return out, {"center": center, "range": half_range, "weight": w, "candidates": cand, "stereo": stereo}
        return out


def temporal_stereo_depth(module: TemporalStereo, F_ref, F_srcs, poses, intr, bins, D_mono_ref):
    return module(F_ref, F_srcs, poses, intr, bins, D_mono_ref)


def depth_at_feature_scale(depth_gt: torch.Tensor, stride: int) -> torch.Tensor:
    """Nearest valid (non-zero) depth within each stride x stride patch; 0 if none."""
    big = torch.where(depth_gt > 0, depth_gt, torch.full_like(depth_gt, float("inf")))
    pooled = -F.max_pool2d(-big[:, None], stride)[:, 0]
    return torch.where(torch.isfinite(pooled), pooled, torch.zeros_like(pooled))
