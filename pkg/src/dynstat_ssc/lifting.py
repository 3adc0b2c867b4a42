"""Lift image features into frustum points, pool them into voxels, sample volumes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .depth import DepthBins
from .scene import CameraIntrinsics, CameraPose, VoxelGridSpec
from .semantic import _normalize_coords


@dataclass
class FrustumFeatures:
    data: torch.Tensor  # (N, D, h, w, C)
    coords: torch.Tensor  # (D, h, w, 3) world positions, shared across the batch


@dataclass
class FeatureVolume:
    data: torch.Tensor  # (N, C, X, Y, Z)
    counts: torch.Tensor  # (N, X, Y, Z)


def frustum_coords(intr: CameraIntrinsics, pose: CameraPose, bins: DepthBins) -> torch.Tensor:
    """World position of every (bin, pixel center) pair, float64, shape (D, h, w, 3)."""
    u = np.arange(intr.width) + 0.5
    v = np.arange(intr.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    ray = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], -1)
    cam = bins.centers[:, None, None, None] * ray[None]
    return torch.from_numpy(pose.apply(cam.reshape(-1, 3)).reshape(cam.shape))


def outer_lift(
    F_fusion: torch.Tensor,
    depth_probs: torch.Tensor,
    intr: CameraIntrinsics,
    pose: CameraPose,
    bins: DepthBins,
    coords: Optional[torch.Tensor] = None,
) -> FrustumFeatures:
    """Outer product of per-pixel features with the per-pixel depth distribution.

    `intr` is the feature-scale intrinsics; pass precomputed `coords` to skip
    the geometry.
    """
    n, c, h, w = F_fusion.shape
    if depth_probs.shape != (n, bins.D, h, w):
        raise ValueError(f"depth distribution {tuple(depth_probs.shape)} does not match features {(n, bins.D, h, w)}")
    data = depth_probs[:, :, :, :, None] * F_fusion.permute(0, 2, 3, 1)[:, None]
    if coords is None:
        coords = frustum_coords(intr, pose, bins)
    return FrustumFeatures(data, coords)


def voxel_cells(coords: torch.Tensor, spec: VoxelGridSpec) -> Tuple[torch.Tensor, torch.Tensor]:
    """Flat cell index (floor convention) and in-grid mask for (..., 3) world points."""
    origin = torch.as_tensor(spec.origin, dtype=torch.float64)
    size = torch.as_tensor(spec.voxel_size, dtype=torch.float64)
    dims = torch.as_tensor(spec.dims)
    ijk = torch.floor((coords.to(torch.float64) - origin) / size).long()
    inside = ((ijk >= 0) & (ijk < dims)).all(dim=-1)
    ijk = torch.where(inside[..., None], ijk, torch.zeros_like(ijk))
    flat = (ijk[..., 0] * dims[1] + ijk[..., 1]) * dims[2] + ijk[..., 2]
    return flat, inside


def voxel_pool(
    frustum: FrustumFeatures,
    spec: VoxelGridSpec,
    cells: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
) -> FeatureVolume:
    """Mean of frustum point features per voxel; points outside the grid are dropped."""
    data = frustum.data
    n, c = data.shape[0], data.shape[-1]
    flat, inside = voxel_cells(frustum.coords, spec) if cells is None else cells
    flat = flat.reshape(-1)[inside.reshape(-1)]
    feats = data.reshape(n, -1, c)[:, inside.reshape(-1)]
    n_cells = int(np.prod(spec.dims))
    sums = data.new_zeros(n, n_cells, c).index_add_(1, flat, feats)
    counts = torch.bincount(flat, minlength=n_cells).to(data.dtype)
    mean = sums / counts.clamp(min=1)[None, :, None]
    X, Y, Z = spec.dims
    volume = mean.transpose(1, 2).reshape(n, c, X, Y, Z)
    return FeatureVolume(volume, counts.reshape(1, X, Y, Z).expand(n, -1, -1, -1))


def world_to_voxel_index(points: torch.Tensor, spec: VoxelGridSpec) -> torch.Tensor:
    """Continuous voxel index coordinates; voxel centers land on integers."""
    origin = torch.as_tensor(spec.origin, dtype=points.dtype, device=points.device)
    size = torch.as_tensor(spec.voxel_size, dtype=points.dtype, device=points.device)
    return (points - origin) / size - 0.5


def grid_sample_3d(volume: torch.Tensor, points: torch.Tensor, spec: VoxelGridSpec) -> torch.Tensor:
    """Trilinear interpolation between voxel centers with border clamping.

    volume: (N, C, X, Y, Z); points: (N, P, 3) world coordinates. Returns (N, C, P).
    """
    idx = world_to_voxel_index(points.to(volume.dtype), spec)
    X, Y, Z = volume.shape[-3:]
    # grid_sample's last grid axis indexes the innermost (Z) dimension
    grid = _normalize_coords(idx.flip(-1), (Z, Y, X))
    out = F.grid_sample(volume, grid[:, :, None, None, :], mode="bilinear", padding_mode="border", align_corners=True)
    return out[:, :, :, 0, 0]
