"""End-to-end assembly: image encoders, dynamic/static depth branches, lifting, fusion, voxel head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .depth import MIEFusion, MonoDepthHead, TemporalStereo, stereo_cost_volume
from .dsaf import build_fusion, fuse
from .lifting import frustum_coords, grid_sample_3d, outer_lift, voxel_cells, voxel_pool
from .losses import PointHead
from .scene import CameraIntrinsics, CameraPose, CameraRig, relative_pose
from .semantic import ENCODER_STRIDE, FeatureFusion, ImageEncoder, embed_text, grid_sample_2d, semantic_map


@dataclass
class ViewBatch:
    """Rendered inputs for N scenes sharing one rig.

    left: (N, T, 3, H, W) with frame i captured at time t - i; right: (N, 3, H, W)
    is the stereo partner of frame 0.
    """

    left: torch.Tensor
    right: torch.Tensor
    rig: CameraRig


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (N, M+1, X, Y, Z)
    D_mono: Optional[torch.Tensor]  # dynamic-branch depth (N, D, h, w)
    D_stereo: Optional[torch.Tensor]  # static-branch depth (N, D, h, w)
    F_point: Optional[torch.Tensor]  # (N, C, P)
    V_point: Optional[torch.Tensor]  # (N, C, P)


class VoxelEncoder(nn.Module):
    """Residual stack of two dense 3x3x3 convolutions."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        return volume + self.conv2(F.relu(self.conv1(volume)))


def upsample_and_project(V_f: torch.Tensor, head: nn.Conv3d, factor: int = 2) -> torch.Tensor:
    """Trilinear upsampling of the working volume, then a per-voxel linear map to class logits."""
    up = F.interpolate(V_f, scale_factor=factor, mode="trilinear", align_corners=False)
    return head(up)


@dataclass
class _Geometry:
    intr: CameraIntrinsics  # feature scale
    src_poses: Tuple[CameraPose, ...]  # reference camera -> frame i camera, i >= 1
    ref_pose: CameraPose
    stereo_pose: CameraPose  # left -> right camera of frame 0
    cells: Tuple[torch.Tensor, torch.Tensor]
    coords: torch.Tensor


def _rig_key(rig: CameraRig) -> bytes:
    parts = [np.asarray([rig.baseline, *rig.intrinsics.matrix.ravel(), rig.intrinsics.width, rig.intrinsics.height])]
    parts += [p.matrix for p in rig.left_poses]
    return b"".join(np.ascontiguousarray(p, dtype=np.float64).tobytes() for p in parts)


class SSCModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        flags = config.ablation
        C = config.context_channels
        D = config.depth.D
        n_out = config.class_set.M + 1
        self.bins = config.bins
        self.working_grid = config.working_grid

        self.encoder = ImageEncoder(config.image_channels, C, config.text_width, with_visual=flags.use_lmms)
        if flags.use_lmms:
            text = embed_text(config.class_set, config.text_width, config.text_seed)
            self.register_buffer("text", text.tensor(), persistent=False)
            self.feature_fusion = FeatureFusion(text.Q, config.text_width, C, config.fusion_heads)

        if flags.use_dynamic:
            self.mono_dynamic = MonoDepthHead(config.image_channels, D)
            self.mie_dynamic = MIEFusion(D)
            self.encoder_dynamic = VoxelEncoder(C)
        if flags.use_static:
            self.mono_static = MonoDepthHead(config.image_channels, D)
            self.temporal = TemporalStereo(config.image_channels)
            if not (config.share_mie and flags.use_dynamic):
                self.mie_static = MIEFusion(D)
            self.encoder_static = VoxelEncoder(C)

        self.fusion = build_fusion(C, config.effective_fusion, config.attention, config.aspp_rates)
        self.head = nn.Conv3d(C, n_out, 1)
        self.point_head = PointHead(2 * C, n_out)
        self._geometry: Dict[bytes, _Geometry] = {}

    # geometry ------------------------------------------------------------
    def geometry(self, rig: CameraRig) -> _Geometry:
        key = _rig_key(rig)
        if key not in self._geometry:
            intr = rig.intrinsics.scaled(ENCODER_STRIDE)
            ref = rig.left_poses[0]
            coords = frustum_coords(intr, ref, self.bins)
            self._geometry[key] = _Geometry(
                intr=intr,
                src_poses=tuple(relative_pose(ref, p) for p in rig.left_poses[1:]),
                ref_pose=ref,
                stereo_pose=relative_pose(ref, rig.right_pose(0)),
                cells=voxel_cells(coords, self.working_grid),
                coords=coords,
            )
        return self._geometry[key]

    # forward -------------------------------------------------------------
    def _lift(self, F_fusion, depth, geo: _Geometry) -> torch.Tensor:
        frustum = outer_lift(F_fusion, depth, geo.intr, geo.ref_pose, self.bins, coords=geo.coords)
        return voxel_pool(frustum, self.working_grid, cells=geo.cells).data

    def _mie_static(self) -> MIEFusion:
        return self.mie_static if hasattr(self, "mie_static") else self.mie_dynamic

    def forward(self, batch: ViewBatch, points: Optional[torch.Tensor] = None) -> ModelOutput:
        cfg = self.config
        flags = cfg.ablation
        left = batch.left
        if left.dim() != 5:
            raise ValueError(f"expected left views (N, T, 3, H, W), got {tuple(left.shape)}")
        n, T = left.shape[:2]
        if T != cfg.n_frames or batch.rig.n_frames != cfg.n_frames:
            raise ValueError(f"batch has {T} frames (rig {batch.rig.n_frames}); model expects {cfg.n_frames}")
        geo = self.geometry(batch.rig)

        ref_img = left[:, 0]
        F_t, F_vis, F_con = self.encoder(ref_img)
        if flags.use_lmms:
            F_fusion = self.feature_fusion(semantic_map(F_vis, self.text), F_vis, F_con)
        else:
            F_fusion = F_con

        F_right = self.encoder.image_features(batch.right)
        F_bino = stereo_cost_volume(F_t, F_right, geo.intr, batch.rig.baseline, self.bins, rel_pose=geo.stereo_pose)

        D_mono = D_stereo = None
        if flags.use_dynamic:
            D_mono = self.mie_dynamic(F_bino, self.mono_dynamic(F_t))
            V_d = self.encoder_dynamic(self._lift(F_fusion, D_mono, geo))
        if flags.use_static:
            past = self.encoder.image_features(left[:, 1:].reshape(-1, *left.shape[2:]))
            past = past.view(n, T - 1, *past.shape[1:])
            D_temporal = self.temporal(
                F_t, [past[:, i] for i in range(T - 1)], geo.src_poses, geo.intr, self.bins, self.mono_static(F_t)
            )
            D_stereo = self._mie_static()(F_bino, D_temporal)
            V_s = self.encoder_static(self._lift(F_fusion, D_stereo, geo))
        if not flags.use_dynamic:
            V_d = torch.zeros_like(V_s)
        if not flags.use_static:
            V_s = torch.zeros_like(V_d)

        V_f = fuse(self.fusion, V_d, V_s)
        logits = upsample_and_project(V_f, self.head)

        F_point = V_point = None
        if points is not None:
            F_point = grid_sample_2d(F_fusion, self.project_points(points, geo))
            V_point = grid_sample_3d(V_f, points, self.working_grid)
        return ModelOutput(logits, D_mono, D_stereo, F_point, V_point)

    @staticmethod
    def project_points(points: torch.Tensor, geo: _Geometry) -> torch.Tensor:
        """World points (N, P, 3) -> feature-map index coordinates (N, P, 2) in the reference view."""
        inv = geo.ref_pose.inverse()
        R = torch.as_tensor(inv.rotation, dtype=points.dtype)
        t = torch.as_tensor(inv.translation, dtype=points.dtype)
        cam = points @ R.T + t
        z = cam[..., 2].clamp(min=1e-3)
        intr = geo.intr
        u = intr.fx * cam[..., 0] / z + intr.cx
        v = intr.fy * cam[..., 1] / z + intr.cy
        return torch.stack([u - 0.5, v - 0.5], dim=-1)

    def predict(self, batch: ViewBatch) -> torch.Tensor:
        """Argmax label grid(s), uint8 (N, X, Y, Z)."""
        with torch.no_grad():
            return self(batch).logits.argmax(dim=1).to(torch.uint8)


def build_model(config: ModelConfig) -> SSCModel:
    """Deterministic construction: parameters depend only on `config.seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return SSCModel(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
