"""Image encoders, text-anchored semantic map and multi-modal feature fusion."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import MultiHeadAttention
from .scene import SemanticClassSet

ENCODER_STRIDE = 4


@dataclass
class TextEmbeddingTable:
    """Q x C class embeddings with unit-norm rows.

    Any externally computed table (e.g. from a real text encoder) can be wrapped
    with `TextEmbeddingTable(names, array)`; rows are normalised on construction.
    """

    names: Tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.names):
            raise ValueError(f"expected ({len(self.names)}, C) embeddings, got {emb.shape}")
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("embedding rows must be non-zero")
        self.embeddings = emb / norms

    @property
    def Q(self) -> int:
        return self.embeddings.shape[0]

    @property
    def C(self) -> int:
        return self.embeddings.shape[1]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.embeddings, dtype=dtype)


def _name_vector(name: str, width: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(width)


def embed_text(class_set: SemanticClassSet, width: int, seed: int = 0) -> TextEmbeddingTable:
    """Deterministic stand-in for a text encoder: seeded hash projection of each name."""
    if width < 4:
        raise ValueError("embedding width must be >= 4")
    names = tuple(class_set.names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate class names")
    return TextEmbeddingTable(names, np.stack([_name_vector(n, width, seed) for n in names]))


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class ImageEncoder(nn.Module):
    """Stride-4 conv encoders producing image (F_t), visual (F_vis) and context (F_con) maps.

    The visual stack stands in for a frozen vision-language image encoder and
    ends in a linear projection to the text-embedding width.
    """

    def __init__(self, image_channels: int = 32, context_channels: int = 32,
                 text_width: int = 16, with_visual: bool = True):
        super().__init__()
        self.backbone = nn.Sequential(
            _conv(3, 16, stride=2), nn.ReLU(), _conv(16, image_channels, stride=2), nn.ReLU(),
            _conv(image_channels, image_channels),
        )
        self.context = nn.Sequential(
            _conv(image_channels, context_channels), nn.ReLU(), _conv(context_channels, context_channels, 1)
        )
        self.visual = None
        if with_visual:
            self.visual = nn.Sequential(
                _conv(3, 16, stride=2), nn.ReLU(), _conv(16, 32, stride=2), nn.ReLU(),
                _conv(32, text_width, 1),
            )

    def image_features(self, image: torch.Tensor) -> torch.Tensor:
        _check_image(image)
        return self.backbone(image - 0.5)

    def forward(self, image: torch.Tensor):
        feat = self.image_features(image)
        vis = self.visual(image - 0.5) if self.visual is not None else None
        return feat, vis, self.context(feat)


def _check_image(image: torch.Tensor) -> None:
    if image.dim() != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
        raise ValueError(f"image size {h}x{w} not divisible by {ENCODER_STRIDE}")


def encode_image(encoder: ImageEncoder, image: torch.Tensor):
    """(F_t, F_vis, F_con) for a batch of images."""
    return encoder(image)


def semantic_map(F_vis: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Per-pixel cosine similarity to every class embedding; zero-norm pixels give 0.

    F_vis: (N, C, H, W); text: (Q, C). Returns (N, Q, H, W) in [-1, 1].
    """
    if F_vis.shape[1] != text.shape[1]:
        raise ValueError(f"channel mismatch: F_vis has {F_vis.shape[1]}, text has {text.shape[1]}")
    vis = F.normalize(F_vis, dim=1)
    txt = F.normalize(text.to(F_vis.dtype), dim=1)
    return torch.einsum("nchw,qc->nqhw", vis, txt).clamp(-1.0, 1.0)


class FeatureFusion(nn.Module):
    """concat(F_sem, F_vis, F_con) -> conv-ReLU-conv -> cross-attention with F_con queries."""

    def __init__(self, n_classes: int, text_width: int, context_channels: int, heads: int = 4):
        super().__init__()
        self.mix = nn.Sequential(
            _conv(n_classes + text_width + context_channels, context_channels),
            nn.ReLU(),
            _conv(context_channels, context_channels),
        )
        self.attn = MultiHeadAttention(context_channels, heads)

    def forward(self, F_sem, F_vis, F_con, return_weights: bool = False):
        if not (F_sem.shape[-2:] == F_vis.shape[-2:] == F_con.shape[-2:]):
            raise ValueError("fusion inputs must share spatial dims")
        F_hat = self.mix(torch.cat([F_sem, F_vis, F_con], dim=1))
        n, c, h, w = F_con.shape
        q = F_con.flatten(2).transpose(1, 2)
        kv = F_hat.flatten(2).transpose(1, 2)
        out, weights = self.attn(q, kv, return_weights=True)
        fused = F_con + out.transpose(1, 2).reshape(n, c, h, w)
        return (fused, weights) if return_weights else fused


def _normalize_coords(coords: torch.Tensor, sizes: Sequence[int]) -> torch.Tensor:
    """Index-space coordinates -> [-1, 1] for grid_sample(align_corners=True)."""
    out = []
    for i, size in enumerate(sizes):
        c = coords[..., i]
        out.append(c * (2.0 / (size - 1)) - 1.0 if size > 1 else torch.zeros_like(c))
    return torch.stack(out, dim=-1)


def grid_sample_2d(feat: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup at continuous index coordinates with border clamping.

    feat: (N, C, H, W); points: (N, P, 2) as (u = column, v = row) so that
    (i, j) samples feat[..., j, i]. Returns (N, C, P).
    """
    h, w = feat.shape[-2:]
    grid = _normalize_coords(points.to(feat.dtype), (w, h))
    out = F.grid_sample(feat, grid[:, :, None, :], mode="bilinear", padding_mode="border", align_corners=True)
    return out[..., 0]
