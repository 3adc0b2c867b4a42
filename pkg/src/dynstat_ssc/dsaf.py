"""Dynamic/static volume fusion: BEV attention, ASPP context and gated residual lifting back to 3D."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import MultiHeadAttention, NeighborhoodCrossAttention


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    window_k: int = 7
    n_self_layers: int = 3
    n_cross_layers: int = 2

    def __post_init__(self):
        if self.window_k < 1 or self.window_k % 2 == 0:
            raise ValueError(f"window_k must be odd and >= 1, got {self.window_k}")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")


class FusionStrategy(str, enum.Enum):
    ADD_CONV = "add_conv"
    CAT_CONV = "cat_conv"
    GLOBAL_ATTENTION = "global_attention"
    DSAF = "dsaf"


def height_pool(volume: torch.Tensor) -> torch.Tensor:
    """(N, C, X, Y, Z) -> (N, C, X, Y) mean over height."""
    return volume.mean(dim=-1)


def _tokens(bev: torch.Tensor) -> torch.Tensor:
    return bev.flatten(2).transpose(1, 2)


def _untokens(tokens: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(like.shape)


class SelfAttentionStack(nn.Module):
    """Pre-norm global multi-head self-attention layers over BEV tokens."""

    def __init__(self, channels: int, heads: int, n_layers: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"heads={heads} must divide channel count {channels}")
        self.norms = nn.ModuleList(nn.LayerNorm(channels) for _ in range(n_layers))
        self.attns = nn.ModuleList(MultiHeadAttention(channels, heads) for _ in range(n_layers))

    def forward(self, bev: torch.Tensor) -> torch.Tensor:
        x = _tokens(bev)
        for norm, attn in zip(self.norms, self.attns):
            x = x + attn(norm(x))
        return _untokens(x, bev)


class NeighborhoodCrossStack(nn.Module):
    """Dynamic-BEV queries attend to k x k static-BEV windows; one bias table shared by all layers."""

    def __init__(self, channels: int, heads: int, window_k: int, n_layers: int):
        super().__init__()
        if window_k < 1 or window_k % 2 == 0:
            raise ValueError(f"window_k must be odd, got {window_k}")
        self.bias_table = nn.Parameter(torch.zeros(heads, 2 * window_k - 1, 2 * window_k - 1))
        self.q_norms = nn.ModuleList(nn.LayerNorm(channels) for _ in range(n_layers))
        self.kv_norms = nn.ModuleList(nn.LayerNorm(channels) for _ in range(n_layers))
        self.attns = nn.ModuleList(
            NeighborhoodCrossAttention(channels, heads, window_k, bias_table=self.bias_table)
            for _ in range(n_layers)
        )

    @staticmethod
    def _norm_map(norm: nn.LayerNorm, bev: torch.Tensor) -> torch.Tensor:
        return norm(bev.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def forward(self, query_bev: torch.Tensor, context_bev: torch.Tensor) -> torch.Tensor:
        if query_bev.shape != context_bev.shape:
            raise ValueError("dynamic and static BEV shapes differ")
        x = query_bev
        for qn, kvn, attn in zip(self.q_norms, self.kv_norms, self.attns):
            x = x + attn(self._norm_map(qn, x), self._norm_map(kvn, context_bev))
        return x


class ASPP(nn.Module):
    """1x1, dilated 3x3 (one per rate) and image-pooling branches, projected back to C."""

    def __init__(self, channels: int, rates: Sequence[int] = (1, 2, 3)):
        super().__init__()
        self.rates = tuple(rates)
        self.point = nn.Conv2d(channels, channels, 1)
        self.dilated = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in self.rates
        )
        self.pooled = nn.Conv2d(channels, channels, 1)
        self.project = nn.Conv2d(channels * (len(self.rates) + 2), channels, 1)

    def forward(self, bev: torch.Tensor) -> torch.Tensor:
        branches = [F.relu(self.point(bev))]
        branches += [F.relu(conv(bev)) for conv in self.dilated]
        g = F.relu(self.pooled(bev.mean(dim=(2, 3), keepdim=True)))
        branches.append(g.expand_as(bev))
        return self.project(torch.cat(branches, dim=1))


class GatedFusion(nn.Module):
    """V_f = V_d + sigmoid(FFN(V_d)) * ctx, with ctx broadcast along height."""

    def __init__(self, channels: int):
        super().__init__()
        self.ffn = nn.Sequential(nn.Linear(channels, channels), nn.ReLU(), nn.Linear(channels, 1))

    def gate(self, V_d: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.ffn(V_d.movedim(1, -1))).movedim(-1, 1)

    def forward(self, V_d: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if ctx.shape[:2] != V_d.shape[:2] or ctx.shape[-2:] != V_d.shape[-3:-1]:
            raise ValueError(f"BEV context {tuple(ctx.shape)} does not match volume {tuple(V_d.shape)}")
        return V_d + self.gate(V_d) * ctx[..., None]


class GlobalCrossAttention(nn.Module):
    """Single pre-norm dense cross-attention layer from dynamic to static BEV tokens."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.q_norm = nn.LayerNorm(channels)
        self.kv_norm = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, heads)

    def forward(self, query_bev, context_bev):
        q = _tokens(query_bev)
        return _untokens(q + self.attn(self.q_norm(q), self.kv_norm(_tokens(context_bev))), query_bev)


class DSAF(nn.Module):
    """height pool -> self-attention -> neighborhood cross-attention -> ASPP -> gated fusion."""

    def __init__(self, channels: int, cfg: AttentionConfig, rates: Sequence[int] = (1, 2, 3)):
        super().__init__()
        self.self_attn = SelfAttentionStack(channels, cfg.heads, cfg.n_self_layers)
        self.cross_attn = NeighborhoodCrossStack(channels, cfg.heads, cfg.window_k, cfg.n_cross_layers)
        self.aspp = ASPP(channels, rates)
        self.gated = GatedFusion(channels)

    def forward(self, V_d: torch.Tensor, V_s: torch.Tensor) -> torch.Tensor:
        F_d, F_s = height_pool(V_d), height_pool(V_s)
        F_f = self.cross_attn(self.self_attn(F_d), F_s)
        return self.gated(V_d, self.aspp(F_f))


class _ConvFusion(nn.Module):
    def __init__(self, channels: int, concat: bool):
        super().__init__()
        self.concat = concat
        self.conv = nn.Conv3d(2 * channels if concat else channels, channels, 3, padding=1)

    def forward(self, V_d, V_s):
        return self.conv(torch.cat([V_d, V_s], dim=1) if self.concat else V_d + V_s)


class _AttentionFusion(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.cross = GlobalCrossAttention(channels, heads)
        self.gated = GatedFusion(channels)

    def forward(self, V_d, V_s):
        return self.gated(V_d, self.cross(height_pool(V_d), height_pool(V_s)))


def build_fusion(channels: int, strategy: FusionStrategy, cfg: AttentionConfig, rates=(1, 2, 3)) -> nn.Module:
    strategy = FusionStrategy(strategy)
    if strategy is FusionStrategy.ADD_CONV:
        return _ConvFusion(channels, concat=False)
    if strategy is FusionStrategy.CAT_CONV:
        return _ConvFusion(channels, concat=True)
    if strategy is FusionStrategy.GLOBAL_ATTENTION:
        return _AttentionFusion(channels, cfg.heads)
    if strategy is FusionStrategy.DSAF:
        return DSAF(channels, cfg, rates)
    raise ValueError(f"unknown fusion strategy {strategy!r}")


def fuse(module: nn.Module, V_d: torch.Tensor, V_s: torch.Tensor) -> torch.Tensor:
    if V_d.shape != V_s.shape:
        raise ValueError(f"volume shapes differ: {tuple(V_d.shape)} vs {tuple(V_s.shape)}")
    return module(V_d, V_s)
