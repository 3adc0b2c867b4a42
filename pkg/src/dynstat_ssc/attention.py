"""Dense multi-head attention and 2D neighborhood attention with relative bias.

Token tensors are (N, L, C); maps are (N, C, H, W).
"""
from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    """Plain scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide channel count {dim}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, l, _ = x.shape
        return x.view(n, l, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, context=None, return_weights: bool = False):
        context = query if context is None else context
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        out = self.out(out)
        return (out, weights) if return_weights else out


def neighborhood_index(height: int, width: int, k: int, device=None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Key indices of each query's k x k window, clipped at the map border.

    Returns (index, valid, offset) with shapes (L, k*k), (L, k*k), (k*k, 2);
    invalid slots point at index 0 and must be masked by the caller. `offset`
    holds the (dy, dx) displacement of each window slot.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd and >= 1, got {k}")
    r = k // 2
    d = torch.arange(-r, r + 1, device=device)
    dy, dx = torch.meshgrid(d, d, indexing="ij")
    offset = torch.stack([dy.reshape(-1), dx.reshape(-1)], dim=-1)
    ys = torch.arange(height, device=device).repeat_interleave(width)
    xs = torch.arange(width, device=device).repeat(height)
    ky = ys[:, None] + offset[None, :, 0]
    kx = xs[:, None] + offset[None, :, 1]
    valid = (ky >= 0) & (ky < height) & (kx >= 0) & (kx < width)
    index = torch.where(valid, ky * width + kx, torch.zeros_like(ky))
    return index, valid, offset


class NeighborhoodCrossAttention(nn.Module):
    """Each query attends to the k x k window of the context map around its own position.

    logits = (q . k + B[dy, dx]) / sqrt(head_dim); B is a learnable
    (2k-1) x (2k-1) table per head. Border windows are clipped and the softmax
    renormalises over the remaining keys.
    """

    def __init__(self, dim: int, heads: int, k: int, bias_table: Optional[nn.Parameter] = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide channel count {dim}")
        if k < 1 or k % 2 == 0:
            raise ValueError(f"window size must be odd and >= 1, got {k}")
        self.heads = heads
        self.head_dim = dim // heads
        self.k = k
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        if bias_table is None:
            bias_table = nn.Parameter(torch.zeros(heads, 2 * k - 1, 2 * k - 1))
        self.bias_table = bias_table

    def forward(self, query_map: torch.Tensor, context_map: torch.Tensor, return_weights: bool = False):
        n, c, h, w = query_map.shape
        if context_map.shape != query_map.shape:
            raise ValueError(f"shape mismatch {tuple(query_map.shape)} vs {tuple(context_map.shape)}")
        index, valid, offset = neighborhood_index(h, w, self.k, device=query_map.device)
        L, S = index.shape

        q = self.q(query_map.flatten(2).transpose(1, 2))
        kv = self.kv(context_map.flatten(2).transpose(1, 2))
        key, val = kv.chunk(2, dim=-1)
        q = q.view(n, L, self.heads, self.head_dim).permute(0, 2, 1, 3)
        key = key.view(n, L, self.heads, self.head_dim).permute(0, 2, 1, 3)
        val = val.view(n, L, self.heads, self.head_dim).permute(0, 2, 1, 3)
        # gather window keys/values: (n, heads, L, S, head_dim)
        flat = index.reshape(-1)
        key_w = key[:, :, flat].view(n, self.heads, L, S, self.head_dim)
        val_w = val[:, :, flat].view(n, self.heads, L, S, self.head_dim)

        r = self.k - 1
        bias = self.bias_table[:, offset[:, 0] + r, offset[:, 1] + r]  # (heads, S)
        logits = (torch.einsum("nhld,nhlsd->nhls", q, key_w) + bias[None, :, None, :]) / math.sqrt(
            self.head_dim
        )
        logits = logits.masked_fill(~valid[None, None], float("-inf"))
        weights = logits.softmax(dim=-1)
        out = torch.einsum("nhls,nhlsd->nhld", weights, val_w)
        out = out.permute(0, 2, 1, 3).reshape(n, L, c)
        out = self.out(out).transpose(1, 2).reshape(n, c, h, w)
        return (out, weights) if return_weights else out
