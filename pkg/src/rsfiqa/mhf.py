"""Multi-scale hierarchical fusion.

Every backbone level is gated, pooled to the coarsest resolution and squashed
into (0, 1); each result is refined by residual self-attention, and a
cross-attention cascade from the coarsest level down to the finest merges
them into one map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from . import numerics as nx
from .backbone import init_weight, zeros
from .errors import EmptyInput, ShapeMismatch


def multihead_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int = 1,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Split the channel axis into ``heads`` groups and attend per group.

    The same additive bias is applied to every head.
    """
    if heads == 1:
        return nx.scaled_attention(q, k, v, bias)
    dq, dv = q.shape[1], v.shape[1]
    if dq % heads or dv % heads:
        raise ShapeMismatch(f"channel widths {dq}, {dv} not divisible by {heads} heads")
    sq, sv = dq // heads, dv // heads
    outs = [
        nx.scaled_attention(q[:, h * sq:(h + 1) * sq], k[:, h * sq:(h + 1) * sq], v[:, h * sv:(h + 1) * sv], bias)
        for h in range(heads)
    ]
    return torch.cat(outs, dim=1)


class QKV(nn.Module):
    """Bias-free linear projections onto query, key and value."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = init_weight(dim, dim, fan_in=dim)
        self.wk = init_weight(dim, dim, fan_in=dim)
        self.wv = init_weight(dim, dim, fan_in=dim)

    def attend(self, query_src: torch.Tensor, kv_src: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        q = nx.linear(query_src, self.wq)
        k = nx.linear(kv_src, self.wk)
        v = nx.linear(kv_src, self.wv)
        return multihead_attention(q, k, v, self.heads, bias)


class GatedDownsample(nn.Module):
    """sigmoid(Conv3x3(Pool(sigmoid(bottleneck(F)) * gate(F)))) for one level."""

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        mid = max(1, dim // 2)
        relu_gain = math.sqrt(2.0)
        self.reduce_w = init_weight(1, 1, in_channels, mid, fan_in=in_channels, gain=relu_gain)
        self.reduce_b = zeros(mid)
        self.mid_w = init_weight(3, 3, mid, mid, fan_in=9 * mid, gain=relu_gain)
        self.mid_b = zeros(mid)
        self.expand_w = init_weight(1, 1, mid, dim, fan_in=mid)
        self.expand_b = zeros(dim)
        self.gate_w = init_weight(1, 1, in_channels, dim, fan_in=in_channels)
        self.post_w = init_weight(3, 3, dim, dim, fan_in=9 * dim)
        self.post_b = zeros(dim)

    def bottleneck(self, f: torch.Tensor) -> torch.Tensor:
        x = nx.relu(nx.conv2d(f, self.reduce_w, self.reduce_b))
        x = nx.relu(nx.conv2d(x, self.mid_w, self.mid_b, padding=1))
        return nx.conv2d(x, self.expand_w, self.expand_b)

    def forward(self, f: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
        gated = nx.multiply(nx.sigmoid(self.bottleneck(f)), nx.conv2d(f, self.gate_w))
        pooled = nx.adaptive_avg_pool(gated, out_h, out_w)
        return nx.sigmoid(nx.conv2d(pooled, self.post_w, self.post_b, padding=1))


@dataclass
class FusedFeatureMaps:
    downsampled: list[torch.Tensor]
    enhanced: list[torch.Tensor]
    fused: torch.Tensor


class MHF(nn.Module):
    """Fusion over ``len(level_channels)`` backbone levels into a ``dim``-channel map.

    Attention projections are separate for every level and every cascade step.
    """

    def __init__(self, level_channels: Sequence[int], dim: int = 32, heads: int = 1):
        super().__init__()
        self.dim = dim
        self.downsamplers = nn.ModuleList(GatedDownsample(c, dim) for c in level_channels)
        self.self_attn = nn.ModuleList(QKV(dim, heads) for _ in level_channels)
        self.cross_attn = nn.ModuleList(QKV(dim, heads) for _ in level_channels[:-1])

    def gated_downsample(self, f: torch.Tensor, level: int, out_h: int, out_w: int) -> torch.Tensor:
        n = len(self.downsamplers)
        scale = 2 ** (n - 1 - level)
        if f.shape[0] != out_h * scale or f.shape[1] != out_w * scale:
            raise ShapeMismatch(
                f"level {level} map is {tuple(f.shape[:2])}, expected {(out_h * scale, out_w * scale)}"
            )
        return self.downsamplers[level](f, out_h, out_w)

    def self_enhance(self, d: torch.Tensor, level: int) -> torch.Tensor:
        if d.dim() != 3 or d.shape[2] != self.dim:
            raise ShapeMismatch(f"expected h x w x {self.dim} map, got {tuple(d.shape)}")
        flat = nx.flatten_hw(d)
        out = self.self_attn[level].attend(flat, flat) + flat
        return out.reshape(d.shape)

    def cross_fuse(self, enhanced: Sequence[torch.Tensor]) -> torch.Tensor:
        if not enhanced:
            raise EmptyInput("cross_fuse needs at least one level")
        shape = enhanced[0].shape
        if any(e.shape != shape for e in enhanced):
            raise ShapeMismatch("all enhanced maps must share extents")
        fused = nx.flatten_hw(enhanced[-1])
        for i in range(len(enhanced) - 2, -1, -1):
            kv = nx.flatten_hw(enhanced[i])
            fused = self.cross_attn[i].attend(fused, kv) + fused
        return fused.reshape(shape)

    def forward(self, levels: Sequence[torch.Tensor]) -> FusedFeatureMaps:
        if len(levels) != len(self.downsamplers):
            raise ShapeMismatch(f"expected {len(self.downsamplers)} levels, got {len(levels)}")
        out_h, out_w = levels[-1].shape[:2]
        down = [self.gated_downsample(f, i, out_h, out_w) for i, f in enumerate(levels)]
        enhanced = [self.self_enhance(d, i) for i, d in enumerate(down)]
        return FusedFeatureMaps(down, enhanced, self.cross_fuse(enhanced))
