"""Region-aware semantic attention.

Each region's pooled text embedding attends over the region's projected
pixels; the result, broadcast over the region plus a per-pixel residual, is
the region's guided representation. Resampled to the fused map's grid, the
representations build a Gram-matrix bias that is added to the attention
logits over the fused map.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from . import numerics as nx
from .backbone import init_weight
from .errors import EmptyRegion, EmptyText, ShapeMismatch, TargetMismatch
from .mhf import QKV
from .semantic_encoder import TextEmbeddingMatrix


def resample_repr(g: torch.Tensor, out_h: int, out_w: int, expected_rows: int | None = None) -> torch.Tensor:
    """Bilinear resample of an H x W x C_G map, flattened row-major to (out_h * out_w) x C_G."""
    if expected_rows is not None and out_h * out_w != expected_rows:
        raise TargetMismatch(f"{out_h}x{out_w} target does not give {expected_rows} rows")
    return nx.flatten_hw(nx.bilinear_interp(g, out_h, out_w))


def attention_bias(reprs: Sequence[torch.Tensor], lam: torch.Tensor | float) -> torch.Tensor:
    """lam * sum_i G_i G_i^T over the resampled region representations."""
    if not reprs:
        raise ShapeMismatch("need at least one region representation")
    shape = reprs[0].shape
    if any(g.dim() != 2 or g.shape != shape for g in reprs):
        raise ShapeMismatch("region representations must share a 2-D shape")
    lam = torch.as_tensor(lam, dtype=nx.DTYPE)
    if lam.item() < 0:
        raise ValueError(f"lambda must be non-negative, got {lam.item()}")
    gram = sum(g @ g.T for g in reprs)
    return lam * gram


class RSA(nn.Module):
    def __init__(self, dim: int = 32, text_dim: int = 32, guide_dim: int = 16, heads: int = 1, lambda_init: float = 0.1,
                 train_lambda: bool = True):
        super().__init__()
        if guide_dim <= 0:
            raise ValueError("guide_dim must be positive")
        self.guide_dim = guide_dim
        self.pixel_w = init_weight(3, guide_dim, fan_in=3)
        self.text_w = init_weight(text_dim, guide_dim, fan_in=text_dim)
        self.qkv = QKV(dim, heads)
        self.lam_raw = nn.Parameter(torch.tensor(float(lambda_init), dtype=nx.DTYPE), requires_grad=train_lambda)

    @property
    def lam(self) -> torch.Tensor:
        return self.lam_raw.clamp(min=0.0)

    def project_pixels(self, image: torch.Tensor) -> torch.Tensor:
        return nx.linear(image, self.pixel_w)

    def region_guided_repr(
        self,
        text: TextEmbeddingMatrix,
        region: torch.Tensor,
        image: torch.Tensor,
        projected: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """G_i(x) = M_i(x) * (a_i + P_i(x)), where a_i = Attn(text query, region pixels).

        ``projected`` may carry the whole image's pixel projection, shared
        across regions; since the projection is bias-free, masking before or
        after projecting gives the same P_i.
        """
        inside = region > 0.5
        if not bool(inside.any()):
            raise EmptyRegion("region has no pixels")
        if text.valid_count < 1:
            raise EmptyText("text embedding has no valid tokens")
        m = region[..., None]
        if projected is None:
            projected = self.project_pixels(image)
        p = m * projected
        query = text.tokens[: text.valid_count].mean(dim=0, keepdim=True)
        q = nx.linear(query, self.text_w)
        kv = p[inside]
        a = nx.scaled_attention(q, kv, kv)
        return m * (a.reshape(1, 1, -1) + p)

    def bias(
        self,
        texts: Sequence[TextEmbeddingMatrix],
        regions: torch.Tensor,
        image: torch.Tensor,
        out_h: int,
        out_w: int,
    ) -> torch.Tensor:
        projected = self.project_pixels(image)
        reprs = [
            resample_repr(self.region_guided_repr(t, regions[i], image, projected), out_h, out_w)
            for i, t in enumerate(texts)
        ]
        return attention_bias(reprs, self.lam)

    def rsa_attention(self, fused: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
        h, w, c = fused.shape
        if bias is not None and bias.shape != (h * w, h * w):
            raise ShapeMismatch(f"bias {tuple(bias.shape)} does not match {h * w} positions")
        flat = nx.flatten_hw(fused)
        return self.qkv.attend(flat, flat, bias).reshape(h, w, c)
