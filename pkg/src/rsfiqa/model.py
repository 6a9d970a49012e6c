"""Full model: backbone, fusion, region-aware attention and the score head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .backbone import Backbone, default_channels, init_weight, zeros
from .config import RunConfig
from .description import RegionDescriptionRecord
from .mhf import MHF
from .regressor import Head
from .rsa import RSA
from .segmentation import MaskSet
from .semantic_encoder import EMPTY_ANSWER, HashedTextEncoder, TextEmbeddingMatrix, compose_description


@dataclass
class Sample:
    """Model-ready inputs for one image."""

    image_id: str
    image: torch.Tensor  # H x W x 3
    regions: torch.Tensor  # l_eff x H x W, one-hot
    token_ids: np.ndarray  # l_eff x T
    valid_counts: list[int]
    mos: float | None = None


class RSFIQA(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.backbone_channels or default_channels(cfg.levels)
        self.backbone = Backbone(channels)
        if cfg.use_mhf:
            self.mhf = MHF(channels, cfg.dim, cfg.heads)
        else:
            # top level only, 1x1 projection to the fused width
            self.top_w = init_weight(1, 1, channels[-1], cfg.dim, fan_in=channels[-1], gain=math.sqrt(2.0))
            self.top_b = zeros(cfg.dim)
        self.encoder = HashedTextEncoder(cfg.vocab_size, cfg.text_dim, cfg.max_tokens, cfg.hash_seed)
        self.rsa = RSA(cfg.dim, cfg.text_dim, cfg.guide_dim, cfg.heads, cfg.lambda_init, cfg.train_lambda)
        self.head = Head(cfg.dim, cfg.mlp_hidden, cfg.heads)

    def fused_features(self, image: torch.Tensor) -> torch.Tensor:
        levels = self.backbone(image)
        if self.cfg.use_mhf:
            return self.mhf(levels).fused
        return nx.conv2d(levels[-1], self.top_w, self.top_b)

    def texts(self, sample: Sample) -> list[TextEmbeddingMatrix]:
        return [self.encoder.embed(ids, n) for ids, n in zip(sample.token_ids, sample.valid_counts)]

    def region_bias(self, sample: Sample, out_h: int, out_w: int) -> torch.Tensor:
        return self.rsa.bias(self.texts(sample), sample.regions, sample.image, out_h, out_w)

    def forward(self, sample: Sample) -> torch.Tensor:
        fused = self.fused_features(sample.image)
        bias = None
        if self.cfg.use_rsa_bias:
            bias = self.region_bias(sample, fused.shape[0], fused.shape[1])
        return self.head(self.rsa.rsa_attention(fused, bias))


def describe_text(rec: RegionDescriptionRecord, cfg: RunConfig) -> str:
    if not cfg.use_descriptions:
        return EMPTY_ANSWER
    return compose_description(rec, cfg.prompt_fields, cfg.dimensions)


def make_sample(
    image_id: str,
    image: np.ndarray,
    mask_set: MaskSet,
    records: list[RegionDescriptionRecord],
    encoder: HashedTextEncoder,
    cfg: RunConfig,
    mos: float | None = None,
) -> Sample:
    if len(records) != mask_set.l_eff:
        raise ValueError(f"{image_id}: {len(records)} descriptions for {mask_set.l_eff} regions")
    ids, counts = zip(*(encoder.token_ids(describe_text(r, cfg)) for r in records))
    return Sample(
        image_id=image_id,
        image=torch.as_tensor(np.asarray(image, dtype=np.float64)),
        regions=torch.as_tensor(mask_set.indicators()),
        token_ids=np.stack(ids),
        valid_counts=list(counts),
        mos=mos,
    )
