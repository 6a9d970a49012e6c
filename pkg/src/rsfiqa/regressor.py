"""Quality-score head, MOS normalisation and the MSE objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from . import numerics as nx
from .backbone import init_weight, zeros
from .errors import DegenerateRange, EmptyBatch, LengthMismatch, ShapeMismatch
from .mhf import QKV


class Head(nn.Module):
    """sigmoid(MLP(mean-pool(self-attention block(R)))).

    The self-attention block is residual; the MLP has one relu hidden layer.
    """

    def __init__(self, dim: int = 32, hidden: int = 64, heads: int = 1, squash: bool = True):
        super().__init__()
        self.dim = dim
        self.squash = squash
        self.qkv = QKV(dim, heads)
        self.w1 = init_weight(dim, hidden, fan_in=dim, gain=math.sqrt(2.0))
        self.b1 = zeros(hidden)
        self.w2 = init_weight(hidden, 1, fan_in=hidden)
        self.b2 = zeros(1)

    def pooled(self, r: torch.Tensor) -> torch.Tensor:
        if r.dim() != 3 or r.shape[2] != self.dim:
            raise ShapeMismatch(f"expected h x w x {self.dim} features, got {tuple(r.shape)}")
        flat = nx.flatten_hw(r)
        attended = self.qkv.attend(flat, flat) + flat
        return attended.mean(dim=0)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        hidden = nx.relu(nx.linear(self.pooled(r), self.w1, self.b1))
        out = nx.linear(hidden, self.w2, self.b2).reshape(())
        return nx.sigmoid(out) if self.squash else out


def predict(r: torch.Tensor, head: Head) -> torch.Tensor:
    return head(r)


def _as_vector(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.reshape(-1)
    items = list(x)
    if not items:
        return torch.zeros(0, dtype=nx.DTYPE)
    return torch.stack([torch.as_tensor(v, dtype=nx.DTYPE).reshape(()) for v in items])


def mse_loss(preds, targets) -> torch.Tensor:
    p, t = _as_vector(preds), _as_vector(targets)
    if p.numel() != t.numel():
        raise LengthMismatch(f"{p.numel()} predictions vs {t.numel()} targets")
    if p.numel() == 0:
        raise EmptyBatch("mse_loss needs at least one pair")
    return ((p - t) ** 2).mean()


@dataclass(frozen=True)
class MosNormalizer:
    """Min-max map fitted on the training split; persisted with checkpoints."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, values: Sequence[float]) -> MosNormalizer:
        values = [float(v) for v in values]
        if len(values) < 2:
            raise DegenerateRange("need at least two MOS values to normalise")
        lo, hi = min(values), max(values)
        if not hi > lo:
            raise DegenerateRange(f"all MOS values equal {lo}")
        return cls(lo, hi)

    def transform(self, values: Sequence[float]) -> list[float]:
        return [(float(v) - self.lo) / (self.hi - self.lo) for v in values]

    def inverse(self, values: Sequence[float]) -> list[float]:
        return [self.lo + float(v) * (self.hi - self.lo) for v in values]


def normalize_mos(values: Sequence[float]) -> list[float]:
    return MosNormalizer.fit(values).transform(values)
