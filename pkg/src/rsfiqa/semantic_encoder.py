"""Description text to token-embedding matrices.

A trainable table over hashed word tokens stands in for a pretrained text
encoder; anything exposing ``encode(text) -> TextEmbeddingMatrix`` can
replace it.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .description import DIMENSIONS, Dimension, RegionDescriptionRecord, format_score
from .errors import EmptyText

PROMPT_FIELDS = ("content", "level", "score")
EMPTY_ANSWER = "Answer."

_TOKEN = re.compile(r"[a-z0-9]+")


def compose_description(
    rec: RegionDescriptionRecord,
    fields: Iterable[str] = PROMPT_FIELDS,
    dimensions: Iterable[Dimension | str] = DIMENSIONS,
) -> str:
    """Canonical text: content sentence, then ``dim: level (score)`` in fixed dimension order.

    Disabled fields and dimensions are left out; with nothing left the text
    is the bare ``"Answer."``.
    """
    fields = set(fields)
    unknown = fields - set(PROMPT_FIELDS)
    if unknown:
        raise ValueError(f"unknown prompt fields {sorted(unknown)}")
    wanted = {Dimension(d) for d in dimensions}
    parts = []
    if "content" in fields:
        parts.append(f"{rec.content}.")
    items = []
    for dim in DIMENSIONS:
        if dim not in wanted:
            continue
        bits = []
        if "level" in fields:
            bits.append(rec.levels[dim])
        if "score" in fields:
            bits.append(f"({format_score(rec.scores[dim])})")
        if bits:
            items.append(f"{dim.value}: {' '.join(bits)}")
    if items:
        parts.append("; ".join(items) + ".")
    return " ".join(parts) if parts else EMPTY_ANSWER


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def token_id(token: str, vocab_size: int, hash_seed: int = 0) -> int:
    key = hash_seed.to_bytes(8, "little", signed=False)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") % vocab_size


@dataclass
class TextEmbeddingMatrix:
    tokens: torch.Tensor  # T x d, rows past valid_count are zero
    valid_count: int


class HashedTextEncoder(nn.Module):
    def __init__(self, vocab_size: int = 4096, dim: int = 32, max_tokens: int = 32, hash_seed: int = 0):
        super().__init__()
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_tokens = max_tokens
        self.hash_seed = hash_seed
        self.table = nn.Parameter(torch.randn(vocab_size, dim, dtype=nx.DTYPE))

    def token_ids(self, text: str) -> tuple[np.ndarray, int]:
        """Ids padded with zeros to ``max_tokens``, and the number of real tokens."""
        toks = tokenize(text)
        if not toks:
            raise EmptyText(f"no tokens in {text!r}")
        toks = toks[: self.max_tokens]
        ids = np.zeros(self.max_tokens, dtype=np.int64)
        ids[: len(toks)] = [token_id(t, self.vocab_size, self.hash_seed) for t in toks]
        return ids, len(toks)

    def embed(self, ids: np.ndarray | torch.Tensor, valid_count: int) -> TextEmbeddingMatrix:
        ids = torch.as_tensor(ids, dtype=torch.long)
        rows = self.table[ids[:valid_count]]
        pad = torch.zeros(self.max_tokens - valid_count, self.dim, dtype=nx.DTYPE)
        return TextEmbeddingMatrix(torch.cat([rows, pad], dim=0), valid_count)

    def encode(self, text: str) -> TextEmbeddingMatrix:
        return self.embed(*self.token_ids(text))


def encode(text: str, encoder: HashedTextEncoder) -> TextEmbeddingMatrix:
    return encoder.encode(text)
