"""Target decoder, similarity fusion and the corner-based box head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .encoders import EmbeddingSeq
from .layers import ShapeError, TransformerDecoder

MIN_SIDE = 1e-4
DEGENERATE_SIDE = 1e-3


class TargetDecoder(nn.Module):
    """Decodes one target embedding from ``h_t`` with a learned target query."""

    def __init__(self, dim: int, n_heads: int, n_layers: int = 2, ffn_ratio: int = 4):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(dim))
        nn.init.trunc_normal_(self.query, std=0.02)
        self.decoder = TransformerDecoder(dim, n_heads, n_layers, ffn_ratio)

    def effective_query(self, batch: int, clue: Optional[torch.Tensor] = None) -> torch.Tensor:
        q = self.query.expand(batch, -1)
        return q if clue is None else q + clue

    def forward(self, h_t: EmbeddingSeq, clue: Optional[torch.Tensor] = None) -> torch.Tensor:
        q = self.effective_query(h_t.vectors.shape[0], clue)[:, None]
        return self.decoder(q, h_t.vectors, h_t.mask)[:, 0]


def fuse_similarity(target_emb: torch.Tensor, h_t: EmbeddingSeq) -> EmbeddingSeq:
    """Gate each test token by its scaled similarity to the target, plus a residual.

    ``enhanced_i = h_i + s_i * h_i`` with ``s_i = <target, h_i> / sqrt(C)``.
    """
    if target_emb.shape[-1] != h_t.dim:
        raise ShapeError("target embedding and h_t dims differ")
    s = (h_t.vectors @ target_emb.unsqueeze(-1)).squeeze(-1) / math.sqrt(h_t.dim)
    return h_t.with_vectors(h_t.vectors + s.unsqueeze(-1) * h_t.vectors)


def similarity(target_emb: torch.Tensor, h_t: EmbeddingSeq) -> torch.Tensor:
    return (h_t.vectors @ target_emb.unsqueeze(-1)).squeeze(-1) / math.sqrt(h_t.dim)


@dataclass
class BoxPrediction:
    boxes: torch.Tensor  # [B, 4] normalised, x1 < x2 and y1 < y2
    raw: torch.Tensor  # [B, 4] before the ordering clamp
    tl: torch.Tensor  # [B, h, w] probability maps
    br: torch.Tensor
    degenerate: torch.Tensor  # bool [B]


def soft_argmax(logits: torch.Tensor):
    """Expected cell-centre coordinates under softmax(logits).

    logits: [B, h, w]. Returns (x, y, prob) with x, y in normalised units.
    """
    b, h, w = logits.shape
    prob = torch.softmax(logits.reshape(b, -1), dim=-1).view(b, h, w)
    xs = (torch.arange(w, dtype=logits.dtype, device=logits.device) + 0.5) / w
    ys = (torch.arange(h, dtype=logits.dtype, device=logits.device) + 0.5) / h
    x = (prob.sum(1) * xs).sum(-1)
    y = (prob.sum(2) * ys).sum(-1)
    return x, y, prob


def corners_to_box(tl_logits: torch.Tensor, br_logits: torch.Tensor) -> BoxPrediction:
    x1, y1, tl = soft_argmax(tl_logits)
    x2, y2, br = soft_argmax(br_logits)
    raw = torch.stack([x1, y1, x2, y2], dim=-1)
    degenerate = ((x2 - x1) < DEGENERATE_SIDE) | ((y2 - y1) < DEGENERATE_SIDE)
    x2 = torch.maximum(x2, x1 + MIN_SIDE)
    y2 = torch.maximum(y2, y1 + MIN_SIDE)
    return BoxPrediction(torch.stack([x1, y1, x2, y2], dim=-1), raw, tl, br, degenerate)


def _branch(dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(dim, dim // 2, 3, padding=1), nn.ReLU(),
        nn.Conv2d(dim // 2, dim // 4, 3, padding=1), nn.ReLU(),
        nn.Conv2d(dim // 4, 1, 1),
    )


class CornerHead(nn.Module):
    """Two conv branches scoring top-left and bottom-right corners per cell."""

    def __init__(self, dim: int):
        super().__init__()
        self.tl = _branch(dim)
        self.br = _branch(dim)

    def logits(self, seq: EmbeddingSeq):
        x = seq.grid().permute(0, 3, 1, 2)
        return self.tl(x)[:, 0], self.br(x)[:, 0]

    def forward(self, seq: EmbeddingSeq) -> BoxPrediction:
        return corners_to_box(*self.logits(seq))


def predict_box(head: CornerHead, enhanced: EmbeddingSeq) -> BoxPrediction:
    return head(enhanced)
