"""Toy language/vision encoders and the projections into the shared space."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import torch
from torch import nn

from .layers import ShapeError, TransformerEncoder
from .synthworld import MAX_TOKENS, VOCAB


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = len(VOCAB)
    n_tokens: int = MAX_TOKENS
    d_lang: int = 64
    d_vis: int = 64
    d_model: int = 64
    patch_size: int = 8
    n_layers_lang: int = 2
    n_layers_vis: int = 2
    n_heads: int = 4
    ffn_ratio: int = 4
    max_grid: int = 16

    def validate(self) -> "EncoderConfig":
        for d in (self.d_lang, self.d_vis, self.d_model):
            if d % self.n_heads:
                raise ShapeError(f"dim {d} not divisible by n_heads {self.n_heads}")
        return self


@dataclass
class EmbeddingSeq:
    """Batched token embeddings.

    vectors: [B, L, C]; mask: bool [B, L] where True marks a position to
    ignore; grid_shape: (h, w) for vision tokens laid out row-major.
    """

    vectors: torch.Tensor
    mask: torch.Tensor
    grid_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.vectors.dim() != 3 or self.mask.shape != self.vectors.shape[:2]:
            raise ShapeError(
                f"vectors {tuple(self.vectors.shape)} and mask {tuple(self.mask.shape)} disagree")
        if self.grid_shape is not None and self.grid_shape[0] * self.grid_shape[1] != self.vectors.shape[1]:
            raise ShapeError(f"grid {self.grid_shape} does not match length {self.vectors.shape[1]}")

    @property
    def length(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def with_vectors(self, vectors: torch.Tensor) -> "EmbeddingSeq":
        return replace(self, vectors=vectors)

    def grid(self) -> torch.Tensor:
        """[B, h, w, C] view of grid tokens."""
        if self.grid_shape is None:
            raise ShapeError("sequence has no grid_shape")
        h, w = self.grid_shape
        return self.vectors.view(self.vectors.shape[0], h, w, self.dim)


class LanguageEncoder(nn.Module):
    """Learned token table + positions + masked self-attention stack."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_lang)
        self.pos = nn.Parameter(torch.zeros(cfg.n_tokens, cfg.d_lang))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.encoder = TransformerEncoder(cfg.d_lang, cfg.n_heads, cfg.n_layers_lang, cfg.ffn_ratio)

    def forward(self, ids: torch.Tensor, valid: torch.Tensor) -> EmbeddingSeq:
        """ids: long [B, N]; valid: [B, N] nonzero at CLS..SEP."""
        if ids.shape[1] != self.pos.shape[0]:
            raise ShapeError(f"expected {self.pos.shape[0]} tokens, got {ids.shape[1]}")
        mask = valid == 0
        x = self.embed(ids) + self.pos
        return EmbeddingSeq(self.encoder(x, mask), mask)


class VisionEncoder(nn.Module):
    """Patch embedding with learned row/column positions, then self-attention."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.patch = nn.Conv2d(3, cfg.d_vis, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.row_pos = nn.Parameter(torch.zeros(cfg.max_grid, cfg.d_vis))
        self.col_pos = nn.Parameter(torch.zeros(cfg.max_grid, cfg.d_vis))
        nn.init.trunc_normal_(self.row_pos, std=0.02)
        nn.init.trunc_normal_(self.col_pos, std=0.02)
        self.encoder = TransformerEncoder(cfg.d_vis, cfg.n_heads, cfg.n_layers_vis, cfg.ffn_ratio)

    def forward(self, images: torch.Tensor) -> EmbeddingSeq:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        b, _, H, W = images.shape
        p = self.patch_size
        if H % p or W % p:
            raise ShapeError(f"image {H}x{W} not divisible by patch size {p}")
        h, w = H // p, W // p
        if h > self.row_pos.shape[0] or w > self.col_pos.shape[0]:
            raise ShapeError(f"grid {h}x{w} exceeds positional table")
        x = self.patch(images)  # [B, C, h, w]
        x = x + (self.row_pos[:h, None, :] + self.col_pos[None, :w, :]).permute(2, 0, 1)
        x = x.flatten(2).transpose(1, 2)
        mask = torch.zeros(b, h * w, dtype=torch.bool, device=images.device)
        return EmbeddingSeq(self.encoder(x), mask, (h, w))


class Projection(nn.Module):
    """Linear map of an :class:`EmbeddingSeq` to the shared dimension; masks pass through."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.linear = nn.Linear(d_in, d_out)

    def forward(self, seq: EmbeddingSeq) -> EmbeddingSeq:
        if seq.dim != self.linear.in_features:
            raise ShapeError(f"expected C={self.linear.in_features}, got {seq.dim}")
        return EmbeddingSeq(self.linear(seq.vectors), seq.mask, seq.grid_shape)


def encode_language(encoder: LanguageEncoder, tokens) -> EmbeddingSeq:
    """Encode one :class:`~groundtrack.synthworld.TokenSequence` (batch of 1)."""
    p = next(encoder.parameters())
    ids = torch.as_tensor(tokens.ids, dtype=torch.long, device=p.device)[None]
    valid = torch.as_tensor(tokens.mask, device=p.device)[None]
    return encoder(ids, valid)


def encode_vision(encoder: VisionEncoder, image) -> EmbeddingSeq:
    p = next(encoder.parameters())
    return encoder(torch.as_tensor(image, dtype=p.dtype, device=p.device))
