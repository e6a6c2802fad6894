"""Joint relation modelling over [language, template-or-placeholder, test image]."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import torch
from torch import nn

from .encoders import EmbeddingSeq
from .layers import ShapeError, TransformerEncoder


class Mode(enum.Enum):
    GROUNDING = "grounding"
    TRACKING = "tracking"


class ModeError(ValueError):
    pass


class Segments(NamedTuple):
    """Segment boundaries of a joint sequence plus the test-image grid."""

    start: int
    ref: int
    test: int
    end: int
    test_grid: Optional[Tuple[int, int]] = None

    @property
    def offsets(self) -> Tuple[int, int, int, int]:
        return (self.start, self.ref, self.test, self.end)


@dataclass
class RelationOutput:
    h_l: Optional[EmbeddingSeq]
    h_ref: Optional[EmbeddingSeq]
    h_t: EmbeddingSeq

    @property
    def nl_cls(self) -> torch.Tensor:
        return self.h_l.vectors[:, 0]


def placeholder(batch: int, length: int, dim: int, *, dtype=torch.float32, device=None) -> EmbeddingSeq:
    """Zero vectors, fully masked."""
    return EmbeddingSeq(torch.zeros(batch, length, dim, dtype=dtype, device=device),
                        torch.ones(batch, length, dtype=torch.bool, device=device))


def build_reference(mode: Mode, lang: EmbeddingSeq, template: Optional[EmbeddingSeq],
                    test: EmbeddingSeq, n_template: int) -> Tuple[EmbeddingSeq, Segments]:
    """Concatenate [lang, template or placeholder, test].

    Returns the joint sequence and segment offsets
    ``(0, N_l, N_l + N_z, N_l + N_z + N_t)``.
    """
    if mode is Mode.GROUNDING and template is not None:
        raise ModeError("grounding takes no template")
    if mode is Mode.TRACKING and template is None:
        raise ModeError("tracking requires a template")
    if template is None:
        template = placeholder(test.vectors.shape[0], n_template, test.dim,
                               dtype=test.vectors.dtype, device=test.vectors.device)
    elif template.length != n_template:
        raise ShapeError(f"template has {template.length} tokens, expected {n_template}")
    return concat_segments(lang, template, test)


def concat_segments(lang: Optional[EmbeddingSeq], ref: Optional[EmbeddingSeq],
                    test: EmbeddingSeq) -> Tuple[EmbeddingSeq, Segments]:
    parts = [p for p in (lang, ref, test) if p is not None]
    vectors = torch.cat([p.vectors for p in parts], dim=1)
    mask = torch.cat([p.mask for p in parts], dim=1)
    nl = lang.length if lang is not None else 0
    nz = ref.length if ref is not None else 0
    return EmbeddingSeq(vectors, mask), Segments(0, nl, nl + nz, nl + nz + test.length,
                                                 test.grid_shape)


class RelationEncoder(nn.Module):
    """One encoder and one positional table serving both modes.

    ``n_ref`` is the reference-block length used by both the template and
    its zero placeholder, so the positional layout never changes with mode.
    """

    def __init__(self, dim: int, n_heads: int, n_layers: int, n_lang: int, n_ref: int,
                 n_test: int, ffn_ratio: int = 4):
        super().__init__()
        self.segments = (n_lang, n_ref, n_test)
        self.pos = nn.Parameter(torch.zeros(n_lang + n_ref + n_test, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.encoder = TransformerEncoder(dim, n_heads, n_layers, ffn_ratio)

    def forward(self, joint: EmbeddingSeq, segments: Segments) -> RelationOutput:
        if joint.length != self.pos.shape[0] or segments.end != joint.length:
            raise ShapeError(f"joint length {joint.length} != positional table {self.pos.shape[0]}")
        x = self.encoder(joint.vectors + self.pos, joint.mask)
        a, b, c, d = segments.offsets

        def seg(lo, hi, grid=None):
            return EmbeddingSeq(x[:, lo:hi], joint.mask[:, lo:hi], grid) if hi > lo else None

        return RelationOutput(seg(a, b), seg(b, c), seg(c, d, segments.test_grid))


def relation_encode(encoder: RelationEncoder, joint: EmbeddingSeq, segments: Segments) -> RelationOutput:
    return encoder(joint, segments)
