"""Language-guided temporal memory producing the temporal clue for the target query."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Optional

import torch
from torch import nn

from .boxes import DegenerateBoxError
from .encoders import EmbeddingSeq
from .layers import ShapeError, TransformerDecoder, TransformerEncoder

logger = logging.getLogger(__name__)


def roi_pool(features, boxes: torch.Tensor, r: int) -> torch.Tensor:
    """Bilinear RoI sampling, one sample at each bin centre.

    features: EmbeddingSeq with grid_shape, or tensor [B, h, w, C].
    boxes: [B, 4] normalised (x1, y1, x2, y2). Returns [B, r*r, C], row-major.
    Feature cell (i, j) sits at normalised centre ((j+.5)/w, (i+.5)/h);
    samples beyond the outer cell centres replicate the border.
    """
    feat = features.grid() if isinstance(features, EmbeddingSeq) else features
    if feat.dim() != 4:
        raise ShapeError("roi_pool expects [B, h, w, C] features")
    boxes = boxes.to(feat.dtype)
    if boxes.dim() == 1:
        boxes = boxes[None]
    if bool(((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])).any()):
        raise DegenerateBoxError("roi_pool on a zero-area box")
    b, h, w, _ = feat.shape
    t = (torch.arange(r, dtype=feat.dtype, device=feat.device) + 0.5) / r
    gx = (boxes[:, 0:1] + t * (boxes[:, 2:3] - boxes[:, 0:1])) * w - 0.5
    gy = (boxes[:, 1:2] + t * (boxes[:, 3:4] - boxes[:, 1:2])) * h - 0.5
    gx, gy = gx.clamp(0, w - 1), gy.clamp(0, h - 1)
    x0, y0 = gx.floor().long(), gy.floor().long()
    x1, y1 = (x0 + 1).clamp(max=w - 1), (y0 + 1).clamp(max=h - 1)
    wx, wy = (gx - x0)[:, None, :, None], (gy - y0)[:, :, None, None]
    bi = torch.arange(b, device=feat.device)[:, None, None]
    f00 = feat[bi, y0[:, :, None], x0[:, None, :]]
    f01 = feat[bi, y0[:, :, None], x1[:, None, :]]
    f10 = feat[bi, y1[:, :, None], x0[:, None, :]]
    f11 = feat[bi, y1[:, :, None], x1[:, None, :]]
    out = (1 - wy) * ((1 - wx) * f00 + wx * f01) + wy * ((1 - wx) * f10 + wx * f11)
    return out.reshape(b, r * r, -1)


@dataclass
class TemporalMemory:
    """FIFO of pooled target patches for one sequence (oldest first)."""

    capacity: int = 3
    entries: Deque[torch.Tensor] = field(default_factory=deque)
    nl_cls: Optional[torch.Tensor] = None
    clue: Optional[torch.Tensor] = None  # cache, recomputed whenever entries change

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        self.entries = deque(self.entries, maxlen=self.capacity)

    def __len__(self):
        return len(self.entries)

    def push(self, patch: torch.Tensor, nl_cls: Optional[torch.Tensor] = None) -> None:
        self.entries.append(patch)
        if nl_cls is not None:
            self.nl_cls = nl_cls
        self.clue = None

    def stacked(self) -> torch.Tensor:
        """[1, n * r*r, C] in oldest-to-newest order."""
        return torch.cat(list(self.entries), dim=0)[None]


def update_memory(memory: TemporalMemory, h_t: EmbeddingSeq, box: torch.Tensor, r: int,
                  nl_cls: Optional[torch.Tensor] = None, degenerate: bool = False) -> TemporalMemory:
    """Push the RoI-pooled patch at ``box``; degenerate boxes leave memory untouched."""
    box = torch.as_tensor(box, dtype=h_t.vectors.dtype).reshape(1, 4)
    if degenerate or bool(box[0, 2] <= box[0, 0]) or bool(box[0, 3] <= box[0, 1]):
        logger.info("memory update skipped: degenerate box %s", box.tolist())
        return memory
    patch = roi_pool(h_t, box, r)[0]
    memory.push(patch, None if nl_cls is None else nl_cls.reshape(-1))
    return memory


class TemporalModule(nn.Module):
    """Encoder over [NL CLS, historical patches] and a learned temporal query decoder."""

    def __init__(self, dim: int, n_heads: int, roi_size: int = 6, capacity: int = 3,
                 n_enc_layers: int = 2, n_dec_layers: int = 2, use_nl_cls: bool = True,
                 ffn_ratio: int = 4):
        super().__init__()
        self.roi_size = roi_size
        self.capacity = capacity
        self.use_nl_cls = use_nl_cls
        self.pos = nn.Parameter(torch.zeros(1 + capacity * roi_size * roi_size, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.encoder = TransformerEncoder(dim, n_heads, n_enc_layers, ffn_ratio)
        self.temporal_query = nn.Parameter(torch.zeros(dim))
        nn.init.trunc_normal_(self.temporal_query, std=0.02)
        self.decoder = TransformerDecoder(dim, n_heads, n_dec_layers, ffn_ratio)

    def encode(self, patches: torch.Tensor, nl_cls: Optional[torch.Tensor]) -> torch.Tensor:
        """patches: [B, n*r*r, C]; returns [B, 1 + n*r*r, C] (or without the CLS slot)."""
        n = patches.shape[1]
        if n == 0:
            raise ShapeError("temporal_encode on empty memory")
        if n > self.pos.shape[0] - 1:
            raise ShapeError(f"{n} patch tokens exceed memory capacity")
        x = patches + self.pos[1:1 + n]
        if nl_cls is not None:
            x = torch.cat([(nl_cls + self.pos[0])[:, None], x], dim=1)
        return self.encoder(x)

    def decode(self, enhanced: torch.Tensor) -> torch.Tensor:
        q = self.temporal_query.expand(enhanced.shape[0], 1, -1)
        return self.decoder(q, enhanced)[:, 0]

    def forward(self, patches: torch.Tensor, nl_cls: Optional[torch.Tensor]) -> torch.Tensor:
        return self.decode(self.encode(patches, nl_cls if self.use_nl_cls else None))

    def clue_for(self, memory: TemporalMemory) -> torch.Tensor:
        """Temporal clue for one sequence; the zero vector while memory is empty."""
        dim = self.temporal_query.shape[0]
        if not len(memory):
            return torch.zeros(1, dim, dtype=self.temporal_query.dtype)
        if memory.clue is None:
            cls = memory.nl_cls[None] if memory.nl_cls is not None else None
            memory.clue = self(memory.stacked(), cls)
        return memory.clue


def temporal_encode(module: TemporalModule, entries: torch.Tensor, nl_cls: Optional[torch.Tensor]):
    return module.encode(entries, nl_cls)


def temporal_decode(module: TemporalModule, enhanced: torch.Tensor) -> torch.Tensor:
    return module.decode(enhanced)
