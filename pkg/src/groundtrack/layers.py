"""Attention primitives shared by every transformer block in the model."""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    pass


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
           key_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention.

    q: [..., Lq, D], k/v: [..., Lk, D]; ``key_mask`` [B, Lk] with True meaning
    the key is ignored. Masked keys receive exactly zero weight.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        m = key_mask.reshape(key_mask.shape[0], *([1] * (scores.dim() - 2)), key_mask.shape[-1])
        scores = scores.masked_fill(m, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ShapeError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, query, key, value, key_mask=None):
        """Returns (output [B, Lq, D], weights [B, H, Lq, Lk]).

        Training forwards with autograd on use the fused kernel and return
        ``None`` for the weights.
        """
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        if self.training and torch.is_grad_enabled():
            keep = None if key_mask is None else ~key_mask[:, None, None, :]
            ctx, w = F.scaled_dot_product_attention(q, k, v, attn_mask=keep), None
        else:
            ctx, w = attend(q, k, v, key_mask)
        b, h, n, dh = ctx.shape
        ctx = ctx.transpose(1, 2).reshape(b, n, h * dh)
        return self.out_proj(ctx), w


def _ffn(dim: int, ratio: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, n_heads: int, ffn_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = _ffn(dim, ffn_ratio)

    def forward(self, x, key_mask=None):
        h = self.norm1(x)
        a, w = self.attn(h, h, h, key_mask)
        x = x + a
        return x + self.ffn(self.norm2(x)), w


class DecoderLayer(nn.Module):
    """Cross-attention of a short query sequence over a memory, then an FFN.

    Self-attention is omitted: every decoder in this package runs a single
    query, for which it is degenerate.
    """

    def __init__(self, dim: int, n_heads: int, ffn_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = _ffn(dim, ffn_ratio)

    def forward(self, q, memory, key_mask=None):
        a, w = self.cross(self.norm1(q), memory, memory, key_mask)
        q = q + a
        return q + self.ffn(self.norm2(q)), w


class TransformerEncoder(nn.Module):
    """Stack of :class:`EncoderLayer`. With zero layers it is the identity."""

    def __init__(self, dim: int, n_heads: int, n_layers: int, ffn_ratio: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(dim, n_heads, ffn_ratio) for _ in range(n_layers))
        self.norm = nn.LayerNorm(dim) if n_layers else nn.Identity()
        self.last_attention: List[torch.Tensor] = []

    def forward(self, x, key_mask=None):
        self.last_attention = []
        for layer in self.layers:
            x, w = layer(x, key_mask)
            if w is not None:
                self.last_attention.append(w.detach())
        return self.norm(x)


class TransformerDecoder(nn.Module):
    def __init__(self, dim: int, n_heads: int, n_layers: int, ffn_ratio: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(dim, n_heads, ffn_ratio) for _ in range(n_layers))
        self.norm = nn.LayerNorm(dim) if n_layers else nn.Identity()
        self.last_attention: List[torch.Tensor] = []

    def forward(self, q, memory, key_mask=None):
        self.last_attention = []
        for layer in self.layers:
            q, w = layer(q, memory, key_mask)
            if w is not None:
                self.last_attention.append(w.detach())
        return self.norm(q)
