"""Normalised boxes, overlap measures and the box regression loss."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch


class DegenerateBoxError(ValueError):
    pass


class BoxNorm(NamedTuple):
    """Axis-aligned box in normalised image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self):
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def is_valid(self) -> bool:
        return (0.0 <= self.x1 < self.x2 <= 1.0) and (0.0 <= self.y1 < self.y2 <= 1.0)

    def check(self) -> "BoxNorm":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DegenerateBoxError(f"degenerate box {tuple(self)}")
        return self

    @classmethod
    def of(cls, box) -> "BoxNorm":
        if isinstance(box, cls):
            return box
        return cls(*(float(v) for v in np.asarray(box, dtype=np.float64).reshape(4)))


def iou(a, b) -> float:
    a, b = BoxNorm.of(a).check(), BoxNorm.of(b).check()
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def giou(a, b) -> float:
    a, b = BoxNorm.of(a).check(), BoxNorm.of(b).check()
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (hull - union) / hull


def giou_tensor(pred: torch.Tensor, gt: torch.Tensor):
    """Batched (giou, iou) for [..., 4] boxes; differentiable in ``pred``."""
    area_p = (pred[..., 2] - pred[..., 0]) * (pred[..., 3] - pred[..., 1])
    area_g = (gt[..., 2] - gt[..., 0]) * (gt[..., 3] - gt[..., 1])
    lt = torch.maximum(pred[..., :2], gt[..., :2])
    rb = torch.minimum(pred[..., 2:], gt[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_p + area_g - inter
    iou_ = inter / union
    lt_c = torch.minimum(pred[..., :2], gt[..., :2])
    rb_c = torch.maximum(pred[..., 2:], gt[..., 2:])
    wh_c = rb_c - lt_c
    hull = wh_c[..., 0] * wh_c[..., 1]
    return iou_ - (hull - union) / hull, iou_


def box_loss(pred: torch.Tensor, gt: torch.Tensor, w_giou: float = 2.0, w_l1: float = 5.0) -> torch.Tensor:
    """Per-box ``w_giou * (1 - GIoU) + w_l1 * mean |pred - gt|``."""
    g, _ = giou_tensor(pred, gt)
    return w_giou * (1.0 - g) + w_l1 * (pred - gt).abs().mean(-1)


def loss(pred, gt, w_giou: float = 2.0, w_l1: float = 5.0) -> float:
    """Scalar loss for a single pair of :class:`BoxNorm`."""
    p = torch.tensor(BoxNorm.of(pred).check(), dtype=torch.float64)
    g = torch.tensor(BoxNorm.of(gt).check(), dtype=torch.float64)
    return float(box_loss(p, g, w_giou, w_l1))


def clip_box(box: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(box, dtype=np.float64), 0.0, 1.0)
