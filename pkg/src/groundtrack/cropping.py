"""Square template/search crops and the affine maps between crop and frame."""

from __future__ import annotations

import math
from typing import NamedTuple, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import BoxNorm

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0


class CropParams(NamedTuple):
    """Square crop centred at (cx, cy) with side ``side``, all frame-normalised."""

    cx: float
    cy: float
    side: float
    out_size: int

    def map_box_to_crop(self, box) -> np.ndarray:
        b = np.asarray(box, dtype=np.float64)
        x0, y0 = self.cx - self.side / 2.0, self.cy - self.side / 2.0
        return (b - np.array([x0, y0, x0, y0])) / self.side

    def map_box_to_frame(self, box) -> np.ndarray:
        b = np.asarray(box, dtype=np.float64)
        x0, y0 = self.cx - self.side / 2.0, self.cy - self.side / 2.0
        return b * self.side + np.array([x0, y0, x0, y0])


def crop_params(box, factor: float, out_size: int) -> CropParams:
    b = BoxNorm.of(box).check()
    side = min(factor * math.sqrt(b.width * b.height), 1.0)
    cx, cy = b.center
    return CropParams(cx, cy, side, out_size)


def crop_images(frames: torch.Tensor, params, out_size: int) -> torch.Tensor:
    """Bilinear square crops of a batch; the region outside the frame is zero.

    frames: [B, 3, H, W]; params: sequence of :class:`CropParams` or a
    [B, 3] tensor of (cx, cy, side).
    """
    if not torch.is_tensor(params):
        params = torch.tensor([[p.cx, p.cy, p.side] for p in params], dtype=torch.float64)
    params = params.to(torch.float64)
    t = (torch.arange(out_size, dtype=torch.float64) + 0.5) / out_size
    x0 = params[:, 0:1] - params[:, 2:3] / 2
    y0 = params[:, 1:2] - params[:, 2:3] / 2
    u = x0 + t * params[:, 2:3]  # [B, out]
    v = y0 + t * params[:, 2:3]
    b = frames.shape[0]
    grid = torch.stack([
        (2 * u - 1)[:, None, :].expand(b, out_size, out_size),
        (2 * v - 1)[:, :, None].expand(b, out_size, out_size),
    ], dim=-1).to(frames.dtype)
    return F.grid_sample(frames, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _crop_one(frame, box, factor, out) -> Tuple[torch.Tensor, CropParams]:
    p = crop_params(box, factor, out)
    img = torch.as_tensor(np.asarray(frame), dtype=torch.float32)
    return crop_images(img[None], [p], out)[0], p


def crop_template(frame, box, context_factor: float = TEMPLATE_FACTOR, out: int = 32):
    """Template crop of side ``context_factor * sqrt(w*h)`` around the box centre."""
    return _crop_one(frame, box, context_factor, out)


def crop_search(frame, prev_box, search_factor: float = SEARCH_FACTOR, out: int = 80):
    """Search region around the previous box, same geometry as the template crop."""
    return _crop_one(frame, prev_box, search_factor, out)
