"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .boxes import BoxNorm, DegenerateBoxError
from .synthworld import TokenSequence, tokenize


def check_frame(frame, patch_size: int = 8, size: int = None) -> np.ndarray:
    """Return ``frame`` as float32 [3, H, W] in [0, 1]; accepts HWC uint8 too."""
    arr = np.asarray(frame)
    if arr.ndim != 3:
        raise ValueError(f"expected a single image with 3 dims, got shape {arr.shape}")
    if arr.shape[0] != 3 and arr.shape[-1] == 3:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[0] != 3:
        raise ValueError(f"expected 3 colour channels, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("pixel values must be finite and within [0, 1]")
    h, w = arr.shape[1:]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    if size is not None and (h, w) != (size, size):
        raise ValueError(f"expected a {size}x{size} image, got {h}x{w}")
    return arr


def check_tokens(text_or_tokens) -> TokenSequence:
    if isinstance(text_or_tokens, TokenSequence):
        return text_or_tokens
    if isinstance(text_or_tokens, str):
        return tokenize(text_or_tokens)
    raise TypeError(f"expected text or TokenSequence, got {type(text_or_tokens).__name__}")


def check_box(box) -> BoxNorm:
    b = BoxNorm.of(box)
    if not b.is_valid():
        raise DegenerateBoxError(f"box {tuple(b)} is not a valid normalised box")
    return b
