"""Success/precision plots, annotated frames and attention dumps (matplotlib, Agg)."""

from __future__ import annotations

from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .evalkit import PRECISION_AXIS_PX, REFERENCE_THRESHOLD_PX, THRESHOLDS, MetricsReport  # noqa: E402


def _save(fig, path: str) -> None:
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def plot_success(reports: Dict[str, MetricsReport], path: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for name, r in reports.items():
        ax.plot(THRESHOLDS, r.success_curve, label=f"{name} [{r.auc:.3f}]")
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel("success rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_precision(reports: Dict[str, MetricsReport], path: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for name, r in reports.items():
        if r.precision_curve:
            ax.plot(PRECISION_AXIS_PX, r.precision_curve, label=f"{name} [{r.precision:.3f}]")
    ax.axvline(REFERENCE_THRESHOLD_PX, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("centre error threshold (px @ 320)")
    ax.set_ylabel("precision")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def to_uint8(frame) -> np.ndarray:
    """[3, H, W] float in [0, 1] -> [H, W, 3] uint8."""
    arr = np.asarray(frame, dtype=np.float32)
    return (np.clip(arr.transpose(1, 2, 0), 0, 1) * 255 + 0.5).astype(np.uint8)


def annotate(frame, boxes: Sequence, colors=((255, 255, 0), (0, 255, 0)), scale: int = 4) -> Image.Image:
    """Upscaled frame with normalised boxes drawn on top (first colour for the first box)."""
    img = Image.fromarray(to_uint8(frame))
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for k, b in enumerate(boxes):
        if b is None:
            continue
        x1, y1, x2, y2 = (float(v) for v in b)
        draw.rectangle([x1 * img.width, y1 * img.height, x2 * img.width, y2 * img.height],
                       outline=colors[k % len(colors)], width=2)
    return img


@torch.no_grad()
def dump_attention(model, tokens, frame, prefix: str) -> Dict[str, np.ndarray]:
    """Save corner maps and relation-encoder attention of one grounding pass.

    Writes ``<prefix>.npz`` plus a corner-map figure ``<prefix>_corners.png``.
    """
    from .inference import _dtype, _image, _lang
    from .relation import Mode

    model.eval()
    lang = _lang(model, tokens)
    rel = model.relate(Mode.GROUNDING, lang, None, model.encode_image(_image(frame, _dtype(model))))
    pred = model.localize(Mode.GROUNDING, rel)
    relation = model.ground_relation if hasattr(model, "ground_relation") else model.relation
    out = {"corner_tl": pred.tl[0].float().numpy(), "corner_br": pred.br[0].float().numpy()}
    for k, w in enumerate(relation.encoder.last_attention):
        out[f"relation_attn_{k}"] = w[0].float().numpy()
    np.savez(prefix + ".npz", **out)

    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.7))
    axes[0].imshow(to_uint8(frame))
    axes[0].set_title("frame")
    axes[1].imshow(out["corner_tl"], cmap="viridis")
    axes[1].set_title("top-left")
    axes[2].imshow(out["corner_br"], cmap="viridis")
    axes[2].set_title("bottom-right")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, prefix + "_corners.png")
    return out
