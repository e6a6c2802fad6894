"""Grounding on the first frame, then frame-by-frame tracking."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np
import torch

from .boxes import BoxNorm
from .cropping import SEARCH_FACTOR, TEMPLATE_FACTOR, crop_search, crop_template
from .encoders import EmbeddingSeq
from .model import JointModel
from .sgtm import TemporalMemory, update_memory
from .synthworld import TokenSequence

logger = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


class Prediction(NamedTuple):
    box: BoxNorm
    degenerate: bool


@dataclass
class TrackerState:
    template_emb: EmbeddingSeq
    memory: TemporalMemory
    last_box: BoxNorm
    lang_tokens: TokenSequence
    frame_index: int
    lang_emb: Optional[EmbeddingSeq] = None  # cache of the projected language tokens


def _lang(model: JointModel, tokens: TokenSequence) -> EmbeddingSeq:
    ids = torch.as_tensor(tokens.ids, dtype=torch.long)[None]
    valid = torch.as_tensor(tokens.mask)[None]
    return model.encode_text(ids, valid)


def _image(frame, dtype) -> torch.Tensor:
    img = torch.as_tensor(np.asarray(frame), dtype=dtype)
    return img[None] if img.dim() == 3 else img


def _dtype(model: JointModel):
    return next(model.parameters()).dtype


@torch.no_grad()
def _ground_pass(model: JointModel, lang: EmbeddingSeq, frame):
    pred, rel = model.ground_forward(lang, _image(frame, _dtype(model)))
    raw = pred.boxes[0].double().numpy()
    return Prediction(BoxNorm.of(np.clip(raw, 0.0, 1.0)), bool(pred.degenerate[0])), rel


@torch.no_grad()
def ground(model: JointModel, tokens: TokenSequence, frame) -> Prediction:
    """Locate the described target in a single frame (frame-normalised box)."""
    model.eval()
    return _ground_pass(model, _lang(model, tokens), frame)[0]


@torch.no_grad()
def init_state(model: JointModel, tokens: TokenSequence, frame,
               box: Optional[BoxNorm] = None) -> TrackerState:
    """Language-only init grounds the target; language+box init uses ``box``.

    Either way the first frame's relation features seed the temporal memory.
    """
    model.eval()
    lang = _lang(model, tokens)
    pred, rel = _ground_pass(model, lang, frame)
    if box is None:
        if pred.degenerate:
            raise InitializationError("grounding produced a degenerate box and no box was given")
        box = pred.box
    box = BoxNorm.of(box).check()
    template_img, _ = crop_template(frame, box, TEMPLATE_FACTOR, model.config.template_size)
    template = model.encode_image(template_img[None].to(_dtype(model)))
    memory = TemporalMemory(model.config.memory_capacity)
    update_memory(memory, rel.h_t, torch.tensor(box), model.config.roi_size, rel.nl_cls)
    return TrackerState(template, memory, box, tokens, 0, lang)


@torch.no_grad()
def track_frame(model: JointModel, state: TrackerState, frame):
    """Track one frame; returns ``(Prediction, state)`` with ``state`` updated in place."""
    model.eval()
    search_img, params = crop_search(frame, state.last_box, SEARCH_FACTOR, model.config.search_size)
    clue = model.temporal.clue_for(state.memory) if model.has_temporal else None
    lang = state.lang_emb if state.lang_emb is not None else _lang(model, state.lang_tokens)
    pred, rel = model.track_forward(lang, state.template_emb, search_img[None].to(_dtype(model)), clue)
    crop_box = pred.boxes[0].double().numpy()
    frame_box = np.clip(params.map_box_to_frame(crop_box), 0.0, 1.0)
    box = BoxNorm.of(frame_box)
    degenerate = bool(pred.degenerate[0]) or box.width <= 0 or box.height <= 0
    state.frame_index += 1
    if degenerate:
        logger.info("frame %d: degenerate prediction, keeping last box", state.frame_index)
        return Prediction(state.last_box, True), state
    update_memory(state.memory, rel.h_t, torch.tensor(crop_box), model.config.roi_size,
                  rel.nl_cls if rel.h_l is not None else None)
    state.last_box = box
    return Prediction(box, False), state


def track_sequence(model: JointModel, tokens: TokenSequence, frames,
                   init_box: Optional[BoxNorm] = None) -> List[Prediction]:
    """Run a whole sequence; the first entry is the initial box."""
    state = init_state(model, tokens, frames[0], init_box)
    out = [Prediction(state.last_box, False)]
    for frame in frames[1:]:
        pred, state = track_frame(model, state, frame)
        out.append(pred)
    return out
