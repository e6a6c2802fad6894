"""Two-step (grounding then tracking) end-to-end training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

from .boxes import BoxNorm, box_loss
from .cropping import CropParams, crop_images, crop_params
from .model import JointModel
from .sgtm import roi_pool
from .synthworld import SequenceSample, World, WorldConfig, build_world, tokenize

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, losses: dict, dump: dict):
        super().__init__(f"non-finite loss at step {step}: {losses}")
        self.step = step
        self.losses = losses
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 8000
    batch_size: int = 16
    lr: float = 1e-3
    encoder_lr_ratio: float = 0.1
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    decay_at: tuple = (2 / 3, 5 / 6)
    grad_clip: float = 1.0
    w_giou: float = 2.0
    w_l1: float = 5.0
    template_factor: float = 2.0
    search_factor: float = 4.0
    center_jitter: float = 0.3
    scale_jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_at", tuple(self.decay_at))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_at"] = list(self.decay_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class EpisodeSource:
    """Random access to episodes, rendering only the frames a pair needs.

    Built either from in-memory :class:`SequenceSample` objects or lazily
    from a world config and a list of seeds.
    """

    def __init__(self, episodes: Sequence[Union[SequenceSample, World]]):
        self.episodes = list(episodes)
        self._tokens = [e.tokens if isinstance(e, SequenceSample) else tokenize(e.description)
                        for e in self.episodes]
        self._boxes = [e.gt_boxes for e in self.episodes]

    @classmethod
    def from_config(cls, config: WorldConfig, seeds: Iterable[int]) -> "EpisodeSource":
        return cls([build_world(config, s) for s in seeds])

    def __len__(self):
        return len(self.episodes)

    def tokens(self, i: int):
        return self._tokens[i]

    def gt_boxes(self, i: int) -> np.ndarray:
        return self._boxes[i]

    def frames(self, i: int, ts: Sequence[int]) -> np.ndarray:
        e = self.episodes[i]
        if isinstance(e, SequenceSample):
            return np.asarray(e.frames[list(ts)], dtype=np.float32)
        return e.render(ts)


class TrainPair(NamedTuple):
    ids: np.ndarray
    valid: np.ndarray
    ground_frame: np.ndarray  # [3, H, W]
    ground_gt: np.ndarray  # [4] frame-normalised
    track_frame: np.ndarray  # [3, H, W], uncropped
    search: CropParams
    search_gt: np.ndarray  # [4] in search-crop coordinates


def jitter_box(box: np.ndarray, rng: np.random.Generator, center: float, scale: float) -> np.ndarray:
    b = BoxNorm.of(box)
    side = math.sqrt(b.area)
    cx, cy = b.center
    cx += rng.uniform(-center, center) * side
    cy += rng.uniform(-center, center) * side
    w = b.width * math.exp(rng.uniform(-scale, scale))
    h = b.height * math.exp(rng.uniform(-scale, scale))
    out = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    return np.clip(out, 0.0, 1.0)


def make_pair(source: EpisodeSource, i: int, rng: np.random.Generator, cfg: TrainConfig,
              search_size: int = 80) -> TrainPair:
    boxes = source.gt_boxes(i)
    T = len(boxes)
    g = int(rng.integers(0, max(T - 1, 1)))
    t = int(rng.integers(g + 1, T)) if T > 1 else 0
    prev = jitter_box(boxes[max(t - 1, 0)], rng, cfg.center_jitter, cfg.scale_jitter)
    search = crop_params(prev, cfg.search_factor, search_size)
    frames = source.frames(i, [g, t])
    tok = source.tokens(i)
    return TrainPair(tok.ids, tok.mask, frames[0], boxes[g].copy(), frames[1], search,
                     search.map_box_to_crop(boxes[t]))


@dataclass
class Batch:
    ids: torch.Tensor
    valid: torch.Tensor
    ground_frames: torch.Tensor
    ground_gt: torch.Tensor
    search_images: torch.Tensor
    search_gt: torch.Tensor

    def __len__(self):
        return self.ids.shape[0]


def collate(pairs: Sequence[TrainPair], dtype=torch.float32) -> Batch:
    track = torch.as_tensor(np.stack([p.track_frame for p in pairs]), dtype=dtype)
    search_size = pairs[0].search.out_size
    with torch.no_grad():
        search = crop_images(track, [p.search for p in pairs], search_size)
    return Batch(
        ids=torch.as_tensor(np.stack([p.ids for p in pairs]), dtype=torch.long),
        valid=torch.as_tensor(np.stack([p.valid for p in pairs])),
        ground_frames=torch.as_tensor(np.stack([p.ground_frame for p in pairs]), dtype=dtype),
        ground_gt=torch.as_tensor(np.stack([p.ground_gt for p in pairs]), dtype=dtype),
        search_images=search,
        search_gt=torch.as_tensor(np.stack([p.search_gt for p in pairs]), dtype=dtype),
    )


class StepLosses(NamedTuple):
    ground: float
    track: float
    total: float


def lr_factor(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up, then a 10x drop at each ``decay_at`` fraction of training."""
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return (step + 1) / warm
    return 0.1 ** sum(step >= int(round(f * cfg.steps)) for f in cfg.decay_at)


def make_optimizer(model: JointModel, cfg: TrainConfig):
    groups = [
        {"params": list(model.encoder_parameters()), "lr": cfg.lr * cfg.encoder_lr_ratio},
        {"params": model.other_parameters(), "lr": cfg.lr},
    ]
    opt = torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, cfg))
    return opt, sched


def forward_losses(model: JointModel, batch: Batch, cfg: TrainConfig):
    """Grounding step, template crop from the (detached) grounding box, tracking step."""
    lang = model.encode_text(batch.ids, batch.valid)
    gpred, grel = model.ground_forward(lang, batch.ground_frames)
    loss_g = box_loss(gpred.boxes, batch.ground_gt, cfg.w_giou, cfg.w_l1).mean()

    with torch.no_grad():
        seed_boxes = gpred.boxes.detach().clone()
        bad = gpred.degenerate
        seed_boxes[bad] = batch.ground_gt[bad]
        # non-finite seeds would break the crops; the loss check in train_step reports them
        broken = ~torch.isfinite(seed_boxes).all(1)
        seed_boxes[broken] = seed_boxes.new_tensor([0.0, 0.0, 1.0, 1.0])
        side = (cfg.template_factor * ((seed_boxes[:, 2] - seed_boxes[:, 0])
                                       * (seed_boxes[:, 3] - seed_boxes[:, 1])).sqrt()).clamp(max=1.0)
        params = torch.stack([(seed_boxes[:, 0] + seed_boxes[:, 2]) / 2,
                              (seed_boxes[:, 1] + seed_boxes[:, 3]) / 2, side], dim=1)
        templates = crop_images(batch.ground_frames, params, model.config.template_size)
    template = model.encode_image(templates)
    clue = None
    if model.has_temporal:
        patches = roi_pool(grel.h_t, seed_boxes, model.config.roi_size)
        clue = model.temporal_clue(patches, grel.nl_cls)
    tpred, _ = model.track_forward(lang, template, batch.search_images, clue)
    loss_t = box_loss(tpred.boxes, batch.search_gt, cfg.w_giou, cfg.w_l1).mean()
    return loss_g, loss_t, gpred, tpred


def train_step(model: JointModel, optimizer, batch: Batch, cfg: TrainConfig,
               scheduler=None, step: int = 0) -> StepLosses:
    model.train()
    loss_g, loss_t, _, _ = forward_losses(model, batch, cfg)
    total = loss_g + loss_t
    if not torch.isfinite(total):
        losses = {"ground": loss_g.item(), "track": loss_t.item()}
        dump = {"ids": batch.ids, "ground_gt": batch.ground_gt, "search_gt": batch.search_gt}
        raise NonFiniteLossError(step, losses, dump)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return StepLosses(loss_g.item(), loss_t.item(), total.item())


class LogRecord(NamedTuple):
    step: int
    ground_loss: float
    track_loss: float
    total: float
    lr: float


def fit(model: JointModel, cfg: TrainConfig, source: Optional[EpisodeSource] = None,
        pairs: Optional[Sequence[TrainPair]] = None,
        callback: Optional[Callable[[LogRecord], None]] = None) -> List[LogRecord]:
    """Train ``model`` in place.

    With ``pairs`` every step uses that fixed batch (overfitting runs);
    otherwise each step draws ``batch_size`` fresh pairs from ``source``.
    """
    if (source is None) == (pairs is None):
        raise ValueError("pass exactly one of source or pairs")
    rng = np.random.default_rng(cfg.seed)
    opt, sched = make_optimizer(model, cfg)
    fixed = collate(pairs) if pairs is not None else None
    history = []
    for step in range(cfg.steps):
        if fixed is not None:
            batch = fixed
        else:
            idx = rng.integers(0, len(source), size=cfg.batch_size)
            batch = collate([make_pair(source, int(i), rng, cfg, model.config.search_size)
                             for i in idx])
        lr = opt.param_groups[1]["lr"]
        losses = train_step(model, opt, batch, cfg, sched, step)
        rec = LogRecord(step, losses.ground, losses.track, losses.total, lr)
        history.append(rec)
        if callback is not None:
            callback(rec)
    return history
