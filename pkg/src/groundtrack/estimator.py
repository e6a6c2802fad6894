"""scikit-learn style front end for the joint grounding/tracking model."""

from __future__ import annotations

import logging
from dataclasses import fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from ._validation import check_box, check_frame, check_tokens
from .boxes import giou_tensor
from .evalkit import MetricsReport, Protocol, evaluate
from .inference import ground, track_sequence
from .model import JointModel, ModelConfig
from .synthworld import MAX_TOKENS, SequenceSample, tokenize
from .training import EpisodeSource, LogRecord, TrainConfig, TrainPair, collate, fit, forward_losses

logger = logging.getLogger(__name__)

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class DescriptionTokenizer(TransformerMixin, BaseEstimator):
    """Maps descriptions to fixed-length token ids and validity masks.

    ``transform`` returns an int64 array [n, 2, max_len]: row 0 holds the
    ids, row 1 the mask (1 = valid token).
    """

    def __init__(self, max_len: int = MAX_TOKENS):
        self.max_len = max_len

    def fit(self, X, y=None):
        # stateless: the vocabulary is closed
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        out = np.empty((len(X), 2, self.max_len), dtype=np.int64)
        for k, text in enumerate(X):
            if not isinstance(text, str):
                raise TypeError(f"expected str, got {type(text).__name__}")
            tok = tokenize(text, self.max_len)
            out[k, 0], out[k, 1] = tok.ids, tok.mask
        return out


class JointGroundingTracker(BaseEstimator):
    """Grounds a described target in the first frame and tracks it afterwards.

    Parameters
    ----------
    flavor : {"full", "msrm-tm", "msrm-tdec", "msrm", "seprm"}
        Architecture variant.
    model_params : dict, optional
        Overrides for any other :class:`ModelConfig` field.
    steps, batch_size, lr, encoder_lr_ratio :
        Optimisation settings; see :class:`TrainConfig`.
    train_params : dict, optional
        Overrides for the remaining :class:`TrainConfig` fields.
    random_state : int
        Seeds weight init and pair sampling.
    callback : callable, optional
        Receives each :class:`LogRecord` during ``fit``.
    """

    def __init__(self, flavor: str = "full", model_params: Optional[dict] = None,
                 steps: int = 8000, batch_size: int = 16, lr: float = 1e-3,
                 encoder_lr_ratio: float = 0.1, train_params: Optional[dict] = None,
                 random_state: int = 0, callback: Optional[Callable[[LogRecord], None]] = None):
        self.flavor = flavor
        self.model_params = model_params
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.encoder_lr_ratio = encoder_lr_ratio
        self.train_params = train_params
        self.random_state = random_state
        self.callback = callback

    # -- configuration ---------------------------------------------------
    def model_config(self) -> ModelConfig:
        extra = dict(self.model_params or {})
        bad = set(extra) - _MODEL_KEYS
        if bad:
            raise ValueError(f"unknown model_params {sorted(bad)}")
        extra["flavor"] = self.flavor
        return ModelConfig(**extra).validate()

    def train_config(self) -> TrainConfig:
        extra = dict(self.train_params or {})
        bad = set(extra) - _TRAIN_KEYS
        if bad:
            raise ValueError(f"unknown train_params {sorted(bad)}")
        extra.update(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                     encoder_lr_ratio=self.encoder_lr_ratio, seed=self.random_state)
        return TrainConfig(**extra)

    def _init_model(self) -> JointModel:
        torch.manual_seed(self.random_state)
        return JointModel(self.model_config())

    # -- estimator API ---------------------------------------------------
    def fit(self, X, y=None, pairs: Optional[Sequence[TrainPair]] = None):
        """Train on episodes ``X`` (samples, worlds or an :class:`EpisodeSource`).

        With ``pairs`` given, ``X`` is ignored and every step reuses that fixed
        batch.
        """
        cfg = self.train_config()
        model = self._init_model()
        if pairs is not None:
            self.history_ = fit(model, cfg, pairs=list(pairs), callback=self.callback)
        else:
            source = X if isinstance(X, EpisodeSource) else EpisodeSource(list(X))
            if not len(source):
                raise ValueError("no training episodes")
            self.history_ = fit(model, cfg, source=source, callback=self.callback)
        self.model_ = model.eval()
        self.n_parameters_ = model.n_parameters()
        return self

    def predict(self, X) -> np.ndarray:
        """Ground each ``(frame, text)`` pair; returns [n, 4] normalised boxes."""
        check_is_fitted(self, "model_")
        ps = self.model_.config.patch_size
        out = [tuple(ground(self.model_, check_tokens(text), check_frame(frame, ps)).box)
               for frame, text in X]
        return np.asarray(out, dtype=np.float64).reshape(-1, 4)

    def track(self, frames, text, init_box=None):
        """Track through ``frames``; returns (boxes [T, 4], degenerate flags [T])."""
        check_is_fitted(self, "model_")
        ps = self.model_.config.patch_size
        frames = [check_frame(f, ps) for f in frames]
        init = check_box(init_box) if init_box is not None else None
        preds = track_sequence(self.model_, check_tokens(text), frames, init)
        return (np.asarray([tuple(p.box) for p in preds], dtype=np.float64),
                np.asarray([p.degenerate for p in preds], dtype=bool))

    def evaluate(self, X: Sequence[SequenceSample], protocol="nl_only",
                 config_hash: str = "") -> MetricsReport:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, X, Protocol(protocol), config_hash)

    def score(self, X, y=None) -> float:
        """Tracking success AUC under the language-only protocol."""
        return self.evaluate(X, Protocol.NL_ONLY).auc

    @torch.no_grad()
    def pair_metrics(self, pairs: Sequence[TrainPair]) -> dict:
        """Losses and mean IoUs of both training steps on fixed pairs (eval mode)."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        cfg = self.train_config()
        batch = collate(list(pairs))
        lg, lt, gp, tp = forward_losses(self.model_, batch, cfg)
        _, giou_g = giou_tensor(gp.boxes, batch.ground_gt)
        _, giou_t = giou_tensor(tp.boxes, batch.search_gt)
        return {"ground_loss": float(lg), "track_loss": float(lt), "total": float(lg + lt),
                "ground_iou": giou_g.numpy(), "track_iou": giou_t.numpy()}

    # -- persistence -----------------------------------------------------
    def save(self, path: str, run_config: Optional[dict] = None) -> None:
        check_is_fitted(self, "model_")
        cfg = {"model": self.model_.config.to_dict(), "run": run_config or {},
               "n_parameters": self.n_parameters_}
        checkpoint.save_checkpoint(path, self.model_.state_dict(), cfg)

    @classmethod
    def load(cls, path: str) -> "JointGroundingTracker":
        tensors, cfg = checkpoint.load_checkpoint(path)
        mcfg = ModelConfig.from_dict(cfg["model"])
        est = cls(flavor=mcfg.flavor,
                  model_params={k: v for k, v in cfg["model"].items() if k != "flavor"})
        model = JointModel(mcfg)
        try:
            model.load_state_dict(tensors)
        except RuntimeError as e:
            raise checkpoint.CheckpointError(f"checkpoint does not match its config: {e}") from None
        est.model_ = model.eval()
        est.n_parameters_ = model.n_parameters()
        est.checkpoint_config_ = cfg
        return est
