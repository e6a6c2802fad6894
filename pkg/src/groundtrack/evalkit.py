"""One-pass evaluation: success curve/AUC, centre-error precision, grounding accuracy."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import BoxNorm, iou

logger = logging.getLogger(__name__)

N_THRESHOLDS = 21
THRESHOLDS = np.arange(N_THRESHOLDS) / 20.0  # exact j/20
REFERENCE_PX = 320.0
REFERENCE_THRESHOLD_PX = 20.0
PRECISION_AXIS_PX = np.arange(51, dtype=np.float64)  # reference-resolution pixels


class Protocol(str, enum.Enum):
    NL_ONLY = "nl_only"
    NL_BB = "nl_bb"


def success_curve(ious: Sequence[float]) -> np.ndarray:
    """Fraction of frames with IoU strictly above each threshold j/20, j = 0..20."""
    v = np.asarray(ious, dtype=np.float64)
    if v.size == 0:
        raise ValueError("success_curve of an empty sequence")
    if np.any(v < 0) or np.any(v > 1) or np.any(np.isnan(v)):
        raise ValueError("IoUs must lie in [0, 1]")
    return (v[None, :] > THRESHOLDS[:, None]).mean(axis=1)


def auc(ious: Sequence[float]) -> float:
    return float(success_curve(ious).mean())


def scaled_threshold(frame_px: int, threshold_px: float = REFERENCE_THRESHOLD_PX) -> float:
    """Centre-error threshold rescaled from the 320 px reference resolution."""
    return threshold_px * frame_px / REFERENCE_PX


def center_errors(pred_boxes, gt_boxes, frame_px: int) -> np.ndarray:
    p = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(p) != len(g):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} ground truths")
    pc = (p[:, :2] + p[:, 2:]) / 2.0
    gc = (g[:, :2] + g[:, 2:]) / 2.0
    return np.hypot(pc[:, 0] - gc[:, 0], pc[:, 1] - gc[:, 1]) * frame_px


def precision(pred_boxes, gt_boxes, threshold_px: float, frame_px: int) -> float:
    """Fraction of frames whose centre error is <= ``threshold_px`` (in pixels).

    ``threshold_px`` is used as given; see :func:`scaled_threshold` for the
    reference-resolution rescaling.
    """
    err = center_errors(pred_boxes, gt_boxes, frame_px)
    if err.size == 0:
        raise ValueError("precision of an empty sequence")
    return float(np.mean(err <= threshold_px))


def grounding_accuracy(preds, gts) -> float:
    """Top-1 accuracy: a prediction counts when IoU > 0.5 (strict)."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} vs {len(gts)}")
    if not preds:
        raise ValueError("grounding_accuracy of an empty list")
    return float(np.mean([iou(p, g) > 0.5 for p, g in zip(preds, gts)]))


def frame_ious(pred_boxes, gt_boxes, out_of_view=None) -> np.ndarray:
    out = []
    for k, (p, g) in enumerate(zip(pred_boxes, gt_boxes)):
        if out_of_view is not None and out_of_view[k]:
            out.append(0.0)
            continue
        try:
            out.append(iou(p, g))
        except ValueError:
            out.append(0.0)
    return np.asarray(out, dtype=np.float64)


@dataclass
class SequenceResult:
    sequence_id: str
    auc: float
    precision: float


@dataclass
class MetricsReport:
    auc: float
    precision: float
    success_curve: List[float]
    grounding_acc: float
    per_sequence: List[SequenceResult]
    protocol: str
    failures: List[Tuple[str, str]] = field(default_factory=list)
    config_hash: str = ""
    n_parameters: int = 0
    precision_curve: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.check()

    def check(self) -> "MetricsReport":
        if len(self.success_curve) != N_THRESHOLDS:
            raise ValueError("success curve must have 21 entries")
        if not math.isclose(self.auc, float(np.mean(self.success_curve)), abs_tol=1e-12):
            raise ValueError("auc must equal the mean of the success curve")
        for v in (self.auc, self.precision, self.grounding_acc, *self.success_curve,
                  *self.precision_curve):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {v} outside [0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_sequence"] = [asdict(s) for s in self.per_sequence]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_records(self) -> str:
        """Line-record text form: one ``key value`` pair per line."""
        lines = [
            f"protocol {self.protocol}",
            f"config_hash {self.config_hash}",
            f"n_parameters {self.n_parameters}",
            f"auc {self.auc!r}",
            f"precision {self.precision!r}",
            f"grounding_acc {self.grounding_acc!r}",
            "success_curve " + " ".join(repr(float(v)) for v in self.success_curve),
        ]
        if self.precision_curve:
            lines.append("precision_curve " + " ".join(repr(float(v)) for v in self.precision_curve))
        lines += [f"sequence {s.sequence_id} {s.auc!r} {s.precision!r}" for s in self.per_sequence]
        lines += [f"failure {sid} {reason}" for sid, reason in self.failures]
        return "\n".join(lines) + "\n"


def aggregate(per_sequence_ious: Sequence[np.ndarray], per_sequence_prec: Sequence[float],
              ids: Sequence[str], grounding_hits: Sequence[bool], protocol: str,
              failures=(), config_hash: str = "", n_parameters: int = 0,
              per_sequence_errors: Optional[Sequence[np.ndarray]] = None) -> MetricsReport:
    """Average per-sequence success curves (OTB/LaSOT convention) into a report.

    ``per_sequence_errors`` holds centre errors in reference-resolution pixels;
    when given, the report also carries a precision curve over 0..50 px.
    """
    if not per_sequence_ious:
        raise ValueError("no sequences evaluated")
    pcurve = []
    if per_sequence_errors is not None:
        pcurve = np.mean([(e[None, :] <= PRECISION_AXIS_PX[:, None]).mean(axis=1)
                          for e in per_sequence_errors], axis=0).tolist()
    curves = np.stack([success_curve(v) for v in per_sequence_ious])
    curve = curves.mean(axis=0)
    seqs = [SequenceResult(sid, float(c.mean()), float(p))
            for sid, c, p in zip(ids, curves, per_sequence_prec)]
    return MetricsReport(
        auc=float(curve.mean()),
        precision=float(np.mean(per_sequence_prec)),
        success_curve=[float(v) for v in curve],
        grounding_acc=float(np.mean(grounding_hits)) if len(grounding_hits) else 0.0,
        per_sequence=seqs,
        protocol=Protocol(protocol).value,
        failures=list(failures),
        config_hash=config_hash,
        n_parameters=n_parameters,
        precision_curve=pcurve,
    )


TrackerFn = Callable[[object, Protocol], Tuple[BoxNorm, List[BoxNorm]]]


def evaluate_tracker(tracker: TrackerFn, samples, protocol, frame_px: Optional[int] = None,
                     config_hash: str = "", n_parameters: int = 0) -> MetricsReport:
    """Evaluate any tracker callable ``tracker(sample, protocol) -> (ground_box, boxes)``.

    ``boxes`` covers every frame including the first. A sequence that raises
    is recorded in ``failures`` and scored as zero on every frame.
    """
    protocol = Protocol(protocol)
    ious, precs, errs, ids, hits, failures = [], [], [], [], [], []
    for k, s in enumerate(samples):
        sid = f"{k:05d}-seed{s.seed}"
        px = frame_px or s.frames.shape[-1]
        try:
            ground_box, boxes = tracker(s, protocol)
        except Exception as e:  # noqa: BLE001 - evaluation keeps going
            logger.warning("sequence %s failed: %s", sid, e)
            failures.append((sid, f"{type(e).__name__}: {e}".replace("\n", " ")))
            # a tracker that produced nothing scores zero on every frame
            n = len(s.gt_boxes)
            ious.append(np.zeros(n))
            precs.append(0.0)
            errs.append(np.full(n, np.inf))
            ids.append(sid)
            hits.append(False)
            continue
        ious.append(frame_ious(boxes, s.gt_boxes, s.out_of_view))
        precs.append(precision(boxes, s.gt_boxes, scaled_threshold(px), px))
        errs.append(center_errors(boxes, s.gt_boxes, px) * (REFERENCE_PX / px))
        ids.append(sid)
        hits.append(iou(ground_box, s.gt_boxes[0]) > 0.5)
    return aggregate(ious, precs, ids, hits, protocol.value, failures, config_hash, n_parameters,
                     per_sequence_errors=errs)


def oracle_tracker(sample, protocol) -> Tuple[BoxNorm, List[BoxNorm]]:
    """Feeds back ground truth; the upper bound of every metric."""
    boxes = [BoxNorm.of(b) for b in sample.gt_boxes]
    return boxes[0], boxes


def model_tracker(model) -> TrackerFn:
    from .inference import ground, track_sequence

    def run(sample, protocol):
        g = ground(model, sample.tokens, sample.frames[0]).box
        init = BoxNorm.of(sample.gt_boxes[0]) if protocol is Protocol.NL_BB else None
        preds = track_sequence(model, sample.tokens, sample.frames, init)
        return g, [p.box for p in preds]

    return run


def evaluate(model, samples, protocol, config_hash: str = "") -> MetricsReport:
    """Run the tracker over ``samples`` under ``protocol`` and aggregate."""
    return evaluate_tracker(model_tracker(model), samples, protocol,
                            config_hash=config_hash, n_parameters=model.n_parameters())
