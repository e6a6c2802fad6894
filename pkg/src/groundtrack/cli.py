"""``groundtrack`` command line: synth, train, eval, ground, track, ablate.

Every command exits nonzero on failure after printing a single line
``error: <kind>: <reason>`` to stderr, and every file it writes carries the
hash of the effective run configuration.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import checkpoint
from ._validation import check_box, check_frame, check_tokens
from .boxes import DegenerateBoxError
from .config import ConfigError, RunConfig
from .estimator import JointGroundingTracker
from .evalkit import MetricsReport, Protocol
from .inference import InitializationError, ground, track_sequence
from .synthworld import (DatasetFormatError, DatasetVersionError, SequenceSample, SequenceTooLongError,
                         UnknownWordError, generate_sequence, read_dataset, write_dataset)
from .training import EpisodeSource, NonFiniteLossError

logger = logging.getLogger("groundtrack")

CHECKPOINT_NAME = "model.ckpt"


class CommandError(Exception):
    def __init__(self, kind: str, reason: str):
        super().__init__(f"{kind}: {reason}")
        self.kind = kind
        self.reason = reason


# -- helpers ----------------------------------------------------------------

def _overrides(items: Optional[Sequence[str]]):
    out = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def load_run_config(path: Optional[str], sets: Optional[Sequence[str]] = None,
                    base: Optional[RunConfig] = None) -> RunConfig:
    if path is not None:
        if not os.path.isfile(path):
            raise CommandError("config", f"no such config file {path}")
        cfg = RunConfig.from_file(path)
    else:
        cfg = base or RunConfig()
    return cfg.with_overrides(_overrides(sets))


def _setup_runtime(cfg: RunConfig) -> None:
    torch.set_num_threads(cfg.threads())


def _write(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


def _train_source(cfg: RunConfig, data: Optional[str]) -> EpisodeSource:
    if data:
        return EpisodeSource(_read_data(data))
    d = cfg.data
    seeds = range(d.train_seed_offset, d.train_seed_offset + d.train_episodes)
    return EpisodeSource.from_config(cfg.world, seeds)


def _val_samples(cfg: RunConfig, data: Optional[str]) -> List[SequenceSample]:
    if data:
        return _read_data(data)
    d = cfg.data
    return [generate_sequence(cfg.world, s)
            for s in range(d.val_seed_offset, d.val_seed_offset + d.val_episodes)]


def _read_data(path: str) -> List[SequenceSample]:
    if not os.path.isdir(path):
        raise CommandError("dataset", f"missing dataset directory {path}")
    try:
        samples = read_dataset(path)
    except FileNotFoundError as e:
        raise CommandError("dataset", str(e)) from None
    if not samples:
        raise CommandError("dataset", f"dataset {path} is empty")
    return samples


def make_estimator(cfg: RunConfig, flavor: Optional[str] = None, callback=None) -> JointGroundingTracker:
    m = cfg.model.to_dict()
    t = cfg.train.to_dict()
    flavor = flavor or m.pop("flavor")
    m.pop("flavor", None)
    return JointGroundingTracker(
        flavor=flavor, model_params=m,
        steps=t.pop("steps"), batch_size=t.pop("batch_size"), lr=t.pop("lr"),
        encoder_lr_ratio=t.pop("encoder_lr_ratio"), random_state=t.pop("seed"),
        train_params=t, callback=callback)


def load_model(path: str):
    """Load a checkpoint and the run config echoed inside it (or None)."""
    if not os.path.isfile(path):
        raise CommandError("checkpoint", f"no such checkpoint {path}")
    est = JointGroundingTracker.load(path)
    run = dict(est.checkpoint_config_.get("run") or {})
    run.pop("config_hash", None)
    return est, (RunConfig.from_dict(run) if run else None)


def check_compatible(est: JointGroundingTracker, cfg: RunConfig) -> None:
    theirs = est.model_.config.to_dict()
    ours = cfg.model.to_dict()
    diff = sorted(k for k in ours if ours[k] != theirs.get(k))
    if diff:
        raise CommandError("checkpoint", f"incompatible with config in {diff}")


def _load_image(path: str, patch: int) -> np.ndarray:
    if not os.path.isfile(path):
        raise CommandError("input", f"no such image {path}")
    if path.endswith(".npy"):
        arr = np.load(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    return check_frame(arr, patch)


def _parse_box(text: str):
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise CommandError("input", f"bad box {text!r}") from None
    if len(vals) != 4:
        raise CommandError("input", f"box needs 4 numbers, got {len(vals)}")
    return check_box(vals)


def export_sequence(sample: SequenceSample, path: str) -> None:
    """Write a sample as ``frame_XXXX.png`` files plus description and boxes."""
    from .plotting import to_uint8

    os.makedirs(path, exist_ok=True)
    for k, f in enumerate(sample.frames):
        Image.fromarray(to_uint8(f)).save(os.path.join(path, f"frame_{k:04d}.png"))
    _write(os.path.join(path, "description.txt"), sample.description + "\n")
    _write(os.path.join(path, "groundtruth.txt"),
           "".join(f"{k} " + " ".join(repr(float(v)) for v in b) + "\n"
                   for k, b in enumerate(sample.gt_boxes)))


def _sequence_frames(path: str, patch: int) -> List[np.ndarray]:
    if not os.path.isdir(path):
        raise CommandError("input", f"no such sequence directory {path}")
    files = sorted(glob.glob(os.path.join(path, "*.png")) + glob.glob(os.path.join(path, "*.npy")))
    if not files:
        raise CommandError("input", f"no frames in {path}")
    return [_load_image(f, patch) for f in files]


def _box_str(b) -> str:
    return " ".join(f"{float(v):.6f}" for v in b)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, args.set)
    d = cfg.data
    if args.split == "train":
        seeds = range(d.train_seed_offset, d.train_seed_offset + d.train_episodes)
    else:
        seeds = range(d.val_seed_offset, d.val_seed_offset + d.val_episodes)
    if args.limit is not None:
        seeds = seeds[:args.limit]
    samples = (generate_sequence(cfg.world, s) for s in seeds)
    n = write_dataset(samples, args.out)
    _write(os.path.join(args.out, "run_config.txt"),
           f"# config_hash {cfg.hash()}\n" + cfg.to_text())
    if args.export_sequences:
        for k, s in enumerate(seeds[:args.export_sequences]):
            export_sequence(generate_sequence(cfg.world, s), os.path.join(args.out, "sequences", f"{k:06d}"))
    print(f"wrote {n} episodes to {args.out} config_hash {cfg.hash()}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    _setup_runtime(cfg)
    os.makedirs(args.out, exist_ok=True)
    h = cfg.hash()
    log_path = os.path.join(args.out, "train_log.txt")
    with open(log_path, "w") as log:
        log.write(f"# config_hash {h}\n# step ground_loss track_loss total lr\n")

        def cb(r):
            log.write(f"{r.step} {r.ground_loss!r} {r.track_loss!r} {r.total!r} {r.lr!r}\n")
            if r.step % max(1, cfg.train.steps // 10) == 0:
                logger.info("step %d total %.4f", r.step, r.total)

        est = make_estimator(cfg, callback=cb)
        est.fit(_train_source(cfg, args.data))
    _write(os.path.join(args.out, "run_config.txt"), f"# config_hash {h}\n" + cfg.to_text())
    ck = os.path.join(args.out, CHECKPOINT_NAME)
    est.save(ck, run_config=dict(cfg.to_dict(), config_hash=h))
    print(f"checkpoint {ck} params {est.n_parameters_} config_hash {h}")
    return 0


def _report_files(report: MetricsReport, out: str, name: str, plots: bool) -> None:
    _write(os.path.join(out, f"{name}.txt"), report.to_records())
    _write(os.path.join(out, f"{name}.json"), report.to_json() + "\n")
    if plots:
        from .plotting import plot_precision, plot_success

        plot_success({report.protocol: report}, os.path.join(out, f"{name}_success.png"))
        plot_precision({report.protocol: report}, os.path.join(out, f"{name}_precision.png"))


def cmd_eval(args) -> int:
    est, ck_cfg = load_model(args.checkpoint)
    cfg = load_run_config(args.config, args.set, base=ck_cfg)
    check_compatible(est, cfg)
    _setup_runtime(cfg)
    protocol = Protocol(args.protocol or cfg.eval.protocol)
    os.makedirs(args.out, exist_ok=True)
    report = est.evaluate(_val_samples(cfg, args.data), protocol, cfg.hash())
    _report_files(report, args.out, f"report_{protocol.value}", cfg.eval.plots)
    print(f"protocol {protocol.value} auc {report.auc:.4f} precision {report.precision:.4f} "
          f"grounding_acc {report.grounding_acc:.4f} failures {len(report.failures)} config_hash {cfg.hash()}")
    return 0


def cmd_ground(args) -> int:
    est, ck_cfg = load_model(args.checkpoint)
    h = (ck_cfg or RunConfig()).hash()
    frame = _load_image(args.image, est.model_.config.patch_size)
    tokens = check_tokens(args.text)
    pred = ground(est.model_, tokens, frame)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "box.txt"),
           f"# config_hash {h}\n# frame_index x1 y1 x2 y2 flag\n0 {_box_str(pred.box)} {int(pred.degenerate)}\n")
    from .plotting import annotate, dump_attention

    annotate(frame, [pred.box]).save(os.path.join(args.out, "grounded.png"))
    if args.dump_attn:
        dump_attention(est.model_, tokens, frame, os.path.join(args.out, "attention"))
    print(f"box {_box_str(pred.box)} degenerate {int(pred.degenerate)} config_hash {h}")
    return 0


def cmd_track(args) -> int:
    est, ck_cfg = load_model(args.checkpoint)
    h = (ck_cfg or RunConfig()).hash()
    frames = _sequence_frames(args.sequence, est.model_.config.patch_size)
    tokens = check_tokens(args.text)
    init = _parse_box(args.init_box) if args.init_box else None
    protocol = Protocol.NL_BB if init is not None else Protocol.NL_ONLY
    preds = track_sequence(est.model_, tokens, frames, init)
    os.makedirs(args.out, exist_ok=True)
    lines = [f"# config_hash {h}", f"# protocol {protocol.name}", "# frame_index x1 y1 x2 y2 flag"]
    lines += [f"{k} {_box_str(p.box)} {int(p.degenerate)}" for k, p in enumerate(preds)]
    _write(os.path.join(args.out, "track.txt"), "\n".join(lines) + "\n")
    if args.frames:
        from .plotting import annotate

        for k, (f, p) in enumerate(zip(frames, preds)):
            annotate(f, [p.box]).save(os.path.join(args.out, f"frame_{k:04d}.png"))
    print(f"tracked {len(preds)} frames protocol {protocol.name} config_hash {h}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.set)
    _setup_runtime(cfg)
    os.makedirs(args.out, exist_ok=True)
    h = cfg.hash()
    source = _train_source(cfg, args.data)
    val = _val_samples(cfg, args.val_data)
    rows, reports = [], {}
    for flavor in cfg.ablate.flavors:
        logger.info("training %s", flavor)
        est = make_estimator(cfg, flavor=flavor).fit(source)
        r = est.evaluate(val, cfg.eval.protocol, h)
        reports[flavor] = r
        rows.append((flavor, r.auc, r.precision, est.n_parameters_))
        print(f"{flavor} auc {r.auc:.4f} pre {r.precision:.4f}", flush=True)
    lines = [f"# config_hash {h}", f"# protocol {cfg.eval.protocol}", "# flavor auc pre n_parameters"]
    lines += [f"{f} {a!r} {p!r} {n}" for f, a, p, n in rows]
    _write(os.path.join(args.out, "ablation.txt"), "\n".join(lines) + "\n")
    _write(os.path.join(args.out, "ablation.json"),
           json.dumps({"config_hash": h, "reports": {f: r.to_dict() for f, r in reports.items()}},
                      sort_keys=True, indent=1) + "\n")
    if cfg.eval.plots:
        from .plotting import plot_precision, plot_success

        plot_success(reports, os.path.join(args.out, "ablation_success.png"))
        plot_precision(reports, os.path.join(args.out, "ablation_precision.png"))
    return 0


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundtrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("train", "val"), default="train")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--export-sequences", type=int, default=0, metavar="N",
                    help="also write the first N episodes as PNG frame folders")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model and write a checkpoint")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", help="dataset directory (default: generate from config)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data")
    sp.add_argument("--protocol", choices=[p.value for p in Protocol])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ground", help="ground a description in one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-attn", action="store_true", help="save corner maps and attention")
    sp.set_defaults(func=cmd_ground)

    sp = sub.add_parser("track", help="track a described target through a frame folder")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sequence", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--init-box", help="x1,y1,x2,y2 normalised first-frame box")
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", action="store_true", help="write annotated frames")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("ablate", help="train and evaluate every flavor")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data")
    sp.add_argument("--val-data")
    sp.set_defaults(func=cmd_ablate)
    return p


_KINDS = (
    (CommandError, None),
    (ConfigError, "config"),
    ((DatasetFormatError, DatasetVersionError), "dataset"),
    (checkpoint.CheckpointError, "checkpoint"),
    (NonFiniteLossError, "training"),
    ((UnknownWordError, SequenceTooLongError), "text"),
    ((DegenerateBoxError, InitializationError), "input"),
    (ValueError, "input"),
    (OSError, "io"),
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - turned into a one-line reason
        for types, kind in _KINDS:
            if isinstance(e, types):
                if kind is None:
                    kind, reason = e.kind, e.reason
                else:
                    reason = str(e)
                break
        else:
            raise
        reason = " ".join(reason.split())
        print(f"error: {kind}: {reason}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
