"""Procedural moving-shapes episodes with unambiguous referring expressions.

Each episode is a short clip of coloured shapes moving over a plain
background.  One object is the target; its description is built from a
closed grammar::

    the <color> <shape> [moving <direction>] [<spatial relation>]

and is guaranteed to single out the target (unless ``ambiguous=True`` is
requested for failure-case demos).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from itertools import product
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
FRAMES_MAGIC = b"GTFR"
MAX_TOKENS = 40

COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "cyan": (0.10, 0.85, 0.90),
    "magenta": (0.90, 0.15, 0.85),
}
SHAPES = ("square", "circle", "triangle")
MOTIONS = ("linear", "bounce", "random-walk")
DIRECTIONS = ("left", "right", "up", "down")
RELATIONS = {
    "on the left": ("x", -1),
    "on the right": ("x", 1),
    "at the top": ("y", -1),
    "at the bottom": ("y", 1),
}
BACKGROUND = (0.08, 0.08, 0.10)
OCCLUDER = (0.45, 0.45, 0.45)

PAD, CLS, SEP = "[PAD]", "[CLS]", "[SEP]"
_WORDS = (
    "the a an of and is in to near",
    "red green blue yellow cyan magenta orange purple white black gray pink",
    "square circle triangle shape object",
    "moving left right up down on at top bottom",
    "small large center middle",
)
VOCAB: Tuple[str, ...] = (PAD, CLS, SEP) + tuple(" ".join(_WORDS).split())
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID, CLS_ID, SEP_ID = WORD_TO_ID[PAD], WORD_TO_ID[CLS], WORD_TO_ID[SEP]


class UniquenessError(ValueError):
    """The attribute space cannot single out a target."""


class UnknownWordError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"word {self.word!r} not in vocabulary"


class SequenceTooLongError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``record`` names the offending record index."""

    def __init__(self, record: int, reason: str):
        super().__init__(f"record {record}: {reason}")
        self.record = record


class DatasetVersionError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    frame_size: int = 80
    num_frames: int = 24
    num_objects: int = 4
    shape_set: Tuple[str, ...] = SHAPES
    color_set: Tuple[str, ...] = tuple(COLORS)
    motion: str = "bounce"
    occluder_prob: float = 0.0
    seed: int = 0
    patch_size: int = 8
    min_size: int = 10
    max_size: int = 16
    max_speed: float = 2.5
    appearance_change: bool = True
    ambiguous: bool = False

    def __post_init__(self):
        # tuples keep the config hashable when built from lists
        object.__setattr__(self, "shape_set", tuple(self.shape_set))
        object.__setattr__(self, "color_set", tuple(self.color_set))

    def validate(self) -> "WorldConfig":
        if self.frame_size % self.patch_size:
            raise ValueError(
                f"frame_size {self.frame_size} not divisible by patch_size {self.patch_size}")
        if not 2 <= self.num_objects <= 6:
            raise ValueError(f"num_objects must be in [2, 6], got {self.num_objects}")
        if not self.shape_set or any(s not in SHAPES for s in self.shape_set):
            raise ValueError(f"bad shape_set {self.shape_set}")
        if not self.color_set or any(c not in COLORS for c in self.color_set):
            raise ValueError(f"bad color_set {self.color_set}")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}")
        if not 0.0 <= self.occluder_prob <= 1.0:
            raise ValueError("occluder_prob must be in [0, 1]")
        if not 0 < self.min_size <= self.max_size < self.frame_size // 2:
            raise ValueError("object size range invalid for frame size")
        if self.num_frames < 1:
            raise ValueError("num_frames must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_set"] = list(self.shape_set)
        d["color_set"] = list(self.color_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TokenSequence:
    ids: np.ndarray  # int64 [MAX_TOKENS]
    mask: np.ndarray  # uint8 [MAX_TOKENS], 1 = valid
    vocab_size: int = len(VOCAB)

    def __eq__(self, other):
        return (isinstance(other, TokenSequence)
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.mask, other.mask)
                and self.vocab_size == other.vocab_size)

    @classmethod
    def from_ids(cls, ids: Sequence[int]) -> "TokenSequence":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids=ids, mask=(ids != PAD_ID).astype(np.uint8))

    def words(self) -> List[str]:
        return [VOCAB[i] for i, m in zip(self.ids, self.mask) if m and i not in (CLS_ID, SEP_ID)]


@dataclass
class ObjectTrack:
    """One object's full trajectory; positions are top-left pixel corners."""

    id: int
    shape: str
    color: str
    xs: np.ndarray  # float64 [T]
    ys: np.ndarray
    sizes: np.ndarray  # int64 [T]
    brightness: np.ndarray  # float64 [T]
    direction: str  # dominant heading at frame 0

    def box_px(self, t: int) -> Tuple[int, int, int, int]:
        x0, y0, s = int(round(self.xs[t])), int(round(self.ys[t])), int(self.sizes[t])
        return x0, y0, x0 + s, y0 + s

    def center(self, t: int = 0) -> Tuple[float, float]:
        x0, y0, x1, y1 = self.box_px(t)
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0

    def to_dict(self) -> dict:
        return {
            "id": self.id, "shape": self.shape, "color": self.color,
            "xs": self.xs.tolist(), "ys": self.ys.tolist(),
            "sizes": self.sizes.tolist(), "brightness": self.brightness.tolist(),
            "direction": self.direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectTrack":
        return cls(
            id=int(d["id"]), shape=d["shape"], color=d["color"],
            xs=np.asarray(d["xs"], dtype=np.float64), ys=np.asarray(d["ys"], dtype=np.float64),
            sizes=np.asarray(d["sizes"], dtype=np.int64),
            brightness=np.asarray(d["brightness"], dtype=np.float64),
            direction=d["direction"],
        )

    def __eq__(self, other):
        return (isinstance(other, ObjectTrack)
                and self.to_dict() == other.to_dict())


@dataclass
class SequenceSample:
    frames: np.ndarray  # float32 [T, 3, H, W] in [0, 1]
    description: str
    tokens: TokenSequence
    gt_boxes: np.ndarray  # float64 [T, 4] normalised x1 y1 x2 y2
    target_id: int
    out_of_view: np.ndarray = None  # bool [T]
    objects: List[ObjectTrack] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if self.out_of_view is None:
            self.out_of_view = np.zeros(len(self.gt_boxes), dtype=bool)
        if len(self.frames) != len(self.gt_boxes):
            raise ValueError("frames and gt_boxes length differ")

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, SequenceSample):
            return NotImplemented
        return (np.array_equal(self.frames, other.frames)
                and self.frames.dtype == other.frames.dtype
                and self.description == other.description
                and self.tokens == other.tokens
                and np.array_equal(self.gt_boxes, other.gt_boxes)
                and self.target_id == other.target_id
                and np.array_equal(self.out_of_view, other.out_of_view)
                and self.objects == other.objects
                and self.seed == other.seed
                and self.config_hash == other.config_hash)


# --------------------------------------------------------------------------
# language

def tokenize(text: str, max_len: int = MAX_TOKENS) -> TokenSequence:
    words = text.split()
    if len(words) + 2 > max_len:
        raise SequenceTooLongError(
            f"{len(words)} words + CLS/SEP exceed max length {max_len}")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    for i, w in enumerate(words):
        if w not in WORD_TO_ID or w in (PAD, CLS, SEP):
            raise UnknownWordError(w)
        ids[i + 1] = WORD_TO_ID[w]
    ids[len(words) + 1] = SEP_ID
    mask = np.zeros(max_len, dtype=np.uint8)
    mask[: len(words) + 2] = 1
    return TokenSequence(ids=ids, mask=mask)


def _satisfies(obj: ObjectTrack, color, shape, direction) -> bool:
    return (obj.color == color and obj.shape == shape
            and (direction is None or obj.direction == direction))


def _relation_holds(obj: ObjectTrack, pool: List[ObjectTrack], relation: str) -> bool:
    """True when ``obj`` is strictly the most extreme of ``pool`` along the relation axis."""
    axis, sign = RELATIONS[relation]
    k = 0 if axis == "x" else 1
    mine = sign * obj.center(0)[k]
    return all(sign * o.center(0)[k] < mine for o in pool if o.id != obj.id)


def matching_objects(world: Sequence[ObjectTrack], description: str) -> List[int]:
    """Ids of objects satisfying every predicate of ``description``."""
    words = description.split()
    if len(words) < 3 or words[0] != "the":
        raise ValueError(f"not a grammar string: {description!r}")
    color, shape = words[1], words[2]
    rest = " ".join(words[3:])
    direction = relation = None
    if rest.startswith("moving "):
        direction = rest.split()[1]
        rest = " ".join(rest.split()[2:])
    if rest:
        if rest not in RELATIONS:
            raise ValueError(f"unknown relation {rest!r}")
        relation = rest
    pool = [o for o in world if _satisfies(o, color, shape, direction)]
    if relation is None:
        return [o.id for o in pool]
    return [o.id for o in pool if _relation_holds(o, pool, relation)]


def generate_description(world: Sequence[ObjectTrack], target_id: int,
                         rng: np.random.Generator) -> str:
    """Shortest grammar string that picks out ``target_id`` alone.

    Ties between equally short candidates are broken with ``rng``.
    """
    by_id = {o.id: o for o in world}
    if target_id not in by_id:
        raise KeyError(f"target {target_id} not in world")
    tgt = by_id[target_id]
    base = f"the {tgt.color} {tgt.shape}"
    candidates = [base, f"{base} moving {tgt.direction}"]
    candidates += [f"{base} {rel}" for rel in RELATIONS]
    candidates += [f"{base} moving {tgt.direction} {rel}" for rel in RELATIONS]
    unique = [c for c in candidates if matching_objects(world, c) == [target_id]]
    if not unique:
        raise UniquenessError(f"no description singles out object {target_id}")
    shortest = min(len(c.split()) for c in unique)
    ties = [c for c in unique if len(c.split()) == shortest]
    return ties[int(rng.integers(len(ties)))] if len(ties) > 1 else ties[0]


# --------------------------------------------------------------------------
# world simulation and rendering

def _shape_mask(shape: str, s: int) -> np.ndarray:
    c = np.arange(s) + 0.5
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        r = s / 2.0
        return (c[None, :] - r) ** 2 + (c[:, None] - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base on the bottom row; row k spans half-width (k+1)/2
        half = (np.arange(s) + 1) / 2.0
        return np.abs(c[None, :] - s / 2.0) <= half[:, None] + 1e-9
    raise ValueError(shape)


def _heading(vx: float, vy: float) -> str:
    if abs(vx) >= abs(vy):
        return "right" if vx >= 0 else "left"
    return "down" if vy >= 0 else "up"


def _simulate(cfg: WorldConfig, rng: np.random.Generator, size0: int):
    T, F = cfg.num_frames, cfg.frame_size
    amp = int(rng.integers(0, 3)) if cfg.appearance_change else 0
    phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(0.15, 0.4)
    sizes = np.array([size0 + int(round(amp * np.sin(phase + freq * t))) for t in range(T)],
                     dtype=np.int64)
    sizes = np.maximum(sizes, 4)
    if cfg.appearance_change:
        bphase = rng.uniform(0, 2 * np.pi)
        brightness = 0.85 + 0.15 * np.sin(bphase + 0.2 * np.arange(T))
    else:
        brightness = np.ones(T)
    smax = int(sizes.max())
    # half a patch of margin keeps every corner within reach of cell-centre decoding
    lo = cfg.patch_size / 2.0
    lim = F - smax - lo
    x, y = rng.uniform(lo, lim), rng.uniform(lo, lim)
    speed = rng.uniform(0.4, 1.0) * cfg.max_speed
    ang = rng.uniform(0, 2 * np.pi)
    vx, vy = speed * np.cos(ang), speed * np.sin(ang)
    heading = _heading(vx, vy)
    xs, ys = np.empty(T), np.empty(T)
    for t in range(T):
        xs[t], ys[t] = x, y
        if cfg.motion == "random-walk":
            vx += rng.normal(0, 0.3 * cfg.max_speed)
            vy += rng.normal(0, 0.3 * cfg.max_speed)
            n = np.hypot(vx, vy)
            if n > cfg.max_speed:
                vx, vy = vx * cfg.max_speed / n, vy * cfg.max_speed / n
        x, y = x + vx, y + vy
        if cfg.motion == "linear":
            x, y = min(max(x, lo), lim), min(max(y, lo), lim)
        else:
            if x < lo or x > lim:
                vx = -vx
                x = 2 * lo - x if x < lo else 2 * lim - x
            if y < lo or y > lim:
                vy = -vy
                y = 2 * lo - y if y < lo else 2 * lim - y
    return xs, ys, sizes, brightness, heading


def _pick_attributes(cfg: WorldConfig, rng: np.random.Generator):
    combos = list(product(cfg.color_set, cfg.shape_set))
    if len(combos) < 2 and not cfg.ambiguous:
        raise UniquenessError(
            f"attribute space of size {len(combos)} cannot separate target from distractors")
    tc, ts = combos[int(rng.integers(len(combos)))]
    attrs = [(tc, ts)]
    others = [c for c in combos if c != (tc, ts)]
    share_color = [c for c in others if c[0] == tc]
    share_shape = [c for c in others if c[1] == ts]
    for k in range(cfg.num_objects - 1):
        if cfg.ambiguous and k == 0:
            attrs.append((tc, ts))
            continue
        pools = [p for p in (share_color, share_shape, others) if p]
        pool = pools[int(rng.integers(len(pools)))]
        attrs.append(pool[int(rng.integers(len(pool)))])
    return attrs


def _render(cfg: WorldConfig, objects: List[ObjectTrack], target_id: int,
            occluder: Optional[Tuple[int, int]], ts: Sequence[int]) -> np.ndarray:
    F = cfg.frame_size
    frames = np.empty((len(ts), 3, F, F), dtype=np.float32)
    frames[:] = np.asarray(BACKGROUND, dtype=np.float32)[None, :, None, None]
    order = [o for o in objects if o.id != target_id] + [o for o in objects if o.id == target_id]
    masks = {}
    for k, t in enumerate(ts):
        img = frames[k]
        for o in order:
            x0, y0, x1, y1 = o.box_px(t)
            s = x1 - x0
            key = (o.shape, s)
            if key not in masks:
                masks[key] = _shape_mask(o.shape, s)
            m = masks[key]
            rgb = np.asarray(COLORS[o.color], dtype=np.float32) * np.float32(o.brightness[t])
            img[:, y0:y1, x0:x1][:, m] = rgb[:, None]
        if occluder is not None:
            ox, ow = occluder
            img[:, :, ox:ox + ow] = np.asarray(OCCLUDER, dtype=np.float32)[:, None, None]
    return frames


def _rng_for(cfg: WorldConfig, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg.seed) % 2**64, int(seed) % 2**64]))


@dataclass
class World:
    """Everything about an episode except its pixels."""

    config: WorldConfig
    seed: int
    objects: List[ObjectTrack]
    target_id: int
    description: str
    occluder: Optional[Tuple[int, int]]

    @property
    def gt_boxes(self) -> np.ndarray:
        F = float(self.config.frame_size)
        tgt = self.objects[self.target_id]
        return np.array([[v / F for v in tgt.box_px(t)] for t in range(self.config.num_frames)],
                        dtype=np.float64)

    def render(self, ts: Optional[Sequence[int]] = None) -> np.ndarray:
        if ts is None:
            ts = range(self.config.num_frames)
        return _render(self.config, self.objects, self.target_id, self.occluder, list(ts))


def build_world(config: WorldConfig, seed: int) -> World:
    """Simulate the trajectories and description of episode ``seed``."""
    cfg = config.validate()
    rng = _rng_for(cfg, seed)
    attrs = _pick_attributes(cfg, rng)
    target_id = int(rng.integers(cfg.num_objects))
    # the target owns attrs[0]; it is placed at index target_id
    order = list(range(1, cfg.num_objects))
    order.insert(target_id, 0)
    objects = []
    for oid, ai in enumerate(order):
        color, shape = attrs[ai]
        size0 = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        xs, ys, sizes, bright, heading = _simulate(cfg, rng, size0)
        objects.append(ObjectTrack(oid, shape, color, xs, ys, sizes, bright, heading))
    if cfg.ambiguous:
        tgt = objects[target_id]
        description = f"the {tgt.color} {tgt.shape}"
    else:
        description = generate_description(objects, target_id, rng)
    occluder = None
    if cfg.occluder_prob > 0 and rng.uniform() < cfg.occluder_prob:
        ow = max(2, cfg.frame_size // 16)
        occluder = (int(rng.integers(0, cfg.frame_size - ow)), ow)
    return World(cfg, int(seed), objects, target_id, description, occluder)


def generate_sequence(config: WorldConfig, seed: int) -> SequenceSample:
    """Deterministically generate one episode for ``(config, seed)``."""
    world = build_world(config, seed)
    return SequenceSample(
        frames=world.render(), description=world.description,
        tokens=tokenize(world.description), gt_boxes=world.gt_boxes,
        target_id=world.target_id, objects=world.objects,
        seed=int(seed), config_hash=config.hash(),
    )


def generate_dataset(config: WorldConfig, seeds: Iterable[int]) -> List[SequenceSample]:
    return [generate_sequence(config, s) for s in seeds]


# --------------------------------------------------------------------------
# dataset files

def _write_frames(path: str, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FRAMES_MAGIC)
        f.write(struct.pack("<I4I", DATASET_VERSION, *arr.shape))
        f.write(arr.tobytes())


def _read_frames(path: str, record: int) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DatasetFormatError(record, f"cannot read frames: {e}") from None
    if blob[:4] != FRAMES_MAGIC or len(blob) < 24:
        raise DatasetFormatError(record, "bad frame blob header")
    version, *shape = struct.unpack("<I4I", blob[4:24])
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"record {record}: frame blob version {version}")
    n = int(np.prod(shape))
    if len(blob) - 24 != 4 * n:
        raise DatasetFormatError(record, f"frame blob truncated ({len(blob) - 24} of {4 * n} bytes)")
    return np.frombuffer(blob, dtype="<f4", offset=24).reshape(shape).astype(np.float32)


def _record(sample: SequenceSample, index: int, frames_name: str) -> dict:
    return {
        "version": DATASET_VERSION,
        "index": index,
        "seed": sample.seed,
        "config_hash": sample.config_hash,
        "description": sample.description,
        "token_ids": sample.tokens.ids.tolist(),
        "boxes": sample.gt_boxes.tolist(),
        "out_of_view": sample.out_of_view.astype(int).tolist(),
        "target_id": sample.target_id,
        "objects": [o.to_dict() for o in sample.objects],
        "frames": frames_name,
    }


def write_dataset(samples: Iterable[SequenceSample], path: str) -> int:
    """Write ``samples`` to directory ``path``; returns the record count."""
    os.makedirs(path, exist_ok=True)
    n = 0
    with open(os.path.join(path, "index.jsonl"), "w") as idx:
        for i, s in enumerate(samples):
            name = f"{i:06d}.frames"
            _write_frames(os.path.join(path, name), s.frames)
            idx.write(json.dumps(_record(s, i, name), sort_keys=True) + "\n")
            n += 1
    return n


def iter_dataset(path: str) -> Iterator[SequenceSample]:
    index = os.path.join(path, "index.jsonl")
    if not os.path.isfile(index):
        raise FileNotFoundError(f"no dataset index at {index}")
    with open(index) as f:
        for i, line in enumerate(f):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(i, f"unparseable record ({e.msg})") from None
            if not isinstance(rec, dict) or "version" not in rec:
                raise DatasetFormatError(i, "missing version field")
            if rec["version"] != DATASET_VERSION:
                raise DatasetVersionError(
                    f"record {i}: version {rec['version']} != {DATASET_VERSION}")
            try:
                frames = _read_frames(os.path.join(path, rec["frames"]), i)
                yield SequenceSample(
                    frames=frames,
                    description=rec["description"],
                    tokens=TokenSequence.from_ids(rec["token_ids"]),
                    gt_boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                    target_id=int(rec["target_id"]),
                    out_of_view=np.asarray(rec["out_of_view"], dtype=bool),
                    objects=[ObjectTrack.from_dict(o) for o in rec["objects"]],
                    seed=int(rec["seed"]),
                    config_hash=rec["config_hash"],
                )
            except (KeyError, TypeError, ValueError) as e:
                if isinstance(e, (DatasetFormatError, DatasetVersionError)):
                    raise
                raise DatasetFormatError(i, f"bad field: {e}") from None


def read_dataset(path: str) -> List[SequenceSample]:
    return list(iter_dataset(path))
