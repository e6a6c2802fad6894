import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from groundtrack.synthworld import (
    CLS_ID, COLORS, MAX_TOKENS, PAD_ID, SEP_ID, VOCAB, WORD_TO_ID, DatasetFormatError, DatasetVersionError,
    ObjectTrack, SequenceTooLongError, TokenSequence, UniquenessError, UnknownWordError, WorldConfig,
    _render, _shape_mask, build_world, generate_description, generate_sequence, matching_objects, read_dataset,
    tokenize, write_dataset,
)


def _obj(oid, color="red", shape="square", direction="right", x=10.0, y=10.0, size=12, T=3):
    return ObjectTrack(oid, shape, color, np.full(T, x), np.full(T, y), np.full(T, size, dtype=np.int64),
                       np.ones(T), direction)


# -- tokenizer ------------------------------------------------------------

def test_tokenize_red_square():
    tok = tokenize("the red square")
    w = WORD_TO_ID
    assert tok.ids.tolist() == [CLS_ID, w["the"], w["red"], w["square"], SEP_ID] + [PAD_ID] * 35
    assert int(tok.mask.sum()) == 5
    assert len(tok.ids) == MAX_TOKENS == 40


def test_tokenize_empty():
    tok = tokenize("")
    assert tok.ids.tolist() == [CLS_ID, SEP_ID] + [PAD_ID] * 38
    assert int(tok.mask.sum()) == 2


def test_tokenize_overflow():
    tokenize(" ".join(["the"] * 38))
    with pytest.raises(SequenceTooLongError):
        tokenize(" ".join(["the"] * 39))


def test_tokenize_unknown_word():
    with pytest.raises(UnknownWordError):
        tokenize("the red zebra")


def test_vocab_is_small_and_closed():
    assert 35 <= len(VOCAB) <= 48
    assert len(set(VOCAB)) == len(VOCAB)


@given(st.lists(st.sampled_from(VOCAB[3:]), max_size=38))
def test_token_layout_invariants(words):
    tok = tokenize(" ".join(words))
    n = int(tok.mask.sum())
    assert tok.ids[0] == CLS_ID
    assert tok.ids[n - 1] == SEP_ID
    assert np.all(tok.ids[n:] == PAD_ID) and np.all(tok.mask[n:] == 0)
    assert tok.words() == words
    assert TokenSequence.from_ids(tok.ids) == tok


# -- descriptions ---------------------------------------------------------

def test_description_single_attribute():
    world = [_obj(0, "red", "square"), _obj(1, "blue", "square", x=40), _obj(2, "red", "circle", x=60)]
    assert generate_description(world, 0, np.random.default_rng(0)) == "the red square"


def test_description_needs_motion():
    world = [_obj(0, "red", "square", "left", x=50), _obj(1, "red", "square", "right", x=10)]
    # oracle: enumerate every grammar string, keep the shortest unique ones
    heads = ["the red square", "the red square moving left"]
    rels = ["on the left", "on the right", "at the top", "at the bottom"]
    cands = heads + [f"{h} {r}" for h in heads for r in rels]
    unique = [c for c in cands if matching_objects(world, c) == [0]]
    best = min(len(c.split()) for c in unique)
    assert [c for c in unique if len(c.split()) == best] == ["the red square moving left"]
    assert generate_description(world, 0, np.random.default_rng(0)) == "the red square moving left"


def test_description_deterministic_given_rng():
    world = build_world(WorldConfig(), 3).objects
    a = generate_description(world, 1, np.random.default_rng(5))
    b = generate_description(world, 1, np.random.default_rng(5))
    assert a == b


def test_uniqueness_unsatisfiable():
    cfg = WorldConfig(num_objects=2, shape_set=("square",), color_set=("red",))
    with pytest.raises(UniquenessError):
        generate_sequence(cfg, 0)


@pytest.mark.parametrize("motion", ["linear", "bounce", "random-walk"])
def test_descriptions_single_out_target(motion):
    cfg = WorldConfig(motion=motion, num_objects=6, num_frames=4)
    for seed in range(40):
        w = build_world(cfg, seed)
        assert matching_objects(w.objects, w.description) == [w.target_id]
        tgt = w.objects[w.target_id]
        for o in w.objects:
            if o.id != w.target_id:
                assert (o.color, o.shape) != (tgt.color, tgt.shape)


def test_ambiguous_flag_emits_ambiguous_description():
    w = build_world(WorldConfig(ambiguous=True), 0)
    assert len(matching_objects(w.objects, w.description)) >= 2


# -- episodes -------------------------------------------------------------

def test_generate_sequence_deterministic():
    a = generate_sequence(WorldConfig(), 7)
    b = generate_sequence(WorldConfig(), 7)
    assert a == b
    assert a.frames.tobytes() == b.frames.tobytes()
    assert generate_sequence(WorldConfig(), 8) != a


def test_gt_box_matches_rendered_target():
    cfg = WorldConfig()
    w = build_world(cfg, 7)
    # oracle: rasterise the target alone and take its pixel bounding box
    alone = _render(cfg, [w.objects[w.target_id]], w.target_id, None, [0])[0]
    on = np.any(np.abs(alone - np.asarray([0.08, 0.08, 0.10], np.float32)[:, None, None]) > 1e-6, axis=0)
    ys, xs = np.nonzero(on)
    F = cfg.frame_size
    mask_box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1]) / F
    gt = w.gt_boxes[0]
    iw = max(0, min(gt[2], mask_box[2]) - max(gt[0], mask_box[0]))
    ih = max(0, min(gt[3], mask_box[3]) - max(gt[1], mask_box[1]))
    inter = iw * ih
    area = lambda b: (b[2] - b[0]) * (b[3] - b[1])
    assert inter / (area(gt) + area(mask_box) - inter) >= 0.99


def test_target_drawn_on_top():
    s = generate_sequence(WorldConfig(num_objects=6), 7)
    tgt = s.objects[s.target_id]
    rgb = np.asarray(COLORS[tgt.color], dtype=np.float32)
    for t in (0, 5, 23):
        x0, y0, x1, y1 = tgt.box_px(t)
        m = _shape_mask(tgt.shape, x1 - x0)
        patch = s.frames[t][:, y0:y1, x0:x1][:, m]
        np.testing.assert_array_equal(patch, (rgb * np.float32(tgt.brightness[t]))[:, None].repeat(m.sum(), 1))


@given(st.integers(0, 10_000), st.sampled_from(["linear", "bounce", "random-walk"]))
def test_boxes_valid_and_in_frame(seed, motion):
    s = build_world(WorldConfig(motion=motion, num_frames=24), seed)
    b = s.gt_boxes
    assert np.all((0 <= b[:, 0]) & (b[:, 0] < b[:, 2]) & (b[:, 2] <= 1))
    assert np.all((0 <= b[:, 1]) & (b[:, 1] < b[:, 3]) & (b[:, 3] <= 1))


def test_world_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(frame_size=84).validate()
    with pytest.raises(ValueError):
        WorldConfig(num_objects=1).validate()
    with pytest.raises(ValueError):
        WorldConfig(motion="teleport").validate()
    with pytest.raises(ValueError):
        WorldConfig.from_dict({"frame_size": 80, "bogus": 1})
    cfg = WorldConfig(num_objects=3)
    assert WorldConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.hash() != WorldConfig().hash()


def test_render_subset_matches_full():
    w = build_world(WorldConfig(), 11)
    full = w.render()
    np.testing.assert_array_equal(w.render([3, 17]), full[[3, 17]])


# -- dataset files --------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    cfg = WorldConfig(num_frames=5)
    samples = [generate_sequence(cfg, s) for s in range(10)]
    assert write_dataset(samples, str(tmp_path)) == 10
    back = read_dataset(str(tmp_path))
    assert len(back) == 10
    for a, b in zip(samples, back):
        assert a == b


def test_dataset_truncated_blob(tmp_path):
    samples = [generate_sequence(WorldConfig(num_frames=3), s) for s in range(3)]
    write_dataset(samples, str(tmp_path))
    p = tmp_path / "000001.frames"
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(DatasetFormatError) as e:
        read_dataset(str(tmp_path))
    assert e.value.record == 1


def test_dataset_truncated_index(tmp_path):
    samples = [generate_sequence(WorldConfig(num_frames=3), s) for s in range(3)]
    write_dataset(samples, str(tmp_path))
    idx = tmp_path / "index.jsonl"
    lines = idx.read_text().splitlines()
    idx.write_text("\n".join(lines[:2] + [lines[2][:40]]) + "\n")
    with pytest.raises(DatasetFormatError) as e:
        read_dataset(str(tmp_path))
    assert e.value.record == 2


def test_dataset_version_mismatch(tmp_path):
    write_dataset([generate_sequence(WorldConfig(num_frames=3), 0)], str(tmp_path))
    idx = tmp_path / "index.jsonl"
    rec = json.loads(idx.read_text())
    rec["version"] = 99
    idx.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetVersionError):
        read_dataset(str(tmp_path))


def test_dataset_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(os.path.join(str(tmp_path), "nope"))
