import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import random_boxes
from groundtrack.boxes import BoxNorm, DegenerateBoxError, box_loss, giou, giou_tensor, iou, loss
from groundtrack.cropping import CropParams, crop_images, crop_params, crop_search, crop_template
from groundtrack.inference import (InitializationError, Prediction, ground, init_state,
                                   track_frame, track_sequence)
from groundtrack.model import JointModel
from groundtrack.synthworld import WorldConfig, build_world, generate_sequence
from groundtrack.training import (EpisodeSource, NonFiniteLossError, TrainConfig, collate, fit, lr_factor,
                                  make_optimizer, make_pair, train_step)

box_st = st.tuples(*[st.floats(0, 1)] * 4).filter(
    lambda b: min(b[0], b[2]) + 1e-3 < max(b[0], b[2]) and min(b[1], b[3]) + 1e-3 < max(b[1], b[3])
).map(lambda b: (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3])))


# -- boxes ----------------------------------------------------------------

def test_iou_examples():
    assert iou((0.1, 0.2, 0.6, 0.7), (0.1, 0.2, 0.6, 0.7)) == 1.0
    assert iou((0, 0, .5, .5), (.5, .5, 1, 1)) == 0.0
    assert iou((0, 0, .5, .5), (.25, .25, .75, .75)) == pytest.approx(0.0625 / 0.4375, abs=1e-12)


def test_iou_raster_oracle():
    # pixel counting on a 400x400 raster: both boxes are 100-px aligned
    grid = np.zeros((400, 400), dtype=int)
    grid[0:200, 0:200] += 1
    grid[100:300, 100:300] += 2
    inter, union = np.sum(grid == 3), np.sum(grid > 0)
    assert iou((0, 0, .5, .5), (.25, .25, .75, .75)) == pytest.approx(inter / union, abs=1e-12)


def test_giou_examples():
    assert giou((0.2, 0.2, 0.4, 0.9), (0.2, 0.2, 0.4, 0.9)) == 1.0
    assert giou((0, 0, .5, .5), (.5, .5, 1, 1)) == pytest.approx(-0.5, abs=1e-12)
    assert giou((0, 0, 1, 1), (.25, .25, .75, .75)) == pytest.approx(0.25, abs=1e-12)


def test_degenerate_inputs_rejected():
    with pytest.raises(DegenerateBoxError):
        iou((0.5, 0.1, 0.5, 0.4), (0, 0, 1, 1))
    with pytest.raises(DegenerateBoxError):
        giou((0, 0, 1, 1), (0.3, 0.4, 0.6, 0.2))


def test_giou_properties_bulk():
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 10_000), random_boxes(rng, 10_000)
    ga, ia = giou_tensor(torch.tensor(a), torch.tensor(b))
    gb, _ = giou_tensor(torch.tensor(b), torch.tensor(a))
    assert torch.all(ga <= ia + 1e-12)
    torch.testing.assert_close(ga, gb, rtol=0, atol=1e-12)
    gs, _ = giou_tensor(torch.tensor(a), torch.tensor(a))
    torch.testing.assert_close(gs, torch.ones_like(gs))
    assert torch.all(ga > -1) and torch.all(ga <= 1)
    # nested boxes: the hull equals the union, so giou == iou
    inner = np.concatenate([a[:, :2] + 0.25 * (a[:, 2:] - a[:, :2]), a[:, 2:] - 0.25 * (a[:, 2:] - a[:, :2])], 1)
    gn, inn = giou_tensor(torch.tensor(a), torch.tensor(inner))
    torch.testing.assert_close(gn, inn, rtol=0, atol=1e-12)


def test_tensor_matches_scalar():
    rng = np.random.default_rng(1)
    a, b = random_boxes(rng, 50), random_boxes(rng, 50)
    g, i = giou_tensor(torch.tensor(a), torch.tensor(b))
    for k in range(50):
        assert float(i[k]) == pytest.approx(iou(a[k], b[k]), abs=1e-12)
        assert float(g[k]) == pytest.approx(giou(a[k], b[k]), abs=1e-12)


def test_loss_examples():
    assert loss((0.1, 0.1, 0.5, 0.6), (0.1, 0.1, 0.5, 0.6)) == 0.0
    assert loss((0.2, 0.2, 0.5, 0.6), (0.1, 0.1, 0.4, 0.5), w_giou=0, w_l1=1) == pytest.approx(0.1, abs=1e-12)


@given(box_st, box_st)
def test_loss_non_negative(p, g):
    assert loss(p, g) >= 0


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(2)
    for p, g in zip(random_boxes(rng, 100, 0.05), random_boxes(rng, 100, 0.05)):
        pred = torch.tensor(p, requires_grad=True)
        box_loss(pred, torch.tensor(g)).backward()
        eps = 1e-7
        for k in range(4):
            d = torch.zeros(4, dtype=torch.float64)
            d[k] = eps
            fd = (box_loss(pred.detach() + d, torch.tensor(g)) - box_loss(pred.detach() - d, torch.tensor(g))) / (2 * eps)
            an = pred.grad[k]
            assert abs(fd - an) <= 1e-3 * max(abs(an), 1e-3)


# -- cropping -------------------------------------------------------------

@given(box_st, box_st)
def test_crop_round_trip(ref, b):
    p = crop_params(ref, 4.0, 80)
    np.testing.assert_allclose(p.map_box_to_frame(p.map_box_to_crop(b)), b, atol=1e-9)


def test_crop_round_trip_bulk():
    rng = np.random.default_rng(3)
    refs, bs = random_boxes(rng, 10_000), random_boxes(rng, 10_000)
    for r, b in zip(refs, bs):
        p = crop_params(r, 2.0, 32)
        assert np.max(np.abs(p.map_box_to_frame(p.map_box_to_crop(b)) - b)) < 1e-9


def test_template_centred_no_padding():
    frame = np.random.default_rng(0).uniform(0.2, 1, size=(3, 80, 80)).astype(np.float32)
    img, p = crop_template(frame, (0.4, 0.4, 0.6, 0.6))
    assert img.shape == (3, 32, 32)
    assert p.side == pytest.approx(0.4)
    assert torch.all(img > 0)  # fully inside the frame, nothing padded
    np.testing.assert_allclose(p.map_box_to_crop((0.4, 0.4, 0.6, 0.6)), [0.25, 0.25, 0.75, 0.75])


def test_template_corner_padding():
    frame = np.ones((3, 80, 80), dtype=np.float32)
    img, p = crop_template(frame, (0.0, 0.0, 0.2, 0.2))
    # crop spans [-0.1, 0.3]: the first quarter of rows/cols lies outside the frame
    side = p.side
    outside = (0.0 - (p.cx - side / 2)) / side
    k = int(round(outside * 32))
    assert k == 8
    assert torch.all(img[:, :k, :] == 0) and torch.all(img[:, :, :k] == 0)
    torch.testing.assert_close(img[:, k:, k:], torch.ones(3, 32 - k, 32 - k))
    assert int((img[0] > 0).sum()) == (32 - k) ** 2


def test_search_full_frame_is_resize():
    frame = torch.rand(3, 80, 80)
    img, p = crop_search(frame.numpy(), (0.375, 0.375, 0.625, 0.625))
    assert p.side == pytest.approx(1.0)
    torch.testing.assert_close(img, frame, rtol=0, atol=1e-5)


def test_search_contains_gt_for_default_worlds():
    cfg = WorldConfig()
    for seed in range(150):
        boxes = build_world(cfg, seed).gt_boxes
        for t in range(1, len(boxes)):
            p = crop_params(boxes[t - 1], 4.0, 80)
            c = p.map_box_to_crop(boxes[t])
            assert np.all(c >= 0) and np.all(c <= 1), (seed, t)


def test_crop_images_tensor_params():
    frames = torch.rand(2, 3, 80, 80)
    ps = [CropParams(0.5, 0.5, 0.5, 32), CropParams(0.3, 0.6, 0.2, 32)]
    a = crop_images(frames, ps, 32)
    b = crop_images(frames, torch.tensor([[0.5, 0.5, 0.5], [0.3, 0.6, 0.2]]), 32)
    torch.testing.assert_close(a, b)


def test_crop_degenerate_box():
    with pytest.raises(DegenerateBoxError):
        crop_template(np.zeros((3, 80, 80), np.float32), (0.5, 0.5, 0.5, 0.7))


# -- inference ------------------------------------------------------------

@pytest.fixture
def sample():
    return generate_sequence(WorldConfig(num_frames=5), 7)


def test_ground_untrained_valid(small_model, sample):
    p = ground(small_model, sample.tokens, sample.frames[0])
    assert isinstance(p, Prediction)
    assert p.box.is_valid() or p.degenerate
    assert ground(small_model, sample.tokens, sample.frames[0]) == p


def test_init_state_with_box(small_model, sample):
    box = BoxNorm.of(sample.gt_boxes[0])
    state = init_state(small_model, sample.tokens, sample.frames[0], box)
    assert state.last_box == box
    assert len(state.memory) == 1
    assert state.frame_index == 0
    assert state.template_emb.length == 16


def test_init_state_language_only(small_model, sample):
    g = ground(small_model, sample.tokens, sample.frames[0])
    if g.degenerate:
        with pytest.raises(InitializationError):
            init_state(small_model, sample.tokens, sample.frames[0])
    else:
        assert init_state(small_model, sample.tokens, sample.frames[0]).last_box == g.box


def test_init_error_on_degenerate_grounding(small_model, sample):
    with torch.no_grad():
        for p in small_model.head.tl[-1].parameters():
            p.zero_()
        for p in small_model.head.br[-1].parameters():
            p.zero_()
    with pytest.raises(InitializationError):
        init_state(small_model, sample.tokens, sample.frames[0])


def test_track_frame_state_mutation(small_model, sample):
    state = init_state(small_model, sample.tokens, sample.frames[0], BoxNorm.of(sample.gt_boxes[0]))
    template, tokens = state.template_emb, state.lang_tokens
    pred, state2 = track_frame(small_model, state, sample.frames[1])
    assert state2 is state
    assert state.frame_index == 1
    assert state.template_emb is template and state.lang_tokens is tokens
    if pred.degenerate:
        assert len(state.memory) == 1 and state.last_box == BoxNorm.of(sample.gt_boxes[0])
    else:
        assert len(state.memory) == 2 and state.last_box == pred.box


def test_track_frame_degenerate_keeps_box(small_model, sample):
    state = init_state(small_model, sample.tokens, sample.frames[0], BoxNorm.of(sample.gt_boxes[0]))
    with torch.no_grad():
        for branch in (small_model.head.tl, small_model.head.br):
            for p in branch[-1].parameters():
                p.zero_()
    last, n = state.last_box, len(state.memory)
    pred, state = track_frame(small_model, state, sample.frames[1])
    assert pred.degenerate and pred.box == last
    assert state.last_box == last and len(state.memory) == n


def test_track_sequence_lengths(small_model, sample):
    preds = track_sequence(small_model, sample.tokens, sample.frames, BoxNorm.of(sample.gt_boxes[0]))
    assert len(preds) == len(sample.frames)
    assert preds[0].box == BoxNorm.of(sample.gt_boxes[0])


# -- training -------------------------------------------------------------

def test_lr_schedule_shape():
    cfg = TrainConfig(steps=600, warmup_frac=0.1)
    assert lr_factor(0, cfg) == pytest.approx(1 / 60)
    assert lr_factor(59, cfg) == 1.0
    assert lr_factor(399, cfg) == 1.0
    assert lr_factor(400, cfg) == pytest.approx(0.1)
    assert lr_factor(500, cfg) == pytest.approx(0.01)


def test_two_parameter_groups(small_model):
    opt, _ = make_optimizer(small_model, TrainConfig(lr=1e-3, encoder_lr_ratio=0.1))
    assert opt.param_groups[0]["initial_lr"] == pytest.approx(1e-4)
    assert opt.param_groups[1]["initial_lr"] == pytest.approx(1e-3)
    n = sum(p.numel() for g in opt.param_groups for p in g["params"])
    assert n == small_model.n_parameters()


def _pairs(n=4, seed=0):
    src = EpisodeSource.from_config(WorldConfig(num_frames=6), range(n))
    rng = np.random.default_rng(seed)
    return [make_pair(src, i, rng, TrainConfig()) for i in range(n)]


def test_pair_targets_inside_search():
    for p in _pairs(8):
        assert np.all(p.search_gt >= 0) and np.all(p.search_gt <= 1)
        assert p.ground_frame.shape == p.track_frame.shape == (3, 80, 80)


def test_frozen_params_identical_losses(small_config):
    torch.manual_seed(0)
    m = JointModel(small_config)
    batch = collate(_pairs())
    cfg = TrainConfig(lr=0.0, weight_decay=0.0)
    opt, _ = make_optimizer(m, cfg)
    a = train_step(m, opt, batch, cfg)
    b = train_step(m, opt, batch, cfg)
    assert a == b
    assert a.ground >= 0 and a.track >= 0 and a.total == pytest.approx(a.ground + a.track)


def test_training_deterministic(small_config):
    src = EpisodeSource.from_config(WorldConfig(num_frames=6), range(6))
    cfg = TrainConfig(steps=3, batch_size=2, seed=5)
    curves = []
    for _ in range(2):
        torch.manual_seed(0)
        m = JointModel(small_config)
        curves.append([r.total for r in fit(m, cfg, source=src)])
    assert curves[0] == curves[1]


def test_gradient_stops_at_template_crop(small_config):
    torch.manual_seed(0)
    m = JointModel(dataclasses.replace(small_config, flavor="msrm-tdec"))
    batch = collate(_pairs(2))
    batch.ground_frames.requires_grad_(True)
    from groundtrack.training import forward_losses
    _, lt, _, _ = forward_losses(m, batch, TrainConfig())
    lt.backward()
    # without the temporal module the grounding frame reaches the tracking loss only
    # through the detached template crop
    assert batch.ground_frames.grad is None or torch.all(batch.ground_frames.grad == 0)


def test_non_finite_loss(small_config):
    torch.manual_seed(0)
    m = JointModel(small_config)
    batch = collate(_pairs(2))
    batch.ground_gt[:] = float("nan")
    opt, _ = make_optimizer(m, TrainConfig())
    with pytest.raises(NonFiniteLossError) as e:
        train_step(m, opt, batch, TrainConfig(), step=7)
    assert e.value.step == 7 and "ground_gt" in e.value.dump


def test_fit_argument_check(small_model):
    with pytest.raises(ValueError):
        fit(small_model, TrainConfig(steps=1))
