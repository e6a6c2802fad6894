import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_boxes
from groundtrack.boxes import BoxNorm
from groundtrack.evalkit import (PRECISION_AXIS_PX, MetricsReport, Protocol, aggregate, auc, center_errors,
                                 evaluate, evaluate_tracker, frame_ious, grounding_accuracy, oracle_tracker,
                                 precision, scaled_threshold, success_curve)
from groundtrack.synthworld import WorldConfig, generate_sequence


def naive_success(ious):
    out = []
    for j in range(21):
        tau = j * 0.05
        hits = 0
        for v in ious:
            if v > tau:
                hits += 1
        out.append(hits / len(ious))
    return out


def naive_precision(pred, gt, thr, px):
    hits = 0
    for p, g in zip(pred, gt):
        dx = ((p[0] + p[2]) / 2 - (g[0] + g[2]) / 2) * px
        dy = ((p[1] + p[3]) / 2 - (g[1] + g[3]) / 2) * px
        if math.sqrt(dx * dx + dy * dy) <= thr:
            hits += 1
    return hits / len(pred)


def test_success_all_ones():
    curve = success_curve([1.0] * 7)
    assert list(curve[:20]) == [1.0] * 20 and curve[20] == 0.0
    assert auc([1.0] * 7) == 20 / 21


def test_success_all_half():
    curve = success_curve([0.5] * 4)
    assert list(curve[:10]) == [1.0] * 10 and list(curve[10:]) == [0.0] * 11
    assert auc([0.5] * 4) == pytest.approx(10 / 21, abs=1e-15)


def test_success_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(1, 30)
        v = rng.uniform(0, 1, n)
        # put some mass exactly on thresholds to exercise the strict edge
        v[rng.uniform(size=n) < 0.2] = rng.integers(0, 21) / 20
        assert list(success_curve(v)) == naive_success(v)


def test_success_errors():
    with pytest.raises(ValueError):
        success_curve([])
    with pytest.raises(ValueError):
        success_curve([1.2])


def test_precision_identical():
    b = random_boxes(np.random.default_rng(1), 10)
    assert precision(b, b, scaled_threshold(80), 80) == 1.0


def test_precision_boundary_counted():
    thr = scaled_threshold(80)
    assert thr == 5.0
    gt = np.array([[0.2, 0.2, 0.4, 0.4]] * 3)
    pred = gt + np.array([thr / 80, 0, thr / 80, 0])
    assert precision(pred, gt, thr, 80) == 1.0
    assert precision(pred + 1e-9, gt, thr, 80) == 0.0


def test_precision_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        p, g = random_boxes(rng, n), random_boxes(rng, n)
        thr = float(rng.uniform(0, 40))
        assert precision(p, g, thr, 80) == naive_precision(p, g, thr, 80)


def test_precision_length_mismatch():
    with pytest.raises(ValueError):
        precision(np.zeros((2, 4)), np.zeros((3, 4)), 5, 80)


def test_grounding_accuracy_examples():
    g = BoxNorm(0.0, 0.0, 1.0, 1.0)
    # iou of a box against the unit box equals its area
    assert grounding_accuracy([BoxNorm(0, 0, 1, 0.51)] * 3, [g] * 3) == 1.0
    assert grounding_accuracy([BoxNorm(0, 0, 1, 0.5)] * 3, [g] * 3) == 0.0
    assert grounding_accuracy([BoxNorm(0, 0, 1, 0.51), BoxNorm(0, 0, 1, 0.5), BoxNorm(0, 0, 1, 0.9)],
                              [g] * 3) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        grounding_accuracy([g], [g, g])


def test_grounding_accuracy_brute_force():
    from groundtrack.boxes import iou
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        p, g = random_boxes(rng, n), random_boxes(rng, n)
        p[: n // 2] = g[: n // 2] * 0.95 + 0.02
        hits = sum(1 for a, b in zip(p, g) if iou(a, b) > 0.5)
        assert grounding_accuracy(p, g) == hits / n


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_auc_is_mean_of_curve(v):
    assert auc(v) == float(np.mean(success_curve(v)))
    assert 0 <= auc(v) <= 20 / 21


def test_report_invariant_enforced():
    with pytest.raises(ValueError):
        MetricsReport(0.5, 1.0, [0.0] * 21, 1.0, [], "nl_only")
    with pytest.raises(ValueError):
        MetricsReport(0.0, 1.5, [0.0] * 21, 1.0, [], "nl_only")
    with pytest.raises(ValueError):
        MetricsReport(0.0, 1.0, [0.0] * 20, 1.0, [], "nl_only")


def test_frame_ious_out_of_view():
    b = random_boxes(np.random.default_rng(4), 3)
    v = frame_ious(b, b, [False, True, False])
    assert list(v) == [1.0, 0.0, 1.0]


@pytest.fixture(scope="module")
def samples():
    cfg = WorldConfig(num_frames=8)
    return [generate_sequence(cfg, s) for s in range(5)]


@pytest.mark.parametrize("protocol", list(Protocol))
def test_oracle_tracker_upper_bound(samples, protocol):
    rep = evaluate_tracker(oracle_tracker, samples, protocol)
    assert rep.auc == pytest.approx(20 / 21, abs=1e-12)
    assert rep.precision == 1.0 and rep.grounding_acc == 1.0
    assert rep.precision_curve == [1.0] * 51
    assert rep.protocol == protocol.value
    assert len(rep.per_sequence) == 5


def test_failures_recorded(samples):
    def flaky(sample, protocol):
        if sample.seed == 2:
            raise RuntimeError("boom")
        return oracle_tracker(sample, protocol)

    rep = evaluate_tracker(flaky, samples, "nl_only")
    assert len(rep.per_sequence) == 5
    assert rep.auc == pytest.approx(0.8 * 20 / 21, abs=1e-12)
    assert rep.grounding_acc == 0.8 and rep.per_sequence[2].auc == 0.0
    assert rep.failures == [("00002-seed2", "RuntimeError: boom")]
    assert "failure 00002-seed2 RuntimeError: boom" in rep.to_records()


def test_per_sequence_average_not_pooled():
    # a short perfect sequence and a long failed one average to 0.5 per sequence
    rep = aggregate([np.ones(2), np.zeros(8)], [1.0, 0.0], ["a", "b"], [True, False], "nl_only")
    assert rep.success_curve[0] == 0.5
    assert rep.precision == 0.5 and rep.grounding_acc == 0.5


def test_precision_curve_reference_pixels():
    errs = [np.array([0.0, 20.0, 20.5, 60.0])]
    rep = aggregate([np.ones(4)], [0.5], ["a"], [True], "nl_bb", per_sequence_errors=errs)
    c = np.array(rep.precision_curve)
    assert len(c) == len(PRECISION_AXIS_PX) == 51
    assert c[0] == 0.25 and c[19] == 0.25 and c[20] == 0.5 and c[21] == 0.75 and c[50] == 0.75
    assert np.all(np.diff(c) >= 0)


def test_center_errors_pixels():
    e = center_errors([[0, 0, 0.5, 0.5]], [[0.1, 0, 0.6, 0.5]], 80)
    assert e[0] == pytest.approx(8.0)


def test_report_serialisation(samples):
    rep = evaluate_tracker(oracle_tracker, samples, "nl_bb", config_hash="abc", n_parameters=9)
    d = json.loads(rep.to_json())
    assert d["auc"] == rep.auc and d["config_hash"] == "abc" and d["n_parameters"] == 9
    lines = rep.to_records().splitlines()
    assert lines[0] == "protocol nl_bb"
    assert lines[3].split()[0] == "auc"
    assert len(next(l for l in lines if l.startswith("success_curve")).split()) == 22


def test_model_evaluation_deterministic(small_model, samples):
    a = evaluate(small_model, samples[:2], "nl_bb")
    b = evaluate(small_model, samples[:2], "nl_bb")
    assert a.to_records() == b.to_records()
    assert a.n_parameters == small_model.n_parameters()
