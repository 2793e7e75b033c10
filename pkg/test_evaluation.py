import numpy as np
import pytest

from conftest import make_prediction, negative, positive
from services.evaluation import (
    MatchTag, classification_accuracy, default_r_grid, f_measure, latency_bench, match, pr_at, pr_curve,
)
from services.model import build_model, preset
from services.records import DEFECT, NO_DEFECT
from utils.validation import ValidationError


def test_match_tags():
    assert match(make_prediction(DEFECT, (10, 10)), positive(13, 14), r=5).tag == MatchTag.TP
    assert match(make_prediction(DEFECT, (10, 10)), positive(13, 14), r=4.9).tag == MatchTag.FN
    assert match(make_prediction(NO_DEFECT), positive(13, 14), r=100).tag == MatchTag.FN
    assert match(make_prediction(DEFECT, (1, 1)), negative(), r=5).tag == MatchTag.FP
    assert match(make_prediction(NO_DEFECT), negative(), r=5).tag == MatchTag.TN
    assert match(make_prediction(DEFECT, (10, 10)), positive(13, 14), r=5).distance_px == pytest.approx(5.0)


def test_negative_margin_rejected():
    with pytest.raises(ValidationError):
        match(make_prediction(DEFECT), positive(0, 0), r=-1)


@pytest.mark.parametrize("r,counts,precision,recall", [
    (10, (2, 1, 2, 1), 2 / 3, 0.5),
    (0, (1, 1, 3, 1), 0.5, 0.25),
    (15, (3, 1, 1, 1), 0.75, 0.75),
])
def test_six_sample_counts(six_sample_set, r, counts, precision, recall):
    preds, truths = six_sample_set
    point = pr_at(preds, truths, r)
    assert (point.tp, point.fp, point.fn, point.tn) == counts
    assert point.precision == pytest.approx(precision)
    assert point.recall == pytest.approx(recall)
    assert point.total == 6


def test_perfect_predictions():
    truths = [positive(5, 5), positive(20, 3), negative()]
    preds = [make_prediction(DEFECT, (5, 5)), make_prediction(DEFECT, (20, 3)), make_prediction(NO_DEFECT)]
    for point in pr_curve(preds, truths, [0, 1, 10]):
        assert (point.precision, point.recall, point.f_measure) == (1.0, 1.0, 1.0)


def test_margin_beyond_diagonal_reduces_to_classification(six_sample_set):
    preds, truths = six_sample_set
    point = pr_at(preds, truths, r=64 * np.sqrt(2) + 1)
    # every detected positive counts; only the missed one stays FN
    assert (point.tp, point.fp, point.fn, point.tn) == (3, 1, 1, 1)


def test_empty_denominators_give_one():
    point = pr_at([make_prediction(NO_DEFECT)], [negative()], r=5)
    assert (point.precision, point.recall) == (1.0, 1.0)
    assert f_measure(0.0, 0.0) == 0.0


def test_pr_curve_monotone_and_conserving():
    rng = np.random.default_rng(0)
    grid = default_r_grid(64)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        truths, preds = [], []
        for _ in range(n):
            truth = positive(*rng.uniform(0, 63, 2)) if rng.random() < 0.6 else negative()
            pred = make_prediction(DEFECT, tuple(rng.uniform(0, 63, 2))) if rng.random() < 0.6 \
                else make_prediction(NO_DEFECT)
            truths.append(truth)
            preds.append(pred)
        curve = pr_curve(preds, truths, grid)
        positives = sum(t.is_positive for t in truths)
        for a, b in zip(curve, curve[1:]):
            assert b.tp >= a.tp
            assert b.recall >= a.recall
            assert b.fp == a.fp and b.tn == a.tn
        for point in curve:
            assert point.tp + point.fn == positives
            assert point.fp + point.tn == n - positives


def test_pr_curve_input_errors():
    with pytest.raises(ValidationError):
        pr_curve([make_prediction(DEFECT)], [negative(), negative()], [0])
    with pytest.raises(ValidationError):
        pr_curve([], [], [0])


def test_default_r_grid():
    assert default_r_grid(224) == [5.0 * k for k in range(25)]
    grid = default_r_grid(64)
    assert len(grid) == 25
    assert grid[0] == 0.0
    assert grid[-1] == pytest.approx(120 * 64 / 224)


def test_classification_accuracy(six_sample_set):
    preds, truths = six_sample_set
    # positives predicted as defect: 3 of 4, negatives rejected: 1 of 2
    assert classification_accuracy(preds, truths) == pytest.approx(4 / 6)
    with pytest.raises(ValidationError):
        classification_accuracy([], [])


def test_latency_bench_minimum_run(tiny_model):
    images = [np.zeros((16, 16), np.float32), np.ones((16, 16), np.float32)]
    report = latency_bench(tiny_model, images, warmup=1, reps=10, pin_cpu=False, label="tiny")
    assert report.reps == 10
    assert report.batch_size == 1
    assert report.label == "tiny"
    assert all(t > 0 for t in report.timings_ms)
    assert report.median_ms <= report.p90_ms
    assert report.parameter_count == 1600
    assert report.device


def test_latency_bench_argument_checks(tiny_model):
    images = [np.zeros((16, 16), np.float32)]
    with pytest.raises(ValidationError):
        latency_bench(tiny_model, images, reps=9, pin_cpu=False)
    with pytest.raises(ValidationError):
        latency_bench(tiny_model, images, warmup=-1, reps=10, pin_cpu=False)
    with pytest.raises(ValidationError):
        latency_bench(tiny_model, [], reps=10, pin_cpu=False)


@pytest.mark.slow
def test_wider_backbone_is_slower():
    images = [np.random.default_rng(0).uniform(size=(64, 64)).astype(np.float32)]
    narrow = latency_bench(build_model(preset("tiny", input_size=64)), images, warmup=3, reps=20)
    wide = latency_bench(build_model(preset("wide", input_size=64)), images, warmup=3, reps=20)
    assert wide.median_ms > narrow.median_ms
