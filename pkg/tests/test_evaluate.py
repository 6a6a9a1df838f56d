import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sitevec.errors import ShapeError, ValidationError
from sitevec.evaluate import (
    PredictionSet,
    balanced_eval,
    binary_decisions,
    calibrate,
    calibration_bins,
    class_metrics,
    mean_calibration_gap,
    per_language_report,
    pr_curve,
    roc_auc,
    unbalanced_eval,
)
from oracles import brute_auc, brute_confusion

probs = st.floats(0, 1)
ratios = st.floats(1e-3, 1e3)


def test_calibrate_examples():
    assert calibrate(0.5, 1) == 0.5
    assert calibrate(0.8, 4) == pytest.approx(0.5, abs=1e-15)
    for p in (0.1, 1.0, 7.0):
        assert calibrate(0.0, p) == 0.0
        assert calibrate(1.0, p) == 1.0


def test_calibrate_rejects_bad_prior():
    with pytest.raises(ValidationError):
        calibrate(0.3, 0)
    with pytest.raises(ValidationError):
        calibrate(0.3, -1)
    with pytest.raises(ValidationError):
        calibrate(1.5, 1)


@given(probs, probs, ratios)
def test_calibrate_monotone(s1, s2, p):
    if s1 < s2:
        assert calibrate(s1, p) < calibrate(s2, p)


@given(probs, ratios)
def test_calibrate_inverse(s, p):
    assert calibrate(calibrate(s, p), 1 / p) == pytest.approx(s, abs=1e-12)


def test_binary_decisions_tie_inclusive():
    d = binary_decisions(np.array([[0.51, 0.49, 0.5, 0.0]]))
    assert d.tolist() == [[True, False, True, False]]
    assert not binary_decisions(np.zeros((2, 14))).any()


def _single(truth, scores):
    truth = np.asarray(truth, bool)[:, None]
    return PredictionSet(np.arange(len(truth)), np.asarray(scores, float)[:, None], truth)


def test_balanced_perfect_classifier():
    rng = np.random.default_rng(0)
    truth = rng.random((200, 14)) < 0.2
    preds = PredictionSet(np.arange(200), truth * 0.9 + 0.05, truth)
    report = balanced_eval(preds, seed=1)
    for m in report.classes.values():
        assert (m.precision, m.recall, m.f1, m.auc) == (1, 1, 1, 1)
    assert report.macro == {"precision": 1, "recall": 1, "f1": 1, "auc": 1}


def test_balanced_hand_instance():
    truth = [1, 1, 1, 0, 0, 0]
    scores = [0.9, 0.6, 0.3, 0.7, 0.2, 0.1]
    m = balanced_eval(_single(truth, scores)).classes["c0"]
    tp, fp, fn, tn = brute_confusion(truth, scores)
    assert (tp, fp, fn, tn) == (2, 1, 1, 2)
    assert m.precision == tp / (tp + fp)
    assert m.recall == tp / (tp + fn)
    assert m.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-15)
    assert m.auc == brute_auc(truth, scores) == 7 / 9


def test_constant_scores_auc_half():
    truth = [1, 0, 1, 0, 0, 1, 0, 0]
    assert balanced_eval(_single(truth, [0.5] * 8)).classes["c0"].auc == 0.5


def test_missing_class_excluded_with_warning():
    truth = np.zeros((4, 2), bool)
    truth[:2, 0] = True
    preds = PredictionSet(np.arange(4), np.full((4, 2), 0.7), truth)
    with pytest.warns(UserWarning, match="no positives"):
        report = balanced_eval(preds)
    assert report.classes["c1"] is None
    assert report.macro["precision"] == report.classes["c0"].precision


def test_undefined_precision_scored_zero():
    m = class_metrics(np.array([1, 0, 1], bool), np.array([0.1, 0.2, 0.3]))
    assert m.precision == 0.0 and not m.precision_defined and m.f1 == 0.0


@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=2, max_size=40))
def test_auc_matches_pairwise_oracle(rows):
    truth = [t for t, _ in rows]
    scores = [s for _, s in rows]
    got = roc_auc(np.array(truth), np.array(scores))
    if all(truth) or not any(truth):
        assert got is None
    else:
        assert got == pytest.approx(brute_auc(truth, scores), abs=1e-12)


def test_pr_curve_hand_instance():
    truth = np.array([1] + [0] * 9, bool)
    scores = np.array([0.9] + [0.1 * i for i in range(9)])
    points = pr_curve(truth, scores)
    assert points[0] == (0.9, 1.0, 1.0)
    # the lowest threshold predicts everything positive
    assert points[-1][1:] == (0.1, 1.0)
    thresholds = [t for t, _, _ in points]
    assert thresholds == sorted(thresholds, reverse=True)


def test_unbalanced_pr_curve_starts_at_one():
    truth = np.zeros((10, 1), bool)
    truth[3, 0] = True
    scores = np.linspace(0.05, 0.5, 10)[:, None]
    scores[3, 0] = 0.95
    report = unbalanced_eval(PredictionSet(np.arange(10), scores, truth), priors=np.array([9.0]))
    assert report.pr_curves["c0"][0][1] == 1.0


def test_identity_calibration_matches_raw():
    rng = np.random.default_rng(3)
    truth = rng.random((300, 14)) < 0.3
    raw = np.clip(truth * 0.3 + rng.random((300, 14)) * 0.7, 0, 1)
    preds = PredictionSet(np.arange(300), raw, truth)
    report = unbalanced_eval(preds, np.ones(14))
    for k, name in enumerate(preds.class_names):
        direct = class_metrics(truth[:, k], raw[:, k])
        assert report.classes[name] == direct


def test_calibration_preserves_rank_metrics():
    rng = np.random.default_rng(4)
    truth = rng.random((200, 14)) < 0.25
    raw = rng.random((200, 14))
    preds = PredictionSet(np.arange(200), raw, truth)
    cal = unbalanced_eval(preds, rng.uniform(0.5, 8, 14))
    for k, name in enumerate(preds.class_names):
        assert cal.classes[name].auc == pytest.approx(roc_auc(truth[:, k], raw[:, k]), abs=1e-12)
        raw_curve = [(p, r) for _, p, r in pr_curve(truth[:, k], raw[:, k])]
        cal_curve = [(p, r) for _, p, r in cal.pr_curves[name]]
        assert raw_curve == cal_curve


def test_random_baseline_precision_is_positive_rate():
    rate, gaps = 0.2, []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        truth = rng.random(2000) < rate
        points = pr_curve(truth, rng.random(2000))
        precisions = [p for _, p, r in points if r >= 0.2]
        gaps.append(np.mean(precisions) - truth.mean())
    assert abs(np.mean(gaps)) < 0.01


def test_calibration_bins_single_occupied():
    preds = PredictionSet(np.arange(5), np.full((5, 1), 0.95), np.ones((5, 1), bool))
    bins = calibration_bins(preds, 10)["c0"]
    occupied = [b for b in bins if b.count]
    assert len(occupied) == 1 and occupied[0].positive_fraction == 1.0
    assert occupied[0].mean_score == pytest.approx(0.95)
    assert bins[0].mean_score is None and bins[0].positive_fraction is None


def test_calibration_bins_edges():
    preds = PredictionSet(np.arange(4), np.array([[0.1], [0.5], [0.9], [1.0]]), np.ones((4, 1), bool))
    bins = calibration_bins(preds, 10, use_calibrated=False)["c0"]
    assert [i for i, b in enumerate(bins) if b.count] == [1, 5, 9]
    assert bins[9].count == 2
    with pytest.raises(ValidationError):
        calibration_bins(preds, 1)


def test_calibration_bins_monte_carlo():
    rng = np.random.default_rng(0)
    s = rng.random(10_000)
    y = rng.random(10_000) < s
    preds = PredictionSet(np.arange(10_000), s[:, None], y[:, None])
    gap = mean_calibration_gap(calibration_bins(preds, 10, use_calibrated=False)["c0"])
    assert gap < 0.03


def test_per_language_report():
    rng = np.random.default_rng(1)
    truth = rng.random((700, 3)) < 0.3
    raw = np.clip(truth * 0.5 + rng.random((700, 3)) * 0.5, 0, 1)
    langs = ["en"] * 350 + ["de"] * 320 + ["fi"] * 30
    report = per_language_report(PredictionSet(np.arange(700), raw, truth, langs=langs), min_samples=300)
    assert sorted(report) == ["de", "en"]
    assert all(0 <= v <= 1 for m in report.values() for v in m.values())


def test_per_language_symmetry():
    rng = np.random.default_rng(2)
    truth = rng.random((50, 2)) < 0.4
    raw = rng.random((50, 2))
    preds = PredictionSet(np.arange(100), np.vstack([raw, raw]), np.vstack([truth, truth]),
                          langs=["en"] * 50 + ["it"] * 50)
    report = per_language_report(preds, min_samples=10, seed=5)
    assert report["en"] == report["it"]
    single = per_language_report(PredictionSet(np.arange(50), raw, truth, langs=["en"] * 50), min_samples=1)
    assert list(single) == ["en"]


def test_per_language_needs_tags():
    with pytest.raises(ValidationError):
        per_language_report(_single([1, 0], [0.2, 0.3]))


def test_macro_is_mean_of_classes():
    rng = np.random.default_rng(6)
    truth = rng.random((400, 14)) < 0.2
    raw = rng.random((400, 14))
    report = balanced_eval(PredictionSet(np.arange(400), raw, truth), seed=3)
    for key in ("precision", "recall", "f1", "auc"):
        vals = [getattr(m, key) for m in report.classes.values()]
        assert report.macro[key] == pytest.approx(sum(vals) / len(vals), abs=1e-15)


def test_balanced_seed_stability():
    rng = np.random.default_rng(7)
    truth = rng.random((1000, 14)) < 0.15
    raw = np.clip(0.35 * truth + 0.65 * rng.random((1000, 14)), 0, 1)
    preds = PredictionSet(np.arange(1000), raw, truth)
    f1 = np.array([[m.f1 for m in balanced_eval(preds, seed=s).classes.values()] for s in range(20)])
    assert f1.std(axis=0).max() < 0.05


def test_prediction_set_validation():
    with pytest.raises(ShapeError):
        PredictionSet(np.arange(2), np.zeros((2, 3)), np.zeros((2, 4), bool))
    with pytest.raises(ValidationError):
        PredictionSet(np.arange(1), np.array([[1.5]]), np.array([[True]]))


def test_report_serialization():
    rng = np.random.default_rng(8)
    truth = rng.random((100, 14)) < 0.3
    preds = PredictionSet(np.arange(100), rng.random((100, 14)), truth)
    report = unbalanced_eval(preds, np.full(14, 2.0))
    buf = io.StringIO()
    report.write_json(buf)
    data = json.loads(buf.getvalue())
    assert data["protocol"] == "unbalanced" and set(data["macro"]) == {"precision", "recall", "f1", "auc"}
    csv_buf = io.StringIO()
    report.write_csv(csv_buf)
    assert len(csv_buf.getvalue().splitlines()) == 1 + 14 + 1
    pr = io.StringIO()
    report.write_pr_csv(pr)
    assert pr.getvalue().startswith("class,threshold,precision,recall\n")
    cal = io.StringIO()
    report.write_calibration_csv(cal)
    assert len(cal.getvalue().splitlines()) == 1 + 14 * 10
