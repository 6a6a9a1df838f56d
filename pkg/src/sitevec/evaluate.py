"""Prior calibration, balanced and unbalanced evaluation, curves and reports."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import CLASS_ORDER
from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
METRICS = ("precision", "recall", "f1", "auc")


def calibrate(s, p):
    """Adjust scores from a balanced-trained classifier to the true class prior.

    ``p`` is the negative-to-positive ratio of the class on the training
    data; ``s / (s + p (1 - s))`` is strictly increasing in ``s`` and the
    identity for ``p = 1``.
    """
    s = np.asarray(s, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ValidationError("prior ratios must be positive and finite")
    if np.any((s < 0) | (s > 1)):
        raise ValidationError("scores must lie in [0, 1]")
    out = s / (s + p * (1 - s))
    return out if out.ndim else float(out)


def binary_decisions(scores, threshold: float = THRESHOLD) -> np.ndarray:
    """Flag every class whose score is at least ``threshold`` (inclusive)."""
    return np.asarray(scores) >= threshold


@dataclass
class PredictionSet:
    uids: np.ndarray
    raw: np.ndarray
    truth: np.ndarray
    calibrated: np.ndarray | None = None
    langs: Sequence[str | None] | None = None
    class_names: tuple[str, ...] = CLASS_ORDER

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=bool)
        if self.raw.ndim != 2 or self.raw.shape != self.truth.shape:
            raise ShapeError(f"scores {self.raw.shape} and truth {self.truth.shape} must match")
        if len(self.uids) != len(self.raw):
            raise ShapeError("one uid per scored sample required")
        if np.any((self.raw < 0) | (self.raw > 1)):
            raise ValidationError("scores must lie in [0, 1]")
        if self.calibrated is not None:
            self.calibrated = np.asarray(self.calibrated, dtype=np.float64)
            if self.calibrated.shape != self.raw.shape:
                raise ShapeError("calibrated scores must match raw scores")
        if self.langs is not None and len(self.langs) != len(self.raw):
            raise ShapeError("one language tag per sample required")
        if len(self.class_names) != self.raw.shape[1]:
            self.class_names = tuple(f"c{k}" for k in range(self.raw.shape[1]))

    def __len__(self):
        return len(self.raw)

    def with_calibration(self, priors) -> "PredictionSet":
        return replace(self, calibrated=calibrate(self.raw, np.asarray(priors)[None, :]))

    def subset(self, idx) -> "PredictionSet":
        idx = np.asarray(idx)
        return PredictionSet(
            uids=np.asarray(self.uids)[idx],
            raw=self.raw[idx],
            truth=self.truth[idx],
            calibrated=None if self.calibrated is None else self.calibrated[idx],
            langs=None if self.langs is None else [self.langs[i] for i in idx],
            class_names=self.class_names,
        )


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    auc: float | None
    support: int
    n: int
    precision_defined: bool = True


def confusion(truth, predicted) -> tuple[int, int, int, int]:
    truth = np.asarray(truth, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    tp = int(np.count_nonzero(truth & predicted))
    fp = int(np.count_nonzero(~truth & predicted))
    fn = int(np.count_nonzero(truth & ~predicted))
    tn = int(np.count_nonzero(~truth & ~predicted))
    return tp, fp, fn, tn


def roc_auc(truth, scores) -> float | None:
    """Mann-Whitney AUC with midranks for ties; None without both classes."""
    truth = np.asarray(truth, dtype=bool)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def class_metrics(truth, scores, threshold: float = THRESHOLD) -> ClassMetrics:
    truth = np.asarray(truth, dtype=bool)
    tp, fp, fn, _ = confusion(truth, binary_decisions(scores, threshold))
    defined = tp + fp > 0
    precision = tp / (tp + fp) if defined else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassMetrics(precision, recall, f1, roc_auc(truth, scores), int(truth.sum()), len(truth), defined)


def pr_curve(truth, scores) -> list[tuple[float, float, float]]:
    """``(threshold, precision, recall)`` points from the highest threshold down.

    Thresholds are the unique scores plus 0 and 1; thresholds that predict
    no positives have undefined precision and are omitted.
    """
    truth = np.asarray(truth, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(truth.sum())
    thresholds = np.unique(np.concatenate([scores, [0.0, 1.0]]))[::-1]
    order = np.argsort(-scores, kind="stable")
    s_sorted, t_sorted = scores[order], truth[order]
    tp_cum = np.cumsum(t_sorted)
    points = []
    for t in thresholds:
        k = int(np.searchsorted(-s_sorted, -t, side="right"))  # count of scores >= t
        if k == 0:
            continue
        tp = int(tp_cum[k - 1])
        points.append((float(t), tp / k, tp / n_pos if n_pos else 0.0))
    return points


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    mean_score: float | None
    positive_fraction: float | None
    count: int


def _bin_index(scores, n_bins):
    return np.minimum(np.floor(np.asarray(scores) * n_bins).astype(np.int64), n_bins - 1)


def calibration_bins(preds: PredictionSet, n_bins: int = 10, use_calibrated: bool = True):
    """Per class, equal-width bins on [0, 1] with the mean score and positive fraction.

    Bins are ``[i/n, (i+1)/n)`` except the last, which also holds 1.0.
    Empty bins have count 0 and None for the averages.
    """
    if n_bins < 2:
        raise ValidationError("n_bins must be >= 2")
    scores = preds.calibrated if use_calibrated and preds.calibrated is not None else preds.raw
    out = {}
    for k, name in enumerate(preds.class_names):
        idx = _bin_index(scores[:, k], n_bins)
        bins = []
        for b in range(n_bins):
            sel = idx == b
            count = int(sel.sum())
            bins.append(
                CalibrationBin(
                    b / n_bins,
                    (b + 1) / n_bins,
                    float(scores[sel, k].mean()) if count else None,
                    float(preds.truth[sel, k].mean()) if count else None,
                    count,
                )
            )
        out[name] = bins
    return out


def mean_calibration_gap(bins: list[CalibrationBin]) -> float:
    """Average |positive fraction - mean score| over occupied bins."""
    gaps = [abs(b.positive_fraction - b.mean_score) for b in bins if b.count]
    return float(np.mean(gaps)) if gaps else 0.0


@dataclass
class EvalReport:
    protocol: str
    seed: int | None
    classes: dict[str, ClassMetrics | None]
    macro: dict[str, float | None]
    pr_curves: dict[str, list] = field(default_factory=dict)
    calibration: dict[str, list[CalibrationBin]] = field(default_factory=dict)
    per_language: dict[str, dict] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "macro": self.macro,
            "classes": {k: (asdict(v) if v is not None else None) for k, v in self.classes.items()},
            "pr_curves": {k: [list(p) for p in v] for k, v in self.pr_curves.items()},
            "calibration": {k: [asdict(b) for b in v] for k, v in self.calibration.items()},
            "per_language": self.per_language,
            "warnings": self.warnings,
        }

    def write_json(self, stream) -> None:
        json.dump(self.to_dict(), stream, indent=2)
        stream.write("\n")

    def write_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["protocol", "class", "precision", "recall", "f1", "auc", "support", "n", "precision_defined"])
        for name, m in self.classes.items():
            if m is None:
                w.writerow([self.protocol, name, "", "", "", "", 0, "", ""])
            else:
                w.writerow([self.protocol, name, m.precision, m.recall, m.f1,
                            "" if m.auc is None else m.auc, m.support, m.n, int(m.precision_defined)])
        w.writerow([self.protocol, "macro", *(("" if self.macro[k] is None else self.macro[k]) for k in METRICS),
                    "", "", ""])

    def write_pr_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["class", "threshold", "precision", "recall"])
        for name, points in self.pr_curves.items():
            for t, p, r in points:
                w.writerow([name, t, p, r])

    def write_calibration_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["class", "lower", "upper", "mean_score", "positive_fraction", "count"])
        for name, bins in self.calibration.items():
            for b in bins:
                w.writerow([name, b.lower, b.upper, "" if b.mean_score is None else b.mean_score,
                            "" if b.positive_fraction is None else b.positive_fraction, b.count])


def macro_average(classes: dict[str, ClassMetrics | None]) -> dict[str, float | None]:
    present = [m for m in classes.values() if m is not None]
    out = {}
    for key in METRICS:
        vals = [getattr(m, key) for m in present if getattr(m, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def _missing_class(name, notes):
    msg = f"class {name} has no positives; excluded from macro averages"
    notes.append(msg)
    warnings.warn(msg, stacklevel=3)


def _balanced_metrics(preds: PredictionSet, seed: int, threshold: float):
    rng = np.random.default_rng(seed)
    classes, notes = {}, []
    for k, name in enumerate(preds.class_names):
        truth = preds.truth[:, k]
        pos = np.flatnonzero(truth)
        neg = np.flatnonzero(~truth)
        if len(pos) == 0:
            _missing_class(name, notes)
            classes[name] = None
            continue
        n = min(len(pos), len(neg))
        if len(neg) < len(pos):
            # fewer negatives than positives: subsample positives instead
            pos = np.sort(rng.choice(pos, n, replace=False))
        else:
            neg = np.sort(rng.choice(neg, n, replace=False))
        idx = np.concatenate([pos, neg])
        classes[name] = class_metrics(truth[idx], preds.raw[idx, k], threshold)
    return classes, notes


def balanced_eval(preds: PredictionSet, seed: int = 0, threshold: float = THRESHOLD) -> EvalReport:
    """Per class, all positives against an equal-size seeded sample of negatives, raw scores."""
    classes, notes = _balanced_metrics(preds, seed, threshold)
    return EvalReport("balanced", seed, classes, macro_average(classes), warnings=notes)


def unbalanced_eval(preds: PredictionSet, priors, threshold: float = THRESHOLD, n_bins: int = 10) -> EvalReport:
    """Calibrate to the training priors, then score the full test distribution."""
    cal = preds.with_calibration(priors)
    classes, curves, notes = {}, {}, []
    for k, name in enumerate(cal.class_names):
        truth = cal.truth[:, k]
        if not truth.any():
            _missing_class(name, notes)
            classes[name] = None
            continue
        classes[name] = class_metrics(truth, cal.calibrated[:, k], threshold)
        curves[name] = pr_curve(truth, cal.calibrated[:, k])
    return EvalReport(
        "unbalanced", None, classes, macro_average(classes), pr_curves=curves,
        calibration=calibration_bins(cal, n_bins), warnings=notes,
    )


def per_language_report(preds: PredictionSet, min_samples: int = 300, seed: int = 0,
                        threshold: float = THRESHOLD) -> dict[str, dict[str, float | None]]:
    """Balanced macro metrics for each language with at least ``min_samples`` samples."""
    if preds.langs is None:
        raise ValidationError("predictions carry no language tags")
    groups: dict[str, list[int]] = {}
    for i, lang in enumerate(preds.langs):
        if lang:
            groups.setdefault(lang, []).append(i)
    out = {}
    for lang in sorted(groups):
        idx = groups[lang]
        if len(idx) < min_samples:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            classes, _ = _balanced_metrics(preds.subset(idx), seed, threshold)
        out[lang] = macro_average(classes)
    return out
