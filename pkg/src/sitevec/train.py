"""Training: class-reweighted binary cross-entropy, Adam, plateau schedule, ablation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .dataset import CLASS_ORDER
from .errors import DegenerateClassError, NumericError, ShapeError, ValidationError
from .model import ModelWeights, backward_logits, forward, init_weights, predict_proba

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr0: float = 1e-4
    lr_factor: float = 0.1
    plateau_patience: int = 10
    lr_floor: float = 1e-8
    holdout_size: int = 1000
    seed: int = 0
    hidden: tuple[int, int] = (1000, 100)
    dropout: float = 0.5
    min_improvement: float = 1e-6
    max_epochs: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        positive = ("batch_size", "lr0", "lr_factor", "plateau_patience", "lr_floor", "holdout_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must be in [0, 1)")
        if self.lr_factor >= 1:
            raise ValidationError("lr_factor must be below 1")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        values = dict(values)
        if "hidden" in values:
            values["hidden"] = tuple(int(h) for h in values["hidden"])
        return cls(**values)


def class_priors(labels, class_names: Sequence[str] = CLASS_ORDER) -> np.ndarray:
    """Negative-to-positive ratio per class."""
    y = np.asarray(labels, dtype=bool)
    if y.ndim != 2:
        raise ShapeError("labels must be a 2-D (samples, classes) array")
    pos = y.sum(axis=0)
    neg = len(y) - pos
    for k in range(y.shape[1]):
        if pos[k] == 0 or neg[k] == 0:
            name = class_names[k] if k < len(class_names) else str(k)
            raise DegenerateClassError(name)
    return neg / pos


def _check_pred(pred):
    pred = np.asarray(pred, dtype=np.float64)
    if np.isnan(pred).any():
        raise NumericError("NaN in predictions")
    return pred


def weighted_bce(pred, label, priors) -> float:
    """Mean over classes of BCE with positive terms scaled by the class prior ratio.

    Works on one sample or a batch (then averaged over samples too).  Log
    arguments are clamped at ``1e-7``.
    """
    s = _check_pred(pred)
    y = np.asarray(label, dtype=np.float64)
    p = np.asarray(priors, dtype=np.float64)
    per = -p * y * np.log(np.maximum(s, EPS)) - (1 - y) * np.log(np.maximum(1 - s, EPS))
    return float(per.mean())


def weighted_bce_grad(pred, label, priors) -> np.ndarray:
    """Gradient of ``weighted_bce`` with respect to the probabilities.

    Terms whose log argument sits below the clamp are flat and contribute zero.
    """
    s = _check_pred(pred)
    y = np.asarray(label, dtype=np.float64)
    p = np.asarray(priors, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(s > EPS, -p * y / s, 0.0)
        neg = np.where(1 - s > EPS, (1 - y) / (1 - s), 0.0)
    return (pos + neg) / s.size


def weighted_bce_logit_grad(pred, label, priors) -> np.ndarray:
    """Loss gradient with respect to the logits, used for training.

    Unlike ``weighted_bce_grad`` it ignores the clamp, so a saturated wrong
    output still receives a learning signal.
    """
    s = _check_pred(pred)
    y = np.asarray(label, dtype=np.float64)
    p = np.asarray(priors, dtype=np.float64)
    return (-p * y * (1 - s) + (1 - y) * s) / s.size


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new parameters and state."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeError("parameter, gradient and state names differ")
    t = state.t + 1
    new_params, m, v = {}, {}, {}
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
        m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v[k] = beta2 * state.v[k] + (1 - beta2) * (g * g)
        step = lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
        new_params[k] = (p - step).astype(p.dtype, copy=False)
    return new_params, AdamState(m, v, t)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    holdout_loss: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    reductions: list[tuple[int, float]] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    @property
    def lr_sequence(self) -> list[float]:
        """Every learning rate the schedule reached, including the one that stopped training."""
        first = [self.epochs[0].lr] if self.epochs else []
        return first + [lr for _, lr in self.reductions]

    def write_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "holdout_loss", "lr", "seconds"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.holdout_loss), repr(e.lr), f"{e.seconds:.3f}"])


@dataclass
class TrainResult:
    weights: ModelWeights
    priors: np.ndarray
    history: TrainHistory
    holdout: np.ndarray


def split_holdout(n: int, holdout_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (train, holdout) index arrays."""
    if n <= holdout_size:
        raise ValidationError(f"dataset of {n} samples is not larger than the holdout size {holdout_size}")
    perm = np.random.default_rng([seed, 1]).permutation(n)
    return np.sort(perm[holdout_size:]), np.sort(perm[:holdout_size])


def _holdout_loss(x, y, w, priors, batch_size=1024):
    probs = predict_proba(x, w, batch_size)
    return weighted_bce(probs, y, priors)


def train(
    features,
    labels,
    config: TrainConfig = TrainConfig(),
    *,
    layout_version: str = "v1",
    grad_hook: Callable[[dict], dict] | None = None,
    on_epoch: Callable[[EpochRecord, ModelWeights], bool] | None = None,
) -> TrainResult:
    """Fit the network and return the weights with the lowest holdout loss.

    ``grad_hook`` may rewrite gradients before each update; ``on_epoch``
    can return True to stop early.  Both are for experiments and tests.
    """
    x = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels, dtype=bool)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ShapeError("features and labels must be 2-D with matching rows")
    tr, ho = split_holdout(len(x), config.holdout_size, config.seed)
    names = CLASS_ORDER if y.shape[1] == len(CLASS_ORDER) else tuple(f"c{k}" for k in range(y.shape[1]))
    priors = class_priors(y[tr], names)
    yf = y.astype(np.float32)

    dims = (x.shape[1], *config.hidden, y.shape[1])
    w = init_weights(config.seed, dims, layout_version=layout_version, class_order=names)
    params = w.params()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng([config.seed, 2])

    history = TrainHistory()
    best_loss, best_params, stale, j = np.inf, None, 0, 0
    lr = config.lr0
    epoch = 0
    while True:
        epoch += 1
        t0 = time.perf_counter()
        order = tr[rng.permutation(len(tr))]
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            cur = w.with_params(params)
            probs, trace = forward(x[idx], cur, train=config.dropout > 0,
                                   dropout_seed=int(rng.integers(2**63)), dropout=config.dropout)
            loss = weighted_bce(probs, yf[idx], priors)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch samples {idx[:10].tolist()}...")
            total += loss * len(idx)
            g = weighted_bce_logit_grad(probs, yf[idx], priors).astype(x.dtype)
            grads = backward_logits(trace, g)
            if grad_hook is not None:
                grads = grad_hook(grads)
            params, state = adam_step(params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)

        cur = w.with_params(params)
        hold = _holdout_loss(x[ho], yf[ho], cur, priors)
        rec = EpochRecord(epoch, total / len(tr), hold, lr, time.perf_counter() - t0)
        history.epochs.append(rec)
        logger.debug("epoch %d train %.5f holdout %.5f lr %.1e", epoch, rec.train_loss, hold, lr)

        if hold < best_loss - config.min_improvement:
            best_loss, best_params, stale = hold, {k: p.copy() for k, p in params.items()}, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.plateau_patience:
                j += 1
                lr = config.lr0 * config.lr_factor**j
                stale = 0
                history.reductions.append((epoch, lr))
                logger.info("epoch %d: learning rate reduced to %.1e", epoch, lr)

        if lr < config.lr_floor * (1 - 1e-9):
            history.stop_reason = "lr_floor"
            break
        if on_epoch is not None and on_epoch(rec, cur):
            history.stop_reason = "callback"
            break
        if config.max_epochs is not None and epoch >= config.max_epochs:
            history.stop_reason = "max_epochs"
            break

    final = w.with_params(best_params if best_params is not None else params)
    final.priors = priors
    return TrainResult(final, priors, history, ho)


# --- feature ablation -----------------------------------------------------------


@dataclass
class AblationStep:
    blocks: tuple[str, ...]
    input_dim: int
    report: object
    result: TrainResult | None = None


def ablation_run(train_set, y_train, test_set, y_test, feature_order: Sequence[str],
                 config: TrainConfig = TrainConfig(), eval_seed: int = 0, keep_models: bool = False):
    """Retrain on growing prefixes of ``feature_order`` and evaluate each balanced.

    ``train_set`` and ``test_set`` are ``FeatureMatrix`` objects.  The
    architecture is fixed; only the input width follows the prefix.
    """
    from .evaluate import PredictionSet, balanced_eval

    layout = train_set.layout
    unknown = [n for n in feature_order if n not in layout.names]
    if unknown:
        raise ValidationError(f"unknown blocks: {unknown}")
    if len(set(feature_order)) != len(feature_order):
        raise ValidationError("feature_order repeats a block")
    steps = []
    for i in range(1, len(feature_order) + 1):
        prefix = tuple(feature_order[:i])
        tr = train_set.select(prefix)
        te = test_set.select(prefix)
        result = train(tr.values, y_train, config, layout_version=tr.layout.version)
        scores = predict_proba(te.values, result.weights)
        preds = PredictionSet(uids=te.uids, raw=scores, truth=np.asarray(y_test, dtype=bool))
        report = balanced_eval(preds, seed=eval_seed)
        steps.append(AblationStep(prefix, tr.layout.total, report, result if keep_models else None))
        logger.info("ablation %s dim=%d macro F1=%.3f", "+".join(prefix), tr.layout.total, report.macro["f1"])
    return steps
