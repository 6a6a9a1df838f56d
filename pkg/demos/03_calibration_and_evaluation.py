"""
Balanced vs. unbalanced evaluation and prior calibration
========================================================

A model trained with reweighted positives over-predicts rare classes.
Dividing the odds by the class ratio undoes that, without changing any
ranking metric.
"""
import numpy as np

from sitevec import PredictionSet, balanced_eval, calibrate, unbalanced_eval
from sitevec.evaluate import calibration_bins, mean_calibration_gap

rng = np.random.default_rng(1)
n = 20_000
signal = rng.standard_normal(n)
q = 1 / (1 + np.exp(-(2 * signal - 3)))  # true class probability, about 10% positives
truth = (rng.random(n) < q)[:, None]
ratio = (n - truth.sum()) / truth.sum()

# a model trained with reweighted positives reports odds inflated by the ratio
raw = (ratio * q / (ratio * q + 1 - q))[:, None]
preds = PredictionSet(np.arange(n), raw, truth)

print("calibrate(0.8, p=4) =", calibrate(0.8, 4.0))

# %% Balanced: equal numbers of positives and negatives per class
bal = balanced_eval(preds, seed=0)
print("balanced  ", {k: round(v, 3) for k, v in bal.macro.items()})

# %% Unbalanced: full test set, calibrated scores
unb = unbalanced_eval(preds, np.array([ratio]))
print("unbalanced", {k: round(v, 3) for k, v in unb.macro.items()})

raw_gap = mean_calibration_gap(calibration_bins(preds, 10, use_calibrated=False)["c0"])
cal_gap = mean_calibration_gap(unb.calibration["c0"])
print(f"mean bin gap raw {raw_gap:.3f} -> calibrated {cal_gap:.3f}")
