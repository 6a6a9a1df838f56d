"""
Training a small multilabel classifier
======================================

Synthetic inputs where each sample belongs to two of fourteen classes.
The positive terms of the loss are scaled by each class's
negative-to-positive ratio, so rare classes are not drowned out.
"""
import numpy as np

from sitevec import TrainConfig, class_priors
from sitevec.evaluate import class_metrics
from sitevec.model import embed, predict_proba
from sitevec.train import train

rng = np.random.default_rng(0)
centroids = rng.standard_normal((14, 32)) * 3
y = np.zeros((1200, 14), dtype=bool)
for i in range(1200):
    y[i, [i % 14, rng.integers(14)]] = True
x = (y @ centroids / y.sum(1, keepdims=True) + 0.3 * rng.standard_normal((1200, 32))).astype(np.float32)

print("negative/positive ratios:", np.round(class_priors(y), 1))

# %% Default architecture and learning rate; only the epoch budget is capped
config = TrainConfig(holdout_size=200, max_epochs=60)
result = train(x, y, config)
h = result.history
print(f"{len(h.epochs)} epochs, best holdout loss at epoch {h.best_epoch}, stop: {h.stop_reason}")
print("holdout loss first/last:", round(h.epochs[0].holdout_loss, 4), round(h.epochs[-1].holdout_loss, 4))

# %% Holdout F1 per class
ho = result.holdout
probs = predict_proba(x[ho], result.weights)
f1 = [class_metrics(y[ho, k], probs[:, k]).f1 for k in range(14)]
print("holdout macro F1:", round(float(np.mean(f1)), 3))

# the last hidden layer doubles as a site embedding
print("embedding shape:", embed(x[:3], result.weights).shape)
