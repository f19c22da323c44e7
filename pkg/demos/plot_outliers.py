"""
Planted activation outliers
===========================

Rescaling one output channel of a block by a large gain, and compensating in
the next layer, leaves the network's function unchanged but makes that
channel's activations dwarf the rest.  Training continues afterwards, so the
outliers are part of the trained model.  This script measures them and shows
what clipping the largest activations does to accuracy.
"""

import numpy as np

from repapq.analysis import clip_sweep, outlier_stats
from repapq.data import CIFAR_MEAN, CIFAR_STD, Dataset, _normalize, synthetic_images
from repapq.graph import build_reference_graph
from repapq.training import TrainConfig, accuracy, train_desk


def dataset(n, seed):
    pix, lab = synthetic_images(n, seed)
    return Dataset(_normalize(pix, CIFAR_MEAN, CIFAR_STD), lab)


train, test = dataset(5000, 0), dataset(1000, 1)

###############################################################################
# Train with outliers planted in blocks (3, 1) and (3, 3)
# -------------------------------------------------------
# Planting happens at the start of epoch 3 of 6.

g = build_reference_graph(seed=0)
cfg = TrainConfig(epochs=6, plant_at=3, plant_sites=[(3, 1, 5, 30.0), (3, 3, 11, 40.0)])
train_desk(g, train, cfg)
print("FP top-1:", accuracy(g, test))

###############################################################################
# Per-layer statistics
# --------------------
# ``outlier fraction`` counts activations at least 50x the layer's mean
# magnitude.

rep = outlier_stats(g, test.subset(np.arange(256)))
print(f"{'layer':>5} {'q99':>8} {'max':>8} {'outliers':>9}")
for layer, q, frac in zip(rep.layers, rep.quantiles, rep.outlier_fraction):
    print(f"{layer:5d} {q[3]:8.2f} {q[4]:8.2f} {frac:9.5f}")
ch = rep.channel_max[8]
print("layer 8, samples 0-2: channel 5 max", np.round(ch[:, 5], 1), "vs. largest other channel",
      np.round(np.nanmax(np.delete(ch, 5, axis=1), axis=1), 1))

###############################################################################
# Clipping the largest activations
# --------------------------------
# Each block input is clipped at the magnitude quantile that removes a fraction
# ``ratio`` of its nonzero values.

for row in clip_sweep(g, test, [0.0, 0.01, 0.05, 0.2], calib=train.subset(np.arange(256))):
    print(f"ratio {row['ratio']:.2f}: top-1 {row['top1']:.3f}")
