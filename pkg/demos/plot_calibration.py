"""
Calibrating a quantized model
=============================

The full pipeline on a small training run: fuse branches, insert the channel
affine, initialize weight scales by clip search and activation ranges from
batch extremes, then calibrate block by block.  Each block is distilled
towards its full-precision output; the stage-output term pushes the block's
output through the frozen rest of its stage.  The result exports to an
integer model.
"""

import logging

import numpy as np

from repapq.calibration import CalibConfig, evaluate, forward_quant, quantize_pipeline
from repapq.data import CIFAR_MEAN, CIFAR_STD, Dataset, _normalize, sample_calibration, synthetic_images
from repapq.fusion import deploy_model
from repapq.graph import build_reference_graph
from repapq.training import TrainConfig, accuracy, train_desk

logging.basicConfig(level=logging.WARNING)


def dataset(n, seed):
    pix, lab = synthetic_images(n, seed)
    return Dataset(_normalize(pix, CIFAR_MEAN, CIFAR_STD), lab)


train, test = dataset(5000, 0), dataset(1000, 1)
fp = build_reference_graph(seed=0)
train_desk(fp, train, TrainConfig(epochs=6, plant_at=3, plant_sites=[(3, 1, 5, 30.0), (3, 3, 11, 40.0)]))
print("FP top-1:", accuracy(fp, test))

###############################################################################
# Min/max initialization against calibration at W6A6
# ---------------------------------------------------
# A short schedule keeps this quick; the default is 1000 iterations per block.

calib = sample_calibration(train, 512, seed=42)
variants = {
    "min/max": dict(init="minmax", cfg=CalibConfig(iterations=0, qprep=False, abc=False)),
    "calibrated": dict(init="omse", cfg=CalibConfig(iterations=100, calib_size=512, eval_every=50)),
}
models = {}
for name, v in variants.items():
    q, report = quantize_pipeline(fp, calib, v["cfg"], scheme="W6A6", init=v["init"])
    models[name] = q
    res = evaluate(q, test, fp_graph=fp)
    print(f"{name:10s} top-1 {res['top1']:.3f}  mean block MSE {np.mean(res['per_block_mse']):.4f}")

###############################################################################
# Integer deployment
# ------------------

q = models["calibrated"]
dep = deploy_model(q)
x = test.images[:32]
print("deploy vs simulation, max |logit difference|:", np.abs(dep.forward(x) - forward_quant(q, x)).max())
