"""
Folding branches, BatchNorm and the channel affine
==================================================

A multi-branch block (3x3 conv, 1x1 conv and identity, each with its own
BatchNorm) collapses into a single 3x3 convolution.  After quantization the
per-channel affine that calibration learns folds into the integer
convolution's output scale and bias, so the deployed model runs one integer
convolution per block.
"""

import numpy as np

from repapq.calibration import forward_quant, init_act_quantizers
from repapq.fusion import deploy_model, fuse_block, fuse_graph
from repapq.graph import block_forward_fp, build_reference_graph, make_block
from repapq.quantizers import attach_quantizers

rng = np.random.default_rng(0)

###############################################################################
# One block, both BatchNorm placements
# ------------------------------------
# ``pre-add`` puts a BatchNorm on every branch; ``post-add`` normalizes the sum.

for norm in ("pre-add", "post-add"):
    blk = make_block(8, 8, 1, ("conv3x3", "conv1x1", "identity"), norm, rng, random_bn=True)
    x = rng.normal(size=(4, 8, 12, 12)).astype(np.float32)
    before = block_forward_fp(blk, x)
    fuse_block(blk)
    gap = np.abs(block_forward_fp(blk, x) - before).max()
    print(f"{norm:9s} fused kernel {blk.fused.weight.shape}, max |difference| {gap:.2e}")

###############################################################################
# A quantized model and its integer deployment
# --------------------------------------------
# Random affine parameters stand in for calibrated ones.  The deployed model
# computes integer codes, accumulates in integers and rescales once per layer.

g = fuse_graph(build_reference_graph(seed=1), qprep=True)
for _, _, b in g.blocks():
    b.affine.gain = rng.uniform(0.5, 1.5, b.out_channels).astype(np.float32)
    b.affine.shift = rng.normal(0, 0.1, b.out_channels).astype(np.float32)
attach_quantizers(g, "W6A6", first_last_bits=8)
init_act_quantizers(g, rng.normal(size=(64, 3, 32, 32)).astype(np.float32))

x = rng.normal(size=(32, 3, 32, 32)).astype(np.float32)
dep = deploy_model(g)
print("deploy vs simulated quantization, max |logit difference|:",
      np.abs(dep.forward(x) - forward_quant(g, x)).max())
first = dep.stages[0][0]
print("first layer:", first.w_bits, "bit weight codes in", (int(first.codes.min()), int(first.codes.max())),
      "output scales",
      float(first.s_out.min()), float(first.s_out.max()))
