"""Gradient-based post-training calibration.

Blocks are calibrated one at a time in topological order.  Block ``k`` sees
the outputs of the already-calibrated quantized prefix and is distilled
towards the full-precision block output ``M_k``; with across-block
calibration the loss also includes the distortion of the stage output,
obtained by pushing the block output through the (frozen) quantized
successors of the same stage.  Blocks that end a stage use MSE for their own
term, every other block uses MAE.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, read_raw, write_raw
from .fusion import fuse_graph, insert_qprep
from .graph import Block, ModelGraph, batched, forward_fp
from .quantizers import ClipSearchConfig, attach_quantizers, calibrate_batchquant, parse_scheme

log = logging.getLogger(__name__)

LR_TABLE = {
    "weight": 1e-5,
    "bias": 1e-4,
    "s_w": 1e-5,
    "s_x": 1e-3,
    "affine": 1e-2,
    "others": 1e-5,
}

# 4-bit schemes use ten times larger steps for weights, biases and the affine
LR_TABLE_4BIT = dict(LR_TABLE, weight=1e-4, bias=1e-3, affine=1e-1)

LOSSES = {"mae": ad.mae_loss, "mse": ad.mse_loss}


def default_lrs(scheme: str) -> dict:
    """Learning-rate table for a bit-width scheme such as ``"W4A4"``."""
    return dict(LR_TABLE_4BIT if min(parse_scheme(scheme)) <= 4 else LR_TABLE)


@dataclass
class CalibConfig:
    iterations: int = 1000
    batch_size: int = 32
    calib_size: int = 1024
    lrs: dict = field(default_factory=lambda: dict(LR_TABLE))
    block_measure: str = "mae"
    stage_measure: str = "mae"
    last_block_measure: str = "mse"
    abc: bool = True
    qprep: bool = True
    seed: int = 42
    eval_every: int = 250
    head_iterations: int | None = None
    eval_batch: int = 256

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if any(v < 0 for v in self.lrs.values()):
            raise ValueError("learning rates must be >= 0")
        for m in (self.block_measure, self.stage_measure, self.last_block_measure):
            if m not in LOSSES:
                raise ValueError(f"unknown measurement {m!r}")

    def measurement(self, block_index: int, stage_len: int) -> str:
        """MSE for the last block of a stage (incl. single-block stages) under the MAE rule."""
        if self.block_measure == "mae" and block_index == stage_len - 1:
            return self.last_block_measure
        return self.block_measure


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass
class CalibRun:
    """Full-precision targets for every calibration sample (optionally on disk)."""

    inputs: np.ndarray
    logits: np.ndarray
    block_targets: list
    stage_targets: list
    spill_dir: Path | None = None
    reports: list = field(default_factory=list)

    def _get(self, item) -> np.ndarray:
        return read_raw(item) if isinstance(item, Path) else item

    def block_target(self, s: int, k: int) -> np.ndarray:
        return self._get(self.block_targets[s][k])

    def stage_target(self, s: int) -> np.ndarray:
        return self._get(self.stage_targets[s])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s, blocks in enumerate(self.block_targets):
            for k in range(len(blocks)):
                h.update(self.block_target(s, k).tobytes())
            h.update(self.stage_target(s).tobytes())
        h.update(self.logits.tobytes())
        return h.hexdigest()


def cache_targets(graph_fp: ModelGraph, calib_images: np.ndarray, spill_dir=None,
                  batch_size: int = 256) -> CalibRun:
    """Run the FP model once and keep every block and stage output."""
    chunks = [forward_fp(graph_fp, calib_images[i:i + batch_size], cache_intermediates=True)
              for i in range(0, len(calib_images), batch_size)]
    logits = np.concatenate([c[0] for c in chunks])
    blocks = [[np.concatenate([c[1]["blocks"][s][k] for c in chunks])
               for k in range(len(st.blocks))] for s, st in enumerate(graph_fp.stages)]
    stages = [b[-1] for b in blocks]
    run = CalibRun(np.asarray(calib_images, np.float32), logits, blocks, stages)
    if spill_dir is not None:
        d = Path(spill_dir)
        d.mkdir(parents=True, exist_ok=True)
        for s, st in enumerate(blocks):
            for k, arr in enumerate(st):
                p = d / f"target_s{s}_b{k}.rten"
                write_raw(p, arr)
                st[k] = p
            run.stage_targets[s] = st[-1]
        run.spill_dir = d
    return run


# ---------------------------------------------------------------------------
# quantized forward
# ---------------------------------------------------------------------------

class BlockParams:
    """Tensor leaves for the learnable state of one fused, quantized block."""

    def __init__(self, block: Block, trainable: bool = True, use_affine: bool = True, dtype=np.float32):
        def leaf(a):
            return ad.Tensor(np.array(a, dtype=dtype), requires_grad=trainable)

        self.block = block
        self.weight = leaf(block.fused.weight)
        self.bias = leaf(block.fused.bias)
        self.s_w = leaf(block.w_quant.scale)
        self.eta = leaf(block.a_quant.eta)
        self.eps = leaf(block.a_quant.eps)
        aff = block.affine if (use_affine and block.affine is not None and block.affine.enabled) else None
        self.gain = leaf(aff.gain) if aff is not None else None
        self.shift = leaf(aff.shift) if aff is not None else None
        self._s_floor = 0.1 * block.w_quant.scale.copy()

    def groups(self, lrs: dict) -> list:
        g = [("weight", [self.weight]), ("bias", [self.bias]), ("s_w", [self.s_w]),
             ("s_x", [self.eta, self.eps])]
        if self.gain is not None:
            g.append(("affine", [self.gain, self.shift]))
        return [(params, lrs.get(name, lrs["others"])) for name, params in g]

    def tensors(self) -> list[ad.Tensor]:
        return [t for t in (self.weight, self.bias, self.s_w, self.eta, self.eps, self.gain, self.shift)
                if t is not None]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def project(self) -> None:
        """Keep scales inside their valid domain after an optimizer step."""
        self.s_w.data = np.maximum(self.s_w.data, self._s_floor)
        self.eta.data = np.maximum(self.eta.data, np.float32(1e-3))

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.tensors()]

    def restore(self, snap) -> None:
        for t, a in zip(self.tensors(), snap):
            t.data = a.copy()

    def write_back(self) -> None:
        b = self.block
        f32 = lambda t: t.data.astype(np.float32)
        b.fused.weight, b.fused.bias = f32(self.weight), f32(self.bias)
        b.w_quant.scale = f32(self.s_w)
        b.a_quant.eta, b.a_quant.eps = f32(self.eta), f32(self.eps)
        if self.gain is not None:
            b.affine.gain, b.affine.shift = f32(self.gain), f32(self.shift)

    def forward(self, x) -> ad.Tensor:
        b = self.block
        xq = b.a_quant(x, self.eta, self.eps)
        wq = ad.fake_quant_weight(self.weight, self.s_w, b.w_quant.bits)
        y = ad.conv2d(xq, wq, self.bias, b.stride, 1)
        if self.gain is not None:
            y = ad.channel_affine(y, self.gain, self.shift)
        return ad.relu(y)


class HeadParams:
    def __init__(self, head, trainable: bool = True, dtype=np.float32):
        def leaf(a):
            return ad.Tensor(np.array(a, dtype=dtype), requires_grad=trainable)

        self.head = head
        self.weight, self.bias = leaf(head.weight), leaf(head.bias)
        self.s_w = leaf(head.w_quant.scale)
        self.eta, self.eps = leaf(head.a_quant.eta), leaf(head.a_quant.eps)
        self._s_floor = 0.1 * head.w_quant.scale.copy()

    def groups(self, lrs: dict) -> list:
        return [([self.weight], lrs["weight"]), ([self.bias], lrs["bias"]),
                ([self.s_w], lrs["s_w"]), ([self.eta, self.eps], lrs["s_x"])]

    def tensors(self):
        return [self.weight, self.bias, self.s_w, self.eta, self.eps]

    set_trainable = BlockParams.set_trainable
    snapshot = BlockParams.snapshot
    restore = BlockParams.restore

    def project(self) -> None:
        self.s_w.data = np.maximum(self.s_w.data, self._s_floor)
        self.eta.data = np.maximum(self.eta.data, np.float32(1e-3))

    def write_back(self) -> None:
        h = self.head
        f32 = lambda t: t.data.astype(np.float32)
        h.weight, h.bias = f32(self.weight), f32(self.bias)
        h.w_quant.scale = f32(self.s_w)
        h.a_quant.eta, h.a_quant.eps = f32(self.eta), f32(self.eps)

    def forward(self, feat) -> ad.Tensor:
        h = self.head
        fq = h.a_quant(feat, self.eta, self.eps)
        wq = ad.fake_quant_weight(self.weight, self.s_w, h.w_quant.bits)
        return ad.linear(fq, wq, self.bias)


def quant_block_forward(block: Block, x: np.ndarray, dtype=np.float32) -> np.ndarray:
    x = np.asarray(x, dtype)
    return BlockParams(block, trainable=False, dtype=dtype).forward(x).data


def quant_head_forward(head, feat: np.ndarray, dtype=np.float32) -> np.ndarray:
    return HeadParams(head, trainable=False, dtype=dtype).forward(np.asarray(feat, dtype)).data


def forward_quant(graph: ModelGraph, x: np.ndarray, cache_intermediates: bool = False,
                  dtype=np.float64):
    """Simulated-quantization forward (fake-quantized activations and weights).

    Runs in float64 by default so that rounding decisions match the integer
    deploy path; outputs are returned as float32.
    """
    h = np.asarray(x, dtype)
    cache = []
    for st in graph.stages:
        outs = []
        for b in st.blocks:
            h = quant_block_forward(b, h, dtype)
            outs.append(h.astype(np.float32))
        cache.append(outs)
    logits = quant_head_forward(graph.head, ad.gap(h).data, dtype).astype(np.float32)
    return (logits, {"blocks": cache}) if cache_intermediates else logits


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_act_quantizers(graph: ModelGraph, images: np.ndarray, batch_size: int = 32,
                        momentum: float | None = None) -> ModelGraph:
    """BatchQuant pass: each quantizer observes its input from the quantized prefix."""
    h = np.asarray(images, np.float32)

    def batches(arr):
        return [arr[i:i + batch_size] for i in range(0, len(arr), batch_size)]

    for _, _, b in graph.blocks():
        calibrate_batchquant(b.a_quant, batches(h), momentum)
        h = batched(lambda t, b=b: quant_block_forward(b, t), h)
    feat = ad.gap(h).data
    calibrate_batchquant(graph.head.a_quant, batches(feat), momentum)
    return graph


def prepare_quantized(graph: ModelGraph, calib_images: np.ndarray, scheme: str = "W8A8",
                      qprep: bool = True, init: str = "omse", p: int = 2,
                      first_last_bits: int | None = 8, clip_grid: int = 200,
                      momentum: float = 0.9) -> ModelGraph:
    """Fuse (if needed), insert QPRep, attach and initialize every quantizer."""
    g = fuse_graph(graph, qprep=qprep) if not graph.fused else copy.deepcopy(graph)
    if qprep:
        insert_qprep(g)
    else:
        for _, _, b in g.blocks():
            b.affine = None
    attach_quantizers(g, scheme, first_last_bits=first_last_bits, init=init, p=p,
                      clip_cfg=ClipSearchConfig(p=p, grid=clip_grid), momentum=momentum)
    return init_act_quantizers(g, calib_images, momentum=momentum)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _eval_objective(fn, n: int, chunk: int) -> float:
    total = 0.0
    for i in range(0, n, chunk):
        idx = np.arange(i, min(n, i + chunk))
        total += fn(idx).item() * len(idx)
    return total / n


def _optimize(params, objective, n: int, iterations: int, cfg: CalibConfig, rng, tag: str) -> dict:
    """Adam + cosine loop with best-snapshot restore; returns loss statistics."""
    def full_loss():
        params.set_trainable(False)
        try:
            return _eval_objective(objective, n, cfg.eval_batch)
        finally:
            params.set_trainable(True)

    init = full_loss()
    best_loss, best_snap = init, params.snapshot()
    trace, diverged = [], False
    if iterations > 0:
        opt = ad.Adam(params.groups(cfg.lrs), total_steps=iterations)
        for it in range(iterations):
            idx = rng.integers(0, n, cfg.batch_size)
            loss = objective(idx)
            val = loss.item()
            if not np.isfinite(val):
                diverged = True
                log.warning("%s: non-finite loss at iteration %d, restoring best snapshot", tag, it)
                break
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            params.project()
            trace.append(val)
            if (it + 1) % cfg.eval_every == 0 or it + 1 == iterations:
                cur = full_loss()
                if np.isfinite(cur) and cur < best_loss:
                    best_loss, best_snap = cur, params.snapshot()
    params.restore(best_snap)
    params.write_back()
    return {"init_loss": init, "final_loss": best_loss, "iterations": iterations,
            "diverged": diverged, "trace": trace}


def block_objective(params: BlockParams, successors, block_loss, stage_loss, xin: np.ndarray,
                    target_k: np.ndarray, target_n: np.ndarray | None = None):
    """Loss on a batch of sample indices: the block term plus, when ``successors``
    (frozen :class:`BlockParams`) are given, the stage-output term."""
    def objective(idx):
        y = params.forward(ad.Tensor(xin[idx]))
        loss = block_loss(y, target_k[idx])
        if successors:
            h = y
            for fp in successors:
                h = fp.forward(h)
            loss = ad.add(loss, stage_loss(h, target_n[idx]))
        return loss

    return objective


def calibrate_block(graph: ModelGraph, s: int, k: int, run: CalibRun, xin: np.ndarray,
                    cfg: CalibConfig, rng) -> dict:
    """Calibrate block ``k`` of stage ``s`` given its quantized-prefix inputs ``xin``."""
    stage = graph.stages[s]
    block = stage.blocks[k]
    measure = cfg.measurement(k, len(stage.blocks))
    successors = stage.blocks[k + 1:] if cfg.abc else []
    stage_measure = cfg.stage_measure if successors else None
    log.info("calibrate stage=%d block=%d measurement=%s stage_term=%s", s, k, measure,
             stage_measure or "none")
    params = BlockParams(block, trainable=True, use_affine=cfg.qprep)
    frozen = [BlockParams(b, trainable=False, use_affine=cfg.qprep) for b in successors]
    target_n = run.stage_target(s) if successors else None
    objective = block_objective(params, frozen, LOSSES[measure], LOSSES[cfg.stage_measure],
                                xin, run.block_target(s, k), target_n)
    rep = _optimize(params, objective, len(xin), cfg.iterations, cfg, rng, f"s{s}b{k}")
    rep.update({"stage": s, "block": k, "measurement": measure,
                "stage_measurement": stage_measure})
    return rep


def calibrate_head(graph: ModelGraph, run: CalibRun, feat: np.ndarray, cfg: CalibConfig, rng) -> dict:
    log.info("calibrate head measurement=mse")
    params = HeadParams(graph.head)

    def objective(idx):
        return ad.mse_loss(params.forward(ad.Tensor(feat[idx])), run.logits[idx])

    iters = cfg.iterations if cfg.head_iterations is None else cfg.head_iterations
    rep = _optimize(params, objective, len(feat), iters, cfg, rng, "head")
    rep.update({"stage": None, "block": "head", "measurement": "mse", "stage_measurement": None})
    return rep


def calibrate_model(graph: ModelGraph, run: CalibRun, cfg: CalibConfig) -> tuple[ModelGraph, dict]:
    """Sequentially calibrate every block, then the head, in place."""
    if not graph.quantized:
        raise ValueError("calibrate_model needs a graph with quantizers attached")
    rng = np.random.default_rng(cfg.seed)
    xin = run.inputs
    reports = []
    for s, st in enumerate(graph.stages):
        for k, b in enumerate(st.blocks):
            reports.append(calibrate_block(graph, s, k, run, xin, cfg, rng))
            xin = batched(lambda t, b=b: quant_block_forward(b, t), xin, cfg.eval_batch)
    feat = ad.gap(xin).data
    reports.append(calibrate_head(graph, run, feat, cfg, rng))
    run.reports = reports
    cfg_dict = asdict(cfg)
    return graph, {"config": cfg_dict, "blocks": [{k: v for k, v in r.items() if k != "trace"}
                                                   for r in reports],
                   "traces": [r["trace"] for r in reports]}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(graph: ModelGraph, dataset: Dataset, fp_graph: ModelGraph | None = None,
             batch_size: int = 256) -> dict:
    """Top-1 accuracy and, against ``fp_graph``, mean per-block MAE/MSE."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    quant = graph.quantized
    correct = 0
    n_blocks = len(graph.blocks())
    mae = np.zeros(n_blocks)
    mse = np.zeros(n_blocks)
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i:i + batch_size]
        if quant:
            logits, cache = forward_quant(graph, x, cache_intermediates=True)
        else:
            logits, cache = forward_fp(graph, x, cache_intermediates=True)
        correct += int((logits.argmax(axis=1) == dataset.labels[i:i + batch_size]).sum())
        if fp_graph is not None:
            _, ref = forward_fp(fp_graph, x, cache_intermediates=True)
            outs = [o for st in cache["blocks"] for o in st]
            refs = [o for st in ref["blocks"] for o in st]
            for j, (o, r) in enumerate(zip(outs, refs)):
                mae[j] += np.abs(o - r).mean() * len(x)
                mse[j] += np.square(o - r).mean() * len(x)
    out = {"top1": correct / len(dataset), "n": len(dataset)}
    if fp_graph is not None:
        out["per_block_mae"] = (mae / len(dataset)).tolist()
        out["per_block_mse"] = (mse / len(dataset)).tolist()
    return out


def quantize_pipeline(fp_graph: ModelGraph, calib: Dataset, cfg: CalibConfig, scheme: str = "W8A8",
                      init: str = "omse", p: int = 2, first_last_bits: int | None = 8,
                      spill_dir=None) -> tuple[ModelGraph, dict]:
    """Fuse -> QPRep -> attach -> init -> BatchQuant -> calibrate."""
    images = calib.images[:cfg.calib_size]
    run = cache_targets(fp_graph, images, spill_dir=spill_dir)
    g = prepare_quantized(fp_graph, images, scheme, qprep=cfg.qprep, init=init, p=p,
                          first_last_bits=first_last_bits)
    g, report = calibrate_model(g, run, cfg)
    report["scheme"] = scheme
    report["init"] = init
    report["p"] = p
    return g, report
