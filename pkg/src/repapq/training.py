"""Desk-scale training of the multi-branch reference model.

The network is trained unfused with BatchNorm in batch-statistics mode, Adam
and cosine decay.  ``plant_outliers`` rescales selected output channels of
chosen blocks and compensates in the consuming layer, so the function is
unchanged while the activations carry channel-specific outliers; training
then continues on top of that.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .graph import BatchNormStats, Block, ModelGraph, forward_fp, batched

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 2e-3
    bn_momentum: float = 0.1
    seed: int = 42
    # (epoch, [(stage, block, channel, gain), ...]); planted at the start of that epoch
    plant_at: int | None = None
    plant_sites: list = field(default_factory=list)


class _Trainable:
    """Tensor views of every trainable array in the graph."""

    def __init__(self, graph: ModelGraph):
        self.graph = graph
        self.refs: list[tuple[object, str, ad.Tensor]] = []
        for _, _, b in graph.blocks():
            for name in ("conv3x3", "conv1x1"):
                br = getattr(b, name)
                if br is not None:
                    self._add(br, "weight")
                    if br.bn is not None:
                        self._add(br.bn, "gamma")
                        self._add(br.bn, "beta")
            if b.identity is not None and b.identity.bn is not None:
                self._add(b.identity.bn, "gamma")
                self._add(b.identity.bn, "beta")
            if b.post_bn is not None:
                self._add(b.post_bn, "gamma")
                self._add(b.post_bn, "beta")
        self._add(graph.head, "weight")
        self._add(graph.head, "bias")
        self.by_key = {(id(o), n): t for o, n, t in self.refs}

    def _add(self, obj, name):
        self.refs.append((obj, name, ad.Tensor(getattr(obj, name), requires_grad=True)))

    def t(self, obj, name) -> ad.Tensor:
        return self.by_key[(id(obj), name)]

    def params(self) -> list[ad.Tensor]:
        return [t for _, _, t in self.refs]

    def write_back(self) -> None:
        for obj, name, t in self.refs:
            setattr(obj, name, t.data.copy())

    def reload(self) -> None:
        for obj, name, t in self.refs:
            t.data = np.asarray(getattr(obj, name), np.float32).copy()


def _bn_train(x: ad.Tensor, bn: BatchNormStats, tr: _Trainable, momentum: float) -> ad.Tensor:
    y, mean, var = ad.batch_norm_train(x, tr.t(bn, "gamma"), tr.t(bn, "beta"), bn.eps)
    m = x.data.size // x.shape[1]
    bn.running_mean = ((1 - momentum) * bn.running_mean + momentum * mean).astype(np.float32)
    bn.running_var = ((1 - momentum) * bn.running_var + momentum * var * m / max(m - 1, 1)).astype(np.float32)
    return y


def _block_train(block: Block, x: ad.Tensor, tr: _Trainable, momentum: float) -> ad.Tensor:
    out = None
    for name in ("conv3x3", "conv1x1"):
        br = getattr(block, name)
        if br is None:
            continue
        pad = 1 if br.kernel == 3 else 0
        y = ad.conv2d(x, tr.t(br, "weight"), None, block.stride, pad)
        if br.bn is not None:
            y = _bn_train(y, br.bn, tr, momentum)
        out = y if out is None else ad.add(out, y)
    if block.identity is not None:
        y = _bn_train(x, block.identity.bn, tr, momentum) if block.identity.bn is not None else x
        out = y if out is None else ad.add(out, y)
    if block.post_bn is not None:
        out = _bn_train(out, block.post_bn, tr, momentum)
    return ad.relu(out)


def plant_outliers(graph: ModelGraph, sites) -> ModelGraph:
    """Scale output channel ``c`` of block (s, k) by ``gain`` and undo it downstream.

    Only pre-add blocks are supported.  The consumer is the next block (its
    conv weights for input channel ``c`` shrink and its identity BN statistics
    grow) or the classifier head.
    """
    flat = [b for _, _, b in graph.blocks()]
    index = {(si, bi): i for i, (si, bi, _) in enumerate(graph.blocks())}
    for s, k, c, gain in sites:
        i = index[(s, k)]
        blk = flat[i]
        if blk.norm != "pre-add":
            raise ValueError("outlier planting supports pre-add blocks only")
        for bn in _branch_bns(blk):
            bn.gamma[c] *= gain
            bn.beta[c] *= gain
        if i + 1 < len(flat):
            nxt = flat[i + 1]
            for name in ("conv3x3", "conv1x1"):
                br = getattr(nxt, name)
                if br is not None:
                    br.weight[:, c] /= gain
            if nxt.identity is not None and nxt.identity.bn is not None:
                bn = nxt.identity.bn
                bn.running_mean[c] *= gain
                bn.running_var[c] *= gain * gain
                # keep (x - mean)/sqrt(var + eps) exact under the rescale
                bn.gamma[c] *= np.sqrt(bn.running_var[c] + bn.eps) / np.sqrt(bn.running_var[c] + bn.eps * gain * gain)
        else:
            # head input is the global average of block output
            graph.head.weight[:, c] /= gain
    return graph


def _branch_bns(block: Block):
    for name in ("conv3x3", "conv1x1"):
        br = getattr(block, name)
        if br is not None and br.bn is not None:
            yield br.bn
    if block.identity is not None and block.identity.bn is not None:
        yield block.identity.bn


def train_desk(graph: ModelGraph, data: Dataset, cfg: TrainConfig | None = None) -> dict:
    """Train ``graph`` in place; returns a report with the per-epoch loss trace."""
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    tr = _Trainable(graph)
    steps_per_epoch = len(data) // cfg.batch_size
    opt = ad.Adam([(tr.params(), cfg.lr)], total_steps=cfg.epochs * steps_per_epoch)
    trace = []
    for epoch in range(cfg.epochs):
        if cfg.plant_at is not None and epoch == cfg.plant_at and cfg.plant_sites:
            tr.write_back()
            plant_outliers(graph, cfg.plant_sites)
            tr.reload()
            log.info("planted outliers at %s", cfg.plant_sites)
        perm = rng.permutation(len(data))
        total = 0.0
        for it in range(steps_per_epoch):
            idx = perm[it * cfg.batch_size:(it + 1) * cfg.batch_size]
            h = ad.Tensor(data.images[idx])
            for _, _, b in graph.blocks():
                h = _block_train(b, h, tr, cfg.bn_momentum)
            logits = ad.linear(ad.gap(h), tr.t(graph.head, "weight"), tr.t(graph.head, "bias"))
            loss = ad.softmax_xent(logits, data.labels[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {it}", trace)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item()
        trace.append(total / max(steps_per_epoch, 1))
        log.info("epoch %d loss %.4f", epoch, trace[-1])
    tr.write_back()
    return {"loss_trace": trace, "epochs": cfg.epochs, "steps": opt.state.step}


def accuracy(graph: ModelGraph, data: Dataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    logits = batched(lambda x: forward_fp(graph, x), data.images, batch_size)
    return float((logits.argmax(axis=1) == data.labels).mean())
