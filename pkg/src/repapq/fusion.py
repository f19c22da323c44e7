"""Reparameterization passes.

``fuse_block`` merges the 3x3, 1x1 and identity branches (and their
BatchNorms) into one 3x3 convolution and inserts an identity-initialized
channel-wise affine right after it.  ``deploy_model`` folds that affine into
per-channel output scales and biases so inference runs on integer codes.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import Block, BatchNormStats, FusedConv, ModelGraph, QPRepAffine, write_tensor_file
from .quantizers import ActQuantParams, WeightQuantParams


class FusionError(ValueError):
    pass


def fold_bn(conv_weight: np.ndarray, conv_bias: np.ndarray | None, bn: BatchNormStats):
    """Absorb inference-mode BatchNorm into the preceding convolution."""
    o = conv_weight.shape[0]
    if bn.channels != o:
        raise FusionError(f"BatchNorm has {bn.channels} channels but conv has {o} outputs")
    if np.any(bn.running_var < 0):
        raise FusionError("BatchNorm running variance is negative")
    bias = np.zeros(o, np.float64) if conv_bias is None else conv_bias.astype(np.float64)
    std = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    t = bn.gamma.astype(np.float64) / std
    w = conv_weight.astype(np.float64) * t.reshape(-1, 1, 1, 1)
    b = bn.beta.astype(np.float64) + t * (bias - bn.running_mean)
    return w.astype(np.float32), b.astype(np.float32)


def pad_1x1_to_3x3(w: np.ndarray) -> np.ndarray:
    if w.shape[2:] != (1, 1):
        raise FusionError(f"expected a 1x1 kernel, got {w.shape[2:]}")
    return np.pad(w, ((0, 0), (0, 0), (1, 1), (1, 1)))


def identity_to_conv(channels: int) -> np.ndarray:
    k = np.zeros((channels, channels, 3, 3), np.float32)
    k[np.arange(channels), np.arange(channels), 1, 1] = 1.0
    return k


def _branch_kernels(block: Block):
    """Yield (name, 3x3 kernel, bias, bn) for every present branch."""
    c = block.out_channels
    for name in ("conv3x3", "conv1x1"):
        br = getattr(block, name)
        if br is None:
            continue
        w = br.weight if br.kernel == 3 else pad_1x1_to_3x3(br.weight)
        yield name, w, br.bias, br.bn
    if block.identity is not None:
        yield "identity", identity_to_conv(c), None, block.identity.bn


def fuse_block(block: Block, qprep: bool = True) -> Block:
    """Replace the branches of ``block`` (in place) with a single fused 3x3 conv."""
    if block.fused is not None:
        raise FusionError("block is already fused")
    names, ws, bs = [], [], []
    if block.norm == "pre-add":
        for name, w, b, bn in _branch_kernels(block):
            if bn is None:
                raise FusionError(f"pre-add block: branch {name} has no BatchNorm")
            fw, fb = fold_bn(w, b, bn)
            names.append(name)
            ws.append(fw.astype(np.float64))
            bs.append(fb.astype(np.float64))
        weight = np.sum(ws, axis=0)
        bias = np.sum(bs, axis=0)
    else:
        if block.post_bn is None:
            raise FusionError("post-add block has no BatchNorm after the sum")
        o = block.out_channels
        weight = np.zeros((o, block.in_channels, 3, 3))
        bias = np.zeros(o)
        for name, w, b, bn in _branch_kernels(block):
            if bn is not None:
                raise FusionError(f"post-add block: branch {name} carries its own BatchNorm")
            names.append(name)
            weight += w
            if b is not None:
                bias += b
        weight, bias = fold_bn(weight.astype(np.float32), bias.astype(np.float32), block.post_bn)
    block.fused = FusedConv(np.asarray(weight, np.float32), np.asarray(bias, np.float32), names)
    block.conv3x3 = block.conv1x1 = block.identity = None
    block.post_bn = None
    if qprep:
        block.affine = QPRepAffine.identity(block.out_channels)
    return block


def fuse_graph(graph: ModelGraph, qprep: bool = True) -> ModelGraph:
    """Fused deep copy of ``graph``."""
    g = copy.deepcopy(graph)
    for _, _, b in g.blocks():
        fuse_block(b, qprep=qprep)
    return g


def insert_qprep(graph: ModelGraph) -> ModelGraph:
    for _, _, b in graph.blocks():
        if b.fused is None:
            raise FusionError("QPRep affine goes after a fused conv; fuse first")
        if b.affine is None:
            b.affine = QPRepAffine.identity(b.out_channels)
    return graph


# ---------------------------------------------------------------------------
# deployment
# ---------------------------------------------------------------------------

@dataclass
class DeployConv:
    """Integer conv: ``y = (codes * (q_x - zp)) * s_out + bias``, then ReLU."""

    codes: np.ndarray          # O x I x 3 x 3 signed integers
    s_out: np.ndarray          # O
    bias: np.ndarray           # O
    stride: int
    act_scale: float
    act_zero_point: int
    act_bits: int
    w_bits: int
    provenance: list[str] = field(default_factory=list)

    def input_codes(self, x: np.ndarray) -> np.ndarray:
        q = np.rint(x.astype(np.float64) / self.act_scale) + self.act_zero_point
        return np.clip(q, 0, 2 ** self.act_bits - 1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        centered = self.input_codes(x) - self.act_zero_point
        acc = ad.conv2d(centered, self.codes.astype(np.float64), None, self.stride, 1).data
        y = acc * self.s_out.reshape(1, -1, 1, 1) + self.bias.reshape(1, -1, 1, 1)
        return np.maximum(y, 0)


@dataclass
class DeployLinear:
    codes: np.ndarray          # K x C
    s_out: float
    bias: np.ndarray
    act_scale: float
    act_zero_point: int
    act_bits: int
    w_bits: int

    def forward(self, feat: np.ndarray) -> np.ndarray:
        f = feat.mean(axis=(2, 3)).astype(np.float64)
        q = np.clip(np.rint(f / self.act_scale) + self.act_zero_point, 0, 2 ** self.act_bits - 1)
        acc = (q - self.act_zero_point) @ self.codes.T.astype(np.float64)
        return acc * self.s_out + self.bias


def fuse_affine_for_deploy(fused: FusedConv, affine: QPRepAffine | None, w_quant: WeightQuantParams,
                           act: ActQuantParams, stride: int = 1) -> DeployConv:
    """Fold the channel affine into ``s_out = gain*s_w*s_x`` and ``bias' = gain*bias + shift``."""
    if not act.frozen:
        raise FusionError("activation quantizer is not calibrated")
    s_w = w_quant.scale.astype(np.float64)
    if np.any(s_w <= 0) or act.scale <= 0:
        raise FusionError("quantization scales must be positive")
    o = fused.weight.shape[0]
    s_w = np.broadcast_to(s_w, (o,))
    if affine is not None and affine.enabled:
        gain, shift = affine.gain.astype(np.float64), affine.shift.astype(np.float64)
    else:
        gain, shift = np.ones(o), np.zeros(o)
    return DeployConv(
        codes=w_quant.codes(fused.weight).astype(np.int32),
        s_out=gain * s_w * act.scale,
        bias=gain * fused.bias.astype(np.float64) + shift,
        stride=stride,
        act_scale=act.scale,
        act_zero_point=act.zero_point,
        act_bits=act.bits,
        w_bits=w_quant.bits,
        provenance=list(fused.provenance),
    )


@dataclass
class DeployModel:
    name: str
    input_shape: tuple
    stages: list[list[DeployConv]]
    head: DeployLinear

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, np.float64)
        for stage in self.stages:
            for conv in stage:
                h = conv.forward(h)
        return self.head.forward(h).astype(np.float32)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for si, stage in enumerate(self.stages):
            for bi, c in enumerate(stage):
                p = f"s{si}.b{bi}"
                out[f"{p}.codes"] = c.codes
                out[f"{p}.s_out"] = c.s_out
                out[f"{p}.bias"] = c.bias
                out[f"{p}.act"] = np.array([c.act_scale, c.act_zero_point, c.act_bits, c.w_bits, c.stride])
        h = self.head
        out["head.codes"] = h.codes
        out["head.s_out"] = np.array([h.s_out])
        out["head.bias"] = h.bias
        out["head.act"] = np.array([h.act_scale, h.act_zero_point, h.act_bits, h.w_bits])
        return out

    def save(self, path) -> None:
        write_tensor_file(self.tensors(), path)


def deploy_model(graph: ModelGraph) -> DeployModel:
    """Integer-inference form of a calibrated, quantized graph."""
    stages = []
    for st in graph.stages:
        convs = []
        for b in st.blocks:
            if b.fused is None or b.w_quant is None or b.a_quant is None:
                raise FusionError("deploy needs fused blocks with attached quantizers")
            convs.append(fuse_affine_for_deploy(b.fused, b.affine, b.w_quant, b.a_quant, b.stride))
        stages.append(convs)
    h = graph.head
    head = DeployLinear(
        codes=h.w_quant.codes(h.weight).astype(np.int32),
        s_out=float(h.w_quant.scale[0]) * h.a_quant.scale,
        bias=h.bias.astype(np.float64),
        act_scale=h.a_quant.scale,
        act_zero_point=h.a_quant.zero_point,
        act_bits=h.a_quant.bits,
        w_bits=h.w_quant.bits,
    )
    return DeployModel(graph.name, graph.input_shape, stages, head)
