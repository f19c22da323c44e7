"""Stage/block/branch graph for reparameterizable VGG-style networks.

A block holds up to three training-time branches (3x3 conv, 1x1 conv,
identity), each followed by its own BatchNorm (pre-add placement) or sharing a
single BatchNorm after the sum (post-add).  After fusion a block carries a
single 3x3 :class:`FusedConv` and, optionally, a channel-wise affine layer.

Manifests are canonical JSON (schema ``repapq-manifest/1``); weights live in a
binary ``RAPQ`` container, see :func:`save_weights`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .quantizers import ActQuantParams, WeightQuantParams

MANIFEST_FORMAT = "repapq-manifest/1"
WEIGHTS_MAGIC = b"RAPQ"
WEIGHTS_VERSION = 1
ALIGN = 64


class ManifestError(ValueError):
    """Invalid manifest content; the message names the offending location."""


class WeightsError(ValueError):
    """Base class for weights-file problems."""


class MissingTensorError(WeightsError):
    pass


class TensorShapeError(WeightsError):
    pass


class BadMagicError(WeightsError):
    pass


# ---------------------------------------------------------------------------
# graph types
# ---------------------------------------------------------------------------

@dataclass
class BatchNormStats:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5) -> "BatchNormStats":
        return cls(np.ones(channels, np.float32), np.zeros(channels, np.float32),
                   np.zeros(channels, np.float32), np.ones(channels, np.float32), eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        inv = self.gamma / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None] \
            + self.beta[None, :, None, None]


@dataclass
class ConvBranch:
    weight: np.ndarray  # O x I x K x K
    bias: np.ndarray | None = None
    bn: BatchNormStats | None = None

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]


@dataclass
class IdentityBranch:
    bn: BatchNormStats | None = None


@dataclass
class FusedConv:
    weight: np.ndarray  # O x I x 3 x 3
    bias: np.ndarray
    provenance: list[str] = field(default_factory=list)


@dataclass
class QPRepAffine:
    gain: np.ndarray
    shift: np.ndarray
    enabled: bool = True

    @classmethod
    def identity(cls, channels: int) -> "QPRepAffine":
        return cls(np.ones(channels, np.float32), np.zeros(channels, np.float32))


@dataclass
class Block:
    in_channels: int
    out_channels: int
    stride: int = 1
    norm: str = "pre-add"
    conv3x3: ConvBranch | None = None
    conv1x1: ConvBranch | None = None
    identity: IdentityBranch | None = None
    post_bn: BatchNormStats | None = None
    fused: FusedConv | None = None
    affine: QPRepAffine | None = None
    w_quant: WeightQuantParams | None = None
    a_quant: ActQuantParams | None = None

    def branch_names(self) -> list[str]:
        return [n for n in ("conv3x3", "conv1x1", "identity") if getattr(self, n) is not None]

    def validate(self, where: str = "block") -> None:
        if self.norm not in ("pre-add", "post-add"):
            raise ManifestError(f"{where}: unknown norm placement {self.norm!r}")
        if self.identity is not None and (self.stride != 1 or self.in_channels != self.out_channels):
            raise ManifestError(f"{where}: identity branch requires stride 1 and in==out channels")
        if self.stride not in (1, 2):
            raise ManifestError(f"{where}: stride must be 1 or 2")
        if self.fused is None and not self.branch_names():
            raise ManifestError(f"{where}: block has no branches")


@dataclass
class Stage:
    blocks: list[Block]


@dataclass
class Head:
    weight: np.ndarray  # K x C
    bias: np.ndarray
    w_quant: WeightQuantParams | None = None
    a_quant: ActQuantParams | None = None


@dataclass
class ModelGraph:
    name: str
    input_shape: tuple[int, int, int]
    stages: list[Stage]
    head: Head

    @property
    def num_classes(self) -> int:
        return self.head.weight.shape[0]

    def blocks(self) -> list[tuple[int, int, Block]]:
        return [(si, bi, b) for si, st in enumerate(self.stages) for bi, b in enumerate(st.blocks)]

    @property
    def fused(self) -> bool:
        return all(b.fused is not None for _, _, b in self.blocks())

    @property
    def quantized(self) -> bool:
        return all(b.w_quant is not None for _, _, b in self.blocks()) and self.head.w_quant is not None

    def validate(self) -> None:
        c = self.input_shape[0]
        for si, bi, b in self.blocks():
            where = f"stages[{si}].blocks[{bi}]"
            b.validate(where)
            if b.in_channels != c:
                raise ManifestError(f"{where}: in_channels {b.in_channels} != previous {c}")
            if bi > 0 and (b.stride != 1 or b.in_channels != b.out_channels):
                raise ManifestError(f"{where}: only a stage's first block may downsample")
            c = b.out_channels
        if self.head.weight.shape[1] != c:
            raise ManifestError(f"head: in features {self.head.weight.shape[1]} != {c}")


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_reference_graph(widths=(16, 16, 32, 64, 128), depths=(1, 2, 4, 6, 1),
                          num_classes: int = 10, input_shape=(3, 32, 32), norm: str = "pre-add",
                          seed: int = 0, name: str = "desk-repvgg") -> ModelGraph:
    """Randomly initialized multi-branch model (He-normal kernels, identity BNs)."""
    rng = np.random.default_rng(seed)
    stages = []
    c = input_shape[0]
    for width, depth in zip(widths, depths):
        blocks = []
        for k in range(depth):
            stride = 2 if k == 0 else 1
            blocks.append(make_block(c, width, stride, norm=norm, rng=rng))
            c = width
        stages.append(Stage(blocks))
    w = rng.normal(0, np.sqrt(1.0 / c), (num_classes, c)).astype(np.float32)
    head = Head(w, np.zeros(num_classes, np.float32))
    g = ModelGraph(name, tuple(input_shape), stages, head)
    g.validate()
    return g


def make_block(cin: int, cout: int, stride: int = 1, branches=("conv3x3", "conv1x1", "identity"),
               norm: str = "pre-add", rng=None, random_bn: bool = False) -> Block:
    rng = rng if rng is not None else np.random.default_rng()
    pre = norm == "pre-add"

    def bn(c):
        if not random_bn:
            return BatchNormStats.identity(c)
        return BatchNormStats(rng.normal(0, 1, c).astype(np.float32),
                              rng.normal(0, 1, c).astype(np.float32),
                              rng.normal(0, 1, c).astype(np.float32),
                              (np.abs(rng.normal(0, 1, c)) + 0.1).astype(np.float32))

    def conv(k):
        std = np.sqrt(2.0 / (cin * k * k)) if not random_bn else 1.0
        w = rng.normal(0, std, (cout, cin, k, k)).astype(np.float32)
        b = rng.normal(0, 1, cout).astype(np.float32) if random_bn else np.zeros(cout, np.float32)
        return ConvBranch(w, b, bn(cout) if pre else None)

    blk = Block(cin, cout, stride, norm)
    if "conv3x3" in branches:
        blk.conv3x3 = conv(3)
    if "conv1x1" in branches:
        blk.conv1x1 = conv(1)
    if "identity" in branches and stride == 1 and cin == cout:
        blk.identity = IdentityBranch(bn(cout) if pre else None)
    if not pre:
        blk.post_bn = bn(cout)
    return blk


# ---------------------------------------------------------------------------
# full-precision forward
# ---------------------------------------------------------------------------

def block_forward_fp(block: Block, x: np.ndarray) -> np.ndarray:
    """Post-activation output of one block (fused path preferred when present)."""
    if block.fused is not None:
        y = ad.conv2d(x, block.fused.weight, block.fused.bias, block.stride, 1).data
        if block.affine is not None and block.affine.enabled:
            y = ad.channel_affine(y, block.affine.gain, block.affine.shift).data
        return np.maximum(y, 0)
    if not block.branch_names():
        raise ValueError("block has neither branches nor a fused conv")
    out = None
    for name in ("conv3x3", "conv1x1"):
        br: ConvBranch | None = getattr(block, name)
        if br is None:
            continue
        pad = 1 if br.kernel == 3 else 0
        y = ad.conv2d(x, br.weight, br.bias, block.stride, pad).data
        if br.bn is not None:
            y = br.bn.apply(y)
        out = y if out is None else out + y
    if block.identity is not None:
        y = block.identity.bn.apply(x) if block.identity.bn is not None else x
        out = y if out is None else out + y
    if block.post_bn is not None:
        out = block.post_bn.apply(out)
    return np.maximum(out, 0).astype(np.float32)


def head_forward_fp(head: Head, feat: np.ndarray) -> np.ndarray:
    return ad.linear(ad.gap(feat), head.weight, head.bias).data


def forward_fp(graph: ModelGraph, x: np.ndarray, cache_intermediates: bool = False):
    """Full-precision forward.

    Returns ``logits`` or, with ``cache_intermediates``, ``(logits, cache)``
    where ``cache["blocks"][s][k]`` is block k's post-ReLU output in stage s
    and ``cache["stages"][s]`` the stage output.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[1:] != tuple(graph.input_shape):
        raise ad.ShapeError(f"input shape {x.shape[1:]} != model input {graph.input_shape}")
    blocks_cache, stages_cache = [], []
    h = x
    for stage in graph.stages:
        outs = []
        for block in stage.blocks:
            h = block_forward_fp(block, h)
            if cache_intermediates:
                outs.append(h)
        if cache_intermediates:
            blocks_cache.append(outs)
            stages_cache.append(h)
    logits = head_forward_fp(graph.head, h)
    if cache_intermediates:
        return logits, {"blocks": blocks_cache, "stages": stages_cache}
    return logits


def batched(fn, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Apply ``fn`` over leading-axis chunks and concatenate."""
    return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

_BLOCK_KEYS = {"in_channels", "out_channels", "stride", "norm", "branches", "fused", "affine",
               "quant", "groups"}
_TOP_KEYS = {"format", "name", "input_shape", "num_classes", "stages"}


def _block_to_dict(b: Block) -> dict:
    d = {
        "in_channels": b.in_channels,
        "out_channels": b.out_channels,
        "stride": b.stride,
        "norm": b.norm,
        "branches": b.branch_names(),
        "fused": b.fused is not None,
        "affine": None if b.affine is None else {"enabled": b.affine.enabled},
        "quant": None,
    }
    if b.w_quant is not None or b.a_quant is not None:
        d["quant"] = {
            "w_bits": b.w_quant.bits if b.w_quant else None,
            "a_bits": b.a_quant.bits if b.a_quant else None,
        }
    return d


def manifest_dict(graph: ModelGraph) -> dict:
    head_q = None
    if graph.head.w_quant is not None:
        head_q = {"w_bits": graph.head.w_quant.bits,
                  "a_bits": graph.head.a_quant.bits if graph.head.a_quant else None}
    return {
        "format": MANIFEST_FORMAT,
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "num_classes": graph.num_classes,
        "stages": [{"blocks": [_block_to_dict(b) for b in st.blocks]} for st in graph.stages],
        "head": {"in_features": int(graph.head.weight.shape[1]), "quant": head_q},
    }


def dumps_manifest(graph: ModelGraph) -> str:
    return json.dumps(manifest_dict(graph), indent=2, sort_keys=True) + "\n"


def save_manifest(graph: ModelGraph, path) -> None:
    Path(path).write_text(dumps_manifest(graph))


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ManifestError(f"{where}: missing field {key!r}")
    return d[key]


def graph_from_manifest(doc: dict) -> ModelGraph:
    """Build a zero-weight graph skeleton from a parsed manifest document."""
    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"format: unsupported manifest version {doc.get('format')!r}")
    unknown = set(doc) - _TOP_KEYS - {"head"}
    if unknown:
        raise ManifestError(f"<root>: unknown field(s) {sorted(unknown)}")
    input_shape = tuple(int(v) for v in _require(doc, "input_shape", "<root>"))
    k = int(_require(doc, "num_classes", "<root>"))
    stages = []
    for si, sd in enumerate(_require(doc, "stages", "<root>")):
        extra = set(sd) - {"blocks"}
        if extra:
            raise ManifestError(f"stages[{si}]: unknown field(s) {sorted(extra)}")
        blocks = []
        for bi, bd in enumerate(_require(sd, "blocks", f"stages[{si}]")):
            where = f"stages[{si}].blocks[{bi}]"
            extra = set(bd) - _BLOCK_KEYS
            if extra:
                raise ManifestError(f"{where}: unknown field(s) {sorted(extra)}")
            if bd.get("groups", 1) != 1:
                raise ManifestError(f"{where}: grouped/depth-wise convolutions are not supported")
            cin, cout = int(_require(bd, "in_channels", where)), int(_require(bd, "out_channels", where))
            stride, norm = int(_require(bd, "stride", where)), _require(bd, "norm", where)
            branches = _require(bd, "branches", where)
            for name in branches:
                if name not in ("conv3x3", "conv1x1", "identity"):
                    raise ManifestError(f"{where}: unknown branch {name!r}")
            b = Block(cin, cout, stride, norm)
            pre = norm == "pre-add"

            def z(*shape):
                return np.zeros(shape, np.float32)

            if "conv3x3" in branches:
                b.conv3x3 = ConvBranch(z(cout, cin, 3, 3), z(cout), BatchNormStats.identity(cout) if pre else None)
            if "conv1x1" in branches:
                b.conv1x1 = ConvBranch(z(cout, cin, 1, 1), z(cout), BatchNormStats.identity(cout) if pre else None)
            if "identity" in branches:
                b.identity = IdentityBranch(BatchNormStats.identity(cout) if pre else None)
            if not pre and branches:
                b.post_bn = BatchNormStats.identity(cout)
            if bd.get("fused"):
                b.fused = FusedConv(z(cout, cin, 3, 3), z(cout), list(branches))
            if bd.get("affine"):
                b.affine = QPRepAffine.identity(cout)
                b.affine.enabled = bool(bd["affine"].get("enabled", True))
            q = bd.get("quant")
            if q:
                if q.get("w_bits"):
                    b.w_quant = WeightQuantParams(int(q["w_bits"]), np.ones(cout, np.float32))
                if q.get("a_bits"):
                    b.a_quant = ActQuantParams(int(q["a_bits"]), 0.0, 1.0, frozen=True)
            b.validate(where)
            blocks.append(b)
        stages.append(Stage(blocks))
    c = stages[-1].blocks[-1].out_channels if stages else input_shape[0]
    head = Head(np.zeros((k, c), np.float32), np.zeros(k, np.float32))
    hq = (doc.get("head") or {}).get("quant")
    if hq:
        head.w_quant = WeightQuantParams(int(hq["w_bits"]), np.ones(1, np.float32))
        if hq.get("a_bits"):
            head.a_quant = ActQuantParams(int(hq["a_bits"]), 0.0, 1.0, frozen=True)
    g = ModelGraph(doc.get("name", "model"), input_shape, stages, head)
    g.validate()
    return g


def load_manifest(path) -> ModelGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    return graph_from_manifest(doc)


# ---------------------------------------------------------------------------
# weights container
# ---------------------------------------------------------------------------

def _bn_tensors(prefix: str, bn: BatchNormStats | None, out: dict) -> None:
    if bn is None:
        return
    out[f"{prefix}.gamma"] = bn.gamma
    out[f"{prefix}.beta"] = bn.beta
    out[f"{prefix}.running_mean"] = bn.running_mean
    out[f"{prefix}.running_var"] = bn.running_var
    out[f"{prefix}.eps"] = np.array([bn.eps], np.float32)


def _act_tensors(prefix: str, q: ActQuantParams, out: dict) -> None:
    out[f"__quant__/{prefix}.act_range"] = np.array([q.x_min, q.x_max], np.float32)
    out[f"__quant__/{prefix}.act_eta"] = q.eta
    out[f"__quant__/{prefix}.act_eps"] = q.eps


def named_tensors(graph: ModelGraph) -> dict[str, np.ndarray]:
    """Flat name -> array table of every tensor the manifest implies."""
    out: dict[str, np.ndarray] = {}
    for si, bi, b in graph.blocks():
        p = f"s{si}.b{bi}"
        for name in ("conv3x3", "conv1x1"):
            br = getattr(b, name)
            if br is None:
                continue
            out[f"{p}.{name}.weight"] = br.weight
            if br.bias is not None:
                out[f"{p}.{name}.bias"] = br.bias
            _bn_tensors(f"{p}.{name}.bn", br.bn, out)
        if b.identity is not None:
            _bn_tensors(f"{p}.identity.bn", b.identity.bn, out)
        _bn_tensors(f"{p}.post_bn", b.post_bn, out)
        if b.fused is not None:
            out[f"{p}.fused.weight"] = b.fused.weight
            out[f"{p}.fused.bias"] = b.fused.bias
        if b.affine is not None:
            out[f"{p}.affine.gain"] = b.affine.gain
            out[f"{p}.affine.shift"] = b.affine.shift
        if b.w_quant is not None:
            out[f"__quant__/{p}.w_scale"] = b.w_quant.scale
        if b.a_quant is not None:
            _act_tensors(p, b.a_quant, out)
    out["head.weight"] = graph.head.weight
    out["head.bias"] = graph.head.bias
    if graph.head.w_quant is not None:
        out["__quant__/head.w_scale"] = graph.head.w_quant.scale
    if graph.head.a_quant is not None:
        _act_tensors("head", graph.head.a_quant, out)
    return out


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_tensor_file(tensors: dict[str, np.ndarray], path) -> None:
    """Serialize ``tensors`` (insertion order) into the RAPQ container.

    Layout: magic ``RAPQ``, u32 version, u32 count, then per tensor
    ``u32 name_len, name, u32 dtype(0=f32), u32 rank, u32 extents..., u64 offset``;
    payloads are little-endian f32 at 64-byte-aligned absolute offsets.
    """
    items = [(k, np.ascontiguousarray(v, dtype="<f4")) for k, v in tensors.items()]
    table_size = 12
    for name, arr in items:
        table_size += 4 + len(name.encode()) + 8 + 4 * arr.ndim + 8
    offset = _align(table_size)
    header = bytearray(WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(items)))
    offsets = []
    for name, arr in items:
        nb = name.encode()
        header += struct.pack("<I", len(nb)) + nb
        header += struct.pack("<II", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", offset)
        offsets.append(offset)
        offset = _align(offset + arr.nbytes)
    with open(path, "wb") as f:
        f.write(header)
        for (name, arr), off in zip(items, offsets):
            f.write(b"\0" * (off - f.tell()))
            f.write(arr.tobytes())


def read_tensor_file(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"{path}: unsupported weights version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        dtype, rank = struct.unpack_from("<II", buf, pos)
        pos += 8
        if dtype != 0:
            raise WeightsError(f"{path}: tensor {name!r} has unsupported dtype code {dtype}")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        n = int(np.prod(shape)) if rank else 1
        if off + 4 * n > len(buf):
            raise WeightsError(f"{path}: tensor {name!r} payload truncated")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
    return out


def save_weights(graph: ModelGraph, path) -> None:
    write_tensor_file(named_tensors(graph), path)


def load_weights(graph: ModelGraph, path) -> ModelGraph:
    """Fill ``graph`` in place from a weights file written for the same manifest."""
    table = read_tensor_file(path)
    for name, slot in named_tensors(graph).items():
        if name not in table:
            raise MissingTensorError(f"missing tensor {name!r} in {path}")
        arr = table[name]
        if arr.shape != slot.shape:
            raise TensorShapeError(f"tensor {name!r}: shape {arr.shape} != expected {slot.shape}")
        _assign(graph, name, arr)
    return graph


def _assign(graph: ModelGraph, name: str, arr: np.ndarray) -> None:
    quant = name.startswith("__quant__/")
    key = name[len("__quant__/"):] if quant else name
    parts = key.split(".")
    if parts[0] == "head":
        obj, rest = graph.head, parts[1:]
    else:
        si, bi = int(parts[0][1:]), int(parts[1][1:])
        obj, rest = graph.stages[si].blocks[bi], parts[2:]
    if quant:
        field_name = rest[0]
        if field_name == "w_scale":
            obj.w_quant.scale = arr.reshape(-1).copy()
        elif field_name == "act_range":
            obj.a_quant.x_min, obj.a_quant.x_max = float(arr[0]), float(arr[1])
            obj.a_quant.frozen = bool(arr[0] < arr[1])
        elif field_name == "act_eta":
            obj.a_quant.eta = arr.copy()
        elif field_name == "act_eps":
            obj.a_quant.eps = arr.copy()
        return
    for p in rest[:-1]:
        obj = getattr(obj, p)
    leaf = rest[-1]
    if leaf == "eps":
        obj.eps = float(arr[0])
    else:
        setattr(obj, leaf, arr.copy())


def save_model(graph: ModelGraph, directory, stem: str = "model") -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m, w = d / f"{stem}.json", d / f"{stem}.rapq"
    save_manifest(graph, m)
    save_weights(graph, w)
    return m, w


def load_model(manifest_path, weights_path) -> ModelGraph:
    return load_weights(load_manifest(manifest_path), weights_path)
