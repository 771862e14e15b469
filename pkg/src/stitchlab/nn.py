"""Model construction, cut-point addressing, stitcher folding and checkpoints.

A model is an ordered list of blocks followed by a classifier head.  Cut
point ``k`` is the tensor between block ``k-1`` and block ``k``: cut 0 is the
raw input and cut ``L`` (the number of non-head blocks) is the input to the
head.  Cuts never fall inside a residual block.
"""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import (BatchNorm, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool, ReLU,
                     ResidualBlock, Sequential, Stitcher)

ARCH_FORMAT_VERSION = 1

# Hand-counted trainable parameter totals at 1x width with 10 classes.
#
# small-resnet-8:
#   stem   conv 3->16 3x3 (432) + bn (32)                                   =    464
#   block1 conv1 16->16 1x1 (256) + bn (32) + conv2 16->16 3x3 (2304)
#          + bn (32) + shortcut 16->16 (256) + bn (32)                      =   2912
#   block2 512 + 64 + 9216 + 64 + 512 + 64                                  =  10432
#   block3 2048 + 128 + 36864 + 128 + 2048 + 128                            =  41344
#   head   fc 64->10 (640 + 10)                                             =    650
#                                                                     total =  55802
# plain-cnn-5:
#   conv 3->16 (432+32), 16->32 (4608+64), 32->64 (18432+128),
#   64->128 (73728+256), fc 128->10 (1290)                            total =  98970
ARCHITECTURES = {
    "small-resnet-8": {
        "version": ARCH_FORMAT_VERSION,
        "base_width": 16,
        "stages": [1, 2, 4],
        "stem": {"kernel": 3, "stride": 2, "padding": 0},
        "block": "conv1x1-bn-relu, conv3x3(stride)-bn | conv1x1(stride)-bn, add, relu",
        "head": "global average pool + linear",
        "param_count_1x_10_classes": 55802,
    },
    "plain-cnn-5": {
        "version": ARCH_FORMAT_VERSION,
        "base_width": 16,
        "stages": [1, 2, 4, 8],
        "block": "conv3x3(pad 1)-bn-relu-maxpool2",
        "head": "global average pool + linear",
        "param_count_1x_10_classes": 98970,
    },
}

WIDTHS = (0.25, 0.5, 1.0, 2.0)


class ArchitectureError(ValueError):
    pass


class CutError(IndexError):
    pass


class FoldError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    arch_id: str = "small-resnet-8"
    width: float = 1.0
    in_shape: tuple = (3, 32, 32)
    classes: int = 10

    def __post_init__(self):
        if self.arch_id not in ARCHITECTURES:
            raise ArchitectureError(f"unknown architecture id {self.arch_id!r}")
        if self.width not in WIDTHS:
            raise ArchitectureError(f"width multiplier must be one of {WIDTHS}, got {self.width}")
        if self.classes < 2:
            raise ArchitectureError("class count must be >= 2")
        object.__setattr__(self, "in_shape", tuple(self.in_shape))

    def stage_widths(self) -> list[int]:
        a = ARCHITECTURES[self.arch_id]
        return [max(1, int(round(a["base_width"] * self.width * s))) for s in a["stages"]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        return d


def dump_architecture(arch_id: str) -> str:
    if arch_id not in ARCHITECTURES:
        raise ArchitectureError(f"unknown architecture id {arch_id!r}")
    return json.dumps({"id": arch_id, **ARCHITECTURES[arch_id]}, indent=2)


class BlockChain:
    """Ordered named blocks with selective training and truncated backward.

    ``set_trainable(names)`` decides which parameters receive gradients.
    Blocks that own none of them run in eval mode even during training, and
    backward stops at the earliest trainable block.
    """

    def __init__(self, blocks: list[tuple[str, Layer]]):
        self.blocks = list(blocks)
        self._trainable: set[str] | None = None
        self._train_blocks = set(range(len(self.blocks)))

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"{b}.{k}": v for b, layer in self.blocks for k, v in layer.params().items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{b}.{k}": v for b, layer in self.blocks for k, v in layer.buffers().items()}

    def state(self) -> dict[str, np.ndarray]:
        return {**self.named_parameters(), **self.named_buffers()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def set_trainable(self, names) -> None:
        params = self.named_parameters()
        names = set(params) if names is None else set(names)
        unknown = names - set(params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)[:5]}")
        self._trainable = names
        self._train_blocks = {
            i for i, (b, layer) in enumerate(self.blocks)
            if any(f"{b}.{k}" in names for k in layer.params())
        }

    @property
    def trainable(self) -> set[str]:
        return set(self.named_parameters()) if self._trainable is None else set(self._trainable)

    def forward_blocks(self, x, start: int, stop: int, train: bool = False):
        for i in range(start, stop):
            x = self.blocks[i][1].forward(x, train and i in self._train_blocks)
        return x

    def forward(self, x, train: bool = False):
        return self.forward_blocks(x, 0, len(self.blocks), train)

    def backward(self, dy, need_input_grad: bool = False) -> dict[str, np.ndarray]:
        """Backpropagate ``dy`` from the logits; returns gradients of trainable params."""
        stop = 0 if need_input_grad or not self._train_blocks else min(self._train_blocks)
        for i in range(len(self.blocks) - 1, stop - 1, -1):
            dy = self.blocks[i][1].backward(dy, param_grads=i in self._train_blocks)
        self._input_grad = dy if stop == 0 else None
        trainable = self.trainable
        grads = {}
        for i in self._train_blocks:
            b, layer = self.blocks[i]
            g = layer.grads
            for k in layer.params():
                name = f"{b}.{k}"
                if name in trainable:
                    grads[name] = g[k]
        return grads

    def predict_logits(self, x, batch_size: int = 500):
        out = [self.forward(x[i:i + batch_size], False) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


class ModelGraph(BlockChain):
    def __init__(self, spec: ArchitectureSpec, blocks, seed: int | None = None):
        super().__init__(blocks)
        self.spec = spec
        self.seed = seed
        self.metadata: dict = {}

    @property
    def num_cuts(self) -> int:
        """L: index of the deepest cut point (the head input)."""
        return len(self.blocks) - 1

    @property
    def cut_points(self) -> list[int]:
        return list(range(self.num_cuts + 1))

    def _check_cut(self, cut: int):
        if not 0 <= cut <= self.num_cuts:
            raise CutError(f"cut {cut} out of range [0, {self.num_cuts}]")

    def activations_at(self, cut: int, x, batch_size: int = 500):
        """Eval-mode tensor at cut point ``cut`` (cut 0 is the input itself)."""
        self._check_cut(cut)
        if cut == 0:
            return x
        out = [self.forward_blocks(x[i:i + batch_size], 0, cut, False)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def forward_from(self, cut: int, act, train: bool = False):
        """Logits of the suffix that starts at cut ``cut``."""
        self._check_cut(cut)
        return self.forward_blocks(act, cut, len(self.blocks), train)

    def cut_shape(self, cut: int) -> tuple[int, ...]:
        self._check_cut(cut)
        probe = np.zeros((1, *self.spec.in_shape), dtype=self.dtype)
        return self.activations_at(cut, probe).shape[1:]

    @property
    def dtype(self):
        return next(iter(self.named_parameters().values())).dtype

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        m = self.copy()
        for _, layer in m.blocks:
            _cast_layer(layer, dtype)
        return m

    def param_count(self) -> int:
        return int(sum(v.size for v in self.named_parameters().values()))

    def block_names(self) -> list[str]:
        return [b for b, _ in self.blocks]


def _cast_layer(layer, dtype):
    for attr in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
        v = getattr(layer, attr, None)
        if isinstance(v, np.ndarray):
            setattr(layer, attr, v.astype(dtype))
    for child in getattr(layer, "children", {}).values():
        _cast_layer(child, dtype)


def _conv_bn_relu(rng, c_in, c_out, k, stride, padding, pool=False):
    children = {
        "conv": Conv2d.kaiming(rng, c_in, c_out, k, stride=stride, padding=padding),
        "bn": BatchNorm(c_out),
        "relu": ReLU(),
    }
    if pool:
        children["pool"] = MaxPool(2)
    return Sequential(children)


def _head(rng, d_in, classes):
    return Sequential({"gap": GlobalAvgPool(), "fc": Linear.kaiming(rng, d_in, classes)})


def build(spec: ArchitectureSpec, seed: int) -> ModelGraph:
    """Initialise a model: Kaiming fan-in convs, BN gamma=1/beta=0, deterministic in seed."""
    rng = np.random.default_rng(seed)
    c_in = spec.in_shape[0]
    widths = spec.stage_widths()
    if spec.arch_id == "small-resnet-8":
        stem = ARCHITECTURES[spec.arch_id]["stem"]
        blocks = [("stem", _conv_bn_relu(rng, c_in, widths[0], stem["kernel"], stem["stride"],
                                         stem["padding"]))]
        prev = widths[0]
        for i, w in enumerate(widths):
            blocks.append((f"block{i + 1}", ResidualBlock(rng, prev, w, 1 if i == 0 else 2)))
            prev = w
    elif spec.arch_id == "plain-cnn-5":
        blocks, prev = [], c_in
        for i, w in enumerate(widths):
            blocks.append((f"layer{i + 1}", _conv_bn_relu(rng, prev, w, 3, 1, 1, pool=True)))
            prev = w
    else:
        raise ArchitectureError(f"unknown architecture id {spec.arch_id!r}")
    blocks.append(("head", _head(rng, prev, spec.classes)))
    return ModelGraph(spec, blocks, seed)


def forward(model: ModelGraph, batch, train: bool = False):
    return model.forward(batch, train)


def activations_at(model: ModelGraph, cut: int, batch):
    return model.activations_at(cut, batch)


def forward_from(model: ModelGraph, cut: int, act, train: bool = False):
    return model.forward_from(cut, act, train)


# ---------------------------------------------------------------- folding

def _fold_into_conv(conv: Conv2d, bn: BatchNorm | None, m, t):
    if conv.weight.shape[2] > 1 and conv.padding > 0:
        raise FoldError("adjacent convolution is zero-padded; the stitcher offset "
                        "cannot be absorbed exactly at the borders")
    k = conv.weight.astype(np.float64)
    new_w = np.einsum("oc...,cd->od...", k, m)
    delta = k.sum(axis=(2, 3)) @ t
    dtype = conv.weight.dtype
    conv.weight = new_w.astype(dtype)
    if conv.bias is not None:
        conv.bias = (conv.bias.astype(np.float64) + delta).astype(dtype)
    elif bn is not None:
        # bn(z + delta) == bn'(z) with running_mean' = running_mean - delta (eval mode)
        bn.running_mean = (bn.running_mean.astype(np.float64) - delta).astype(dtype)
    elif np.any(delta):
        raise FoldError("convolution has neither bias nor a following BN to absorb the offset")


def fold_stitcher(top: ModelGraph, stitcher: Stitcher, cut: int) -> ModelGraph:
    """Absorb an eval-mode 1×1 stitcher into the block that follows ``cut``.

    Returns a new model with the top model's architecture whose forward equals
    ``top.forward_from(cut, stitcher(x))`` for every input ``x`` at that cut.
    """
    top._check_cut(cut)
    if stitcher.training:
        raise FoldError("stitcher must be in eval mode to be folded")
    if stitcher.kernel_size != 1:
        raise FoldError("only 1x1 stitchers can be folded")
    m, t = stitcher.affine()
    folded = top.copy()
    name, block = folded.blocks[cut]
    ch = getattr(block, "children", {})
    if isinstance(block, ResidualBlock):
        _fold_into_conv(ch["conv1"], ch["bn1"], m, t)
        _fold_into_conv(ch["shortcut"], ch["bn_s"], m, t)
    elif isinstance(block, Sequential) and isinstance(next(iter(ch.values()), None), Conv2d):
        items = list(ch.values())
        bn = items[1] if len(items) > 1 and isinstance(items[1], BatchNorm) else None
        _fold_into_conv(items[0], bn, m, t)
    elif isinstance(block, Sequential) and list(ch) == ["gap", "fc"]:
        # the per-pixel affine map commutes with spatial averaging
        fc = ch["fc"]
        w = fc.weight.astype(np.float64)
        fc.bias = (fc.bias.astype(np.float64) + w @ t).astype(fc.bias.dtype)
        fc.weight = (w @ m).astype(fc.weight.dtype)
    else:
        raise FoldError(f"block {name!r} adjacent to cut {cut} does not begin with a conv")
    folded.metadata = {**top.metadata, "folded_cut": cut}
    return folded


# ---------------------------------------------------------------- checkpoints

MAGIC = b"STCH"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4")}


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def save(model: ModelGraph, path, metadata: dict | None = None) -> None:
    """Binary layout (little endian)::

        "STCH" | u32 version | str arch_json | str metadata_json | u32 count |
        count x (str name | u8 dtype tag | u8 ndim | ndim x u32 dim | f32 payload)

    where ``str`` is a u32 byte length followed by UTF-8 bytes.
    """
    meta = {"seed": model.seed, **model.metadata, **(metadata or {})}
    arch = {"arch_id": model.spec.arch_id, **model.spec.to_dict()}
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(json.dumps(arch)),
             _pack_str(json.dumps(meta, sort_keys=True, default=str))]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts += [_pack_str(name), struct.pack("<BB", 1, a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load(path) -> ModelGraph:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a stitchlab checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} "
                              f"(expected {CHECKPOINT_VERSION})")
    arch = json.loads(r.string())
    meta = json.loads(r.string())
    spec = ArchitectureSpec(arch["arch_id"], arch["width"], tuple(arch["in_shape"]),
                            arch["classes"])
    model = build(spec, 0)
    state = model.state()
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        name = r.string()
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        if name not in state:
            raise CheckpointError(f"unexpected tensor {name!r} for {spec.arch_id}")
        if tuple(shape) != state[name].shape:
            raise CheckpointError(f"{name}: shape {tuple(shape)} does not match "
                                  f"architecture shape {state[name].shape}")
        n = int(np.prod(shape)) * 4
        state[name][...] = np.frombuffer(r.take(n), dtype="<f4").reshape(shape)
        seen.add(name)
    missing = set(state) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    model.seed = meta.get("seed")
    model.metadata = {k: v for k, v in meta.items() if k != "seed"}
    return model
