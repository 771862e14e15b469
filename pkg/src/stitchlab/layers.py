"""Stateful layer wrappers around the kernels in :mod:`stitchlab.tensor_core`.

Each layer caches what its backward pass needs during ``forward`` and writes
parameter gradients into ``self.grads`` during ``backward``.  Parameters and
BN running statistics are exposed as dicts of live arrays so that optimizers
and checkpoints can update them in place.
"""
from __future__ import annotations

import numpy as np

from . import tensor_core as tc


class Layer:
    name = "layer"

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dy, param_grads: bool = True):
        raise NotImplementedError


class Conv2d(Layer):
    name = "conv"

    def __init__(self, weight, bias=None, stride: int = 1, padding: int = 0):
        super().__init__()
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self._x = None

    @classmethod
    def kaiming(cls, rng, c_in, c_out, k, stride=1, padding=0, bias=False, dtype=np.float32):
        fan_in = c_in * k * k
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        b = np.zeros(c_out, dtype=dtype) if bias else None
        return cls(w.astype(dtype), b, stride, padding)

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, train=False):
        self._x = x
        return tc.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def backward(self, dy, param_grads=True):
        dx, dw, db = tc.conv2d_backward(dy, self._x, self.weight, self.stride, self.padding)
        if param_grads:
            self.grads = {"weight": dw}
            if self.bias is not None:
                self.grads["bias"] = db
        return dx


class BatchNorm(Layer):
    """BatchNorm over channels of NC or NCHW input."""

    name = "bn"

    def __init__(self, channels: int, dtype=np.float32, momentum=tc.BN_MOMENTUM,
                 epsilon=tc.BN_EPSILON):
        super().__init__()
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        y, self._cache = tc.batchnorm(x, self.gamma, self.beta, self.running_mean,
                                      self.running_var, train, self.momentum, self.epsilon)
        return y

    def backward(self, dy, param_grads=True):
        dx, dg, db = tc.batchnorm_backward(dy, self.gamma, self._cache)
        if param_grads:
            self.grads = {"gamma": dg, "beta": db}
        return dx

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode map as ``y = scale * x + shift`` (float64)."""
        scale = self.gamma.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64)
                                                        + self.epsilon)
        shift = self.beta.astype(np.float64) - self.running_mean.astype(np.float64) * scale
        return scale, shift


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        self._x = x
        return tc.relu(x)

    def backward(self, dy, param_grads=True):
        return tc.relu_backward(dy, self._x)


class MaxPool(Layer):
    name = "pool"

    def __init__(self, k: int = 2):
        super().__init__()
        self.k = k

    def forward(self, x, train=False):
        y, self._idx = tc.maxpool2d(x, self.k)
        return y

    def backward(self, dy, param_grads=True):
        return tc.maxpool2d_backward(dy, self._idx, self.k)


class GlobalAvgPool(Layer):
    name = "gap"

    def forward(self, x, train=False):
        self._shape = x.shape
        return tc.global_avg_pool(x)

    def backward(self, dy, param_grads=True):
        return tc.global_avg_pool_backward(dy, self._shape)


class Linear(Layer):
    name = "fc"

    def __init__(self, weight, bias):
        super().__init__()
        self.weight = weight
        self.bias = bias

    @classmethod
    def kaiming(cls, rng, d_in, d_out, dtype=np.float32):
        w = rng.standard_normal((d_out, d_in)) * np.sqrt(1.0 / d_in)
        return cls(w.astype(dtype), np.zeros(d_out, dtype=dtype))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        self._x = x
        return tc.matmul(x, self.weight, self.bias)

    def backward(self, dy, param_grads=True):
        dx, dw, db = tc.matmul_backward(dy, self._x, self.weight)
        if param_grads:
            self.grads = {"weight": dw, "bias": db}
        return dx


class Sequential(Layer):
    """Named chain of layers; parameter names are ``<child>.<param>``."""

    def __init__(self, children: dict[str, Layer]):
        super().__init__()
        self.children = dict(children)

    def _collect(self, attr):
        out = {}
        for cname, child in self.children.items():
            for k, v in getattr(child, attr)().items():
                out[f"{cname}.{k}"] = v
        return out

    def params(self):
        return self._collect("params")

    def buffers(self):
        return self._collect("buffers")

    def collect_grads(self):
        out = {}
        for cname, child in self.children.items():
            sub = child.collect_grads() if hasattr(child, "collect_grads") else child.grads
            for k, v in sub.items():
                out[f"{cname}.{k}"] = v
        return out

    @property
    def grads(self):
        return self.collect_grads()

    @grads.setter
    def grads(self, value):
        pass

    def forward(self, x, train=False):
        for child in self.children.values():
            x = child.forward(x, train)
        return x

    def backward(self, dy, param_grads=True):
        for child in reversed(list(self.children.values())):
            dy = child.backward(dy, param_grads)
        return dy


class ResidualBlock(Sequential):
    """``relu(bn2(conv2(relu(bn1(conv1(x))))) + bn_s(shortcut(x)))``.

    Both branches open with a 1×1 convolution so that a per-pixel affine map
    applied to the block input can be absorbed exactly.
    """

    def __init__(self, rng, c_in, c_out, stride, dtype=np.float32):
        super().__init__({
            "conv1": Conv2d.kaiming(rng, c_in, c_out, 1, dtype=dtype),
            "bn1": BatchNorm(c_out, dtype),
            "relu1": ReLU(),
            "conv2": Conv2d.kaiming(rng, c_out, c_out, 3, stride=stride, padding=1, dtype=dtype),
            "bn2": BatchNorm(c_out, dtype),
            "shortcut": Conv2d.kaiming(rng, c_in, c_out, 1, stride=stride, dtype=dtype),
            "bn_s": BatchNorm(c_out, dtype),
            "relu_out": ReLU(),
        })

    def forward(self, x, train=False):
        ch = self.children
        h = ch["relu1"].forward(ch["bn1"].forward(ch["conv1"].forward(x, train), train), train)
        h = ch["bn2"].forward(ch["conv2"].forward(h, train), train)
        s = ch["bn_s"].forward(ch["shortcut"].forward(x, train), train)
        return ch["relu_out"].forward(h + s, train)

    def backward(self, dy, param_grads=True):
        ch = self.children
        g = ch["relu_out"].backward(dy, param_grads)
        gs = ch["shortcut"].backward(ch["bn_s"].backward(g, param_grads), param_grads)
        gh = ch["bn2"].backward(g, param_grads)
        gh = ch["conv2"].backward(gh, param_grads)
        gh = ch["relu1"].backward(gh, param_grads)
        gh = ch["bn1"].backward(gh, param_grads)
        gh = ch["conv1"].backward(gh, param_grads)
        return gh + gs


class Stitcher(Sequential):
    """Trainable map between two representations: optional BN, k×k conv, optional BN.

    ``training`` is True while the stitcher is being optimised; folding
    requires it to be False so that both BN layers act as fixed affine maps.
    """

    def __init__(self, weight, bias, bn_before: bool, bn_after: bool, trainable: bool = True):
        c_out, c_in, k, _ = weight.shape
        children: dict[str, Layer] = {}
        if bn_before:
            children["bn_in"] = BatchNorm(c_in, weight.dtype)
        children["conv"] = Conv2d(weight, bias, stride=1, padding=k // 2)
        if bn_after:
            children["bn_out"] = BatchNorm(c_out, weight.dtype)
        super().__init__(children)
        self.trainable = trainable
        self.training = False

    @property
    def conv(self) -> Conv2d:
        return self.children["conv"]

    @property
    def kernel_size(self) -> int:
        return self.conv.weight.shape[2]

    def params(self):
        return super().params() if self.trainable else {}

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode 1×1 stitcher as ``M @ x + t`` per pixel (float64)."""
        if self.kernel_size != 1:
            raise ValueError("only 1x1 stitchers are per-pixel affine maps")
        w = self.conv.weight[:, :, 0, 0].astype(np.float64)
        b = (np.zeros(w.shape[0]) if self.conv.bias is None
             else self.conv.bias.astype(np.float64))
        c_in = w.shape[1]
        a1, c1 = (np.ones(c_in), np.zeros(c_in))
        if "bn_in" in self.children:
            a1, c1 = self.children["bn_in"].affine()
        m = w * a1[None, :]
        t = w @ c1 + b
        if "bn_out" in self.children:
            a2, c2 = self.children["bn_out"].affine()
            m = a2[:, None] * m
            t = a2 * t + c2
        return m, t
