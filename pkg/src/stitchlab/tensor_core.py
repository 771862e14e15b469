"""Dense NCHW kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects.  Training runs in float32;
passing float64 arrays switches every kernel into the 64-bit checking mode
used by the gradient oracles.  Reductions that feed statistics (BN batch
moments, loss averages) accumulate in float64 regardless of input dtype.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with a kernel's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def _out_extent(size: int, k: int, stride: int, padding: int, dim: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(
            f"{dim}: extent {size} with padding {padding} is smaller than kernel {k}"
        )
    return span // stride + 1


def conv_output_shape(input_shape, weight_shape, stride: int, padding: int) -> tuple[int, ...]:
    if len(input_shape) != 4:
        raise ShapeError(f"input must be NCHW, got rank {len(input_shape)}")
    if len(weight_shape) != 4:
        raise ShapeError(f"weight must be [Co,Ci,kh,kw], got rank {len(weight_shape)}")
    n, c, h, w = input_shape
    co, ci, kh, kw = weight_shape
    if ci != c:
        raise ShapeError(f"channels: input has {c}, weight expects {ci}")
    if kh < 1 or kw < 1:
        raise ShapeError("kernel height/width must be >= 1")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    return (n, co, _out_extent(h, kh, stride, padding, "height"),
            _out_extent(w, kw, stride, padding, "width"))


def _windows(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    # (N, C, Ho, Wo, kh, kw) strided view; no copy until contracted
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with a [Co, Ci, kh, kw] kernel (im2col + GEMM)."""
    n, co, ho, wo = conv_output_shape(x.shape, weight.shape, stride, padding)
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias: expected shape ({co},), got {bias.shape}")
    _, ci, kh, kw = weight.shape
    if kh == 1 and kw == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        y = np.einsum("oc,nchw->nohw", weight[:, :, 0, 0], xs, optimize=True)
    else:
        cols = _windows(x, kh, kw, stride, padding)
        cols = cols.transpose(1, 4, 5, 0, 2, 3).reshape(ci * kh * kw, n * ho * wo)
        y = (weight.reshape(co, -1) @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv2d_direct(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                  stride: int = 1, padding: int = 0) -> Tensor:
    """Six-loop direct summation; slow reference used only by tests."""
    n, co, ho, wo = conv_output_shape(x.shape, weight.shape, stride, padding)
    _, ci, kh, kw = weight.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    y = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(ci):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[b, c, i * stride + p, j * stride + q] * weight[o, c, p, q]
                    y[b, o, i, j] = acc
    return y


def conv2d_backward(grad_out: Tensor, x: Tensor, weight: Tensor, stride: int = 1,
                    padding: int = 0) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of :func:`conv2d` with respect to input, weight and bias."""
    expected = conv_output_shape(x.shape, weight.shape, stride, padding)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out: expected shape {expected}, got {grad_out.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    _, _, ho, wo = expected
    grad_bias = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        grad_weight = np.einsum("nohw,nchw->oc", grad_out, xs, optimize=True)[:, :, None, None]
        gxs = np.einsum("oc,nohw->nchw", weight[:, :, 0, 0], grad_out, optimize=True)
        if stride > 1:
            grad_x = np.zeros_like(x)
            grad_x[:, :, ::stride, ::stride] = gxs
        else:
            grad_x = gxs
        return (np.ascontiguousarray(grad_x, dtype=x.dtype),
                np.ascontiguousarray(grad_weight, dtype=x.dtype), grad_bias)

    gy = grad_out.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
    cols = _windows(x, kh, kw, stride, padding)
    cols = cols.transpose(1, 4, 5, 0, 2, 3).reshape(ci * kh * kw, n * ho * wo)
    grad_weight = (gy @ cols.T).reshape(co, ci, kh, kw)

    # channel-major scratch so each kernel tap scatters a contiguous slab
    dcols = (weight.reshape(co, -1).T @ gy).reshape(ci, kh, kw, n, ho, wo)
    gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            gxp[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride] += dcols[:, p, q]
    gxp = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
    grad_x = gxp.transpose(1, 0, 2, 3)
    return (np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_weight, dtype=x.dtype),
            grad_bias)


@dataclass
class BNCache:
    xhat: Tensor
    inv_std: Tensor
    train: bool


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
              running_var: Tensor, train: bool, momentum: float = BN_MOMENTUM,
              epsilon: float = BN_EPSILON) -> tuple[Tensor, BNCache]:
    """Per-channel batch normalisation over (N, H, W).

    In train mode the running statistics are updated in place with
    ``running = (1 - momentum) * running + momentum * batch`` (unbiased
    variance for the running estimate, biased variance for normalising).
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects NC or NCHW input, got rank {x.ndim}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"{name}: expected length {c}, got shape {t.shape}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if train:
        count = x.size // c
        if count == 0:
            raise ShapeError("batchnorm in train mode needs a non-empty batch")
        mean = x.mean(axis=axes, dtype=np.float64)
        var = ((x - mean.reshape(bshape)) ** 2).mean(axis=axes, dtype=np.float64)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += (momentum * mean).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += (momentum * unbiased).astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(bshape)) * inv_std.reshape(bshape)
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y.astype(x.dtype, copy=False), BNCache(xhat, inv_std, train)


def batchnorm_backward(grad_out: Tensor, gamma: Tensor,
                       cache: BNCache) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_input, grad_gamma, grad_beta)."""
    xhat = cache.xhat
    c = xhat.shape[1]
    axes = (0,) if xhat.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if xhat.ndim == 2 else (1, c, 1, 1)
    grad_beta = grad_out.sum(axis=axes, dtype=np.float64)
    grad_gamma = (grad_out * xhat).sum(axis=axes, dtype=np.float64)
    scale = (gamma * cache.inv_std).reshape(bshape)
    if cache.train:
        m = xhat.size // c
        mean_g = (grad_beta / m).astype(xhat.dtype).reshape(bshape)
        mean_gx = (grad_gamma / m).astype(xhat.dtype).reshape(bshape)
        grad_x = scale * (grad_out - mean_g - xhat * mean_gx)
    else:
        grad_x = grad_out * scale
    dt = xhat.dtype
    return grad_x.astype(dt, copy=False), grad_gamma.astype(dt), grad_beta.astype(dt)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0, dtype=x.dtype)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    return grad_out * (x > 0)


def matmul(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Dense layer ``x @ w.T + b`` with ``w`` stored as [out, in]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"matmul: cannot apply weight {w.shape} to input {x.shape}")
    y = x @ w.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias: expected shape ({w.shape[0]},), got {b.shape}")
        y = y + b
    return y


def matmul_backward(grad_out: Tensor, x: Tensor, w: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0, dtype=np.float64).astype(x.dtype)


def maxpool2d(x: Tensor, k: int = 2) -> tuple[Tensor, Tensor]:
    """Non-overlapping k×k max pooling; returns (output, argmax mask)."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial dims {h}x{w} not divisible by {k}")
    blocks = x.reshape(n, c, h // k, k, w // k, k)
    y = blocks.max(axis=(3, 5))
    # first maximal element per window wins, so gradients never double count
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = flat.argmax(axis=-1)
    return y, idx


def maxpool2d_backward(grad_out: Tensor, idx: Tensor, k: int = 2) -> Tensor:
    n, c, ho, wo = grad_out.shape
    g = np.zeros((n, c, ho, wo, k * k), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(n, c, ho * k, wo * k)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(grad_out: Tensor, input_shape) -> Tensor:
    n, c, h, w = input_shape
    g = grad_out.reshape(n, c, 1, 1) / (h * w)
    return np.broadcast_to(g, input_shape).astype(grad_out.dtype)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels: expected shape ({n},), got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def predict(logits: Tensor) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits, axis=1)


@dataclass
class GradCheckReport:
    layer: str
    max_rel_error: float
    tolerance: float
    per_tensor: dict
    skipped: int = 0        # entries whose stencil crossed a ReLU / max-pool switch

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _switch_layers(layer) -> list:
    found = []
    if hasattr(layer, "_idx") or type(layer).__name__ in ("ReLU", "MaxPool"):
        found.append(layer)
    for child in getattr(layer, "children", {}).values():
        found.extend(_switch_layers(child))
    return found


def _switch_state(layers) -> list:
    return [l._x > 0 if hasattr(l, "_x") else l._idx.copy() for l in layers]


def grad_check(layer, x: Tensor, step: float | None = None, train: bool = True,
               tolerance: float | None = None, seed: int = 0) -> GradCheckReport:
    """Compare a layer's analytic gradients against central differences.

    ``layer`` must expose ``forward(x, train)``, ``backward(dy) -> dx``,
    ``params()`` (name -> array, perturbed in place) and ``grads``.  The probe
    loss is ``sum(forward(x) * R)`` for a fixed random ``R``; BN running
    statistics are restored after every probe evaluation.

    Per tensor the error is ``||analytic - numeric|| / max(||analytic||,
    ||numeric||, 0.01 * G)`` where ``G`` is the largest gradient norm over all
    checked tensors, so that identically-zero gradients (a bias feeding a
    train-mode BN) are judged against the layer's gradient scale rather than
    against rounding noise.  Entries whose ``±step`` evaluations flip a ReLU
    sign or a max-pool winner are not differentiable at that resolution and
    are left out of the comparison.
    """
    x = np.array(x, copy=True)
    is64 = x.dtype == np.float64
    if step is None:
        step = 1e-6 if is64 else 1e-3
    if tolerance is None:
        tolerance = 1e-6 if is64 else 1e-3
    buffers = layer.buffers() if hasattr(layer, "buffers") else {}
    saved = {k: v.copy() for k, v in buffers.items()}
    switches = _switch_layers(layer)

    def restore():
        for k, v in saved.items():
            buffers[k][...] = v

    y = layer.forward(x, train)
    restore()
    base = _switch_state(switches)
    r = np.random.default_rng(seed).standard_normal(y.shape).astype(x.dtype)
    dx = layer.backward(r)
    analytic = {"input": np.asarray(dx, dtype=np.float64)}
    analytic.update({k: np.asarray(v, dtype=np.float64) for k, v in layer.grads.items()})

    def loss() -> tuple[float, bool]:
        out = layer.forward(x, train)
        restore()
        same = all(np.array_equal(a, b) for a, b in zip(base, _switch_state(switches)))
        return float(np.sum(out.astype(np.float64) * r)), same

    targets = {"input": x}
    targets.update(layer.params())
    numeric, skipped = {}, 0
    for name, t in targets.items():
        num = np.zeros(t.shape, dtype=np.float64)
        flat, nflat, aflat = t.reshape(-1), num.reshape(-1), analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, ok_p = loss()
            flat[i] = orig - step
            lm, ok_m = loss()
            flat[i] = orig
            if ok_p and ok_m:
                nflat[i] = (lp - lm) / (2 * step)
            else:
                nflat[i] = aflat[i]
                skipped += 1
        numeric[name] = num
    scale = max(max(np.linalg.norm(analytic[k]), np.linalg.norm(numeric[k])) for k in numeric)
    errors = {}
    for k in numeric:
        a, n = analytic[k], numeric[k]
        den = max(np.linalg.norm(a), np.linalg.norm(n), 0.01 * scale, 1e-30)
        errors[k] = float(np.linalg.norm(a - n) / den)
    name = getattr(layer, "name", type(layer).__name__)
    return GradCheckReport(name, max(errors.values()), tolerance, errors, skipped)
