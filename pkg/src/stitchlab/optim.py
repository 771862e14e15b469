"""Optimizers, learning-rate schedules, augmentation and the training loop."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float, context: str = ""):
        where = f" in {context}" if context else ""
        super().__init__(f"training diverged{where} at step {step} (loss={loss})")
        self.step = step
        self.loss = loss
        self.context = context


@dataclass
class TrainConfig:
    optimizer: str = "sgd"              # "sgd" | "adam"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: str = "step"              # "step" | "cosine" | "constant"
    drops: tuple = ()
    drop_factor: float = 0.2
    total_steps: int = 1000
    batch_size: int = 64
    crop_padding: int = 0               # 0 disables random crop
    hflip: bool = False
    seed: int = 0
    trainable: object = "all"           # "all" | "stitcher-only" | list of names / prefixes
    frozen_bn_eval: bool = True         # blocks without trainable params keep running stats fixed
    eval_every: int = 0                 # steps between test evaluations (0: once per epoch)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.drops = tuple(int(d) for d in self.drops)
        self.validate()

    def validate(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("step", "cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(b <= a for a, b in zip(self.drops, self.drops[1:])):
            raise ValueError("drops must be strictly increasing")
        if self.drops and self.total_steps and self.drops[-1] >= self.total_steps:
            raise ValueError("drops must lie below total_steps")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["drops"] = list(self.drops)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **kw})


def lr_at(config: TrainConfig, step: int) -> float:
    if config.schedule == "constant":
        return config.lr
    if config.schedule == "cosine":
        total = max(config.total_steps, 1)
        return config.lr * (1 + math.cos(math.pi * min(step, total) / total)) / 2
    return config.lr * config.drop_factor ** sum(step >= d for d in config.drops)


def _check_shapes(params, grads, state):
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise tc.ShapeError(f"{k}: gradient shape {grads[k].shape} != param {p.shape}")
        for buf in state.get(k, {}).values():
            if isinstance(buf, np.ndarray) and buf.shape != p.shape:
                raise tc.ShapeError(f"{k}: optimizer state shape {buf.shape} != {p.shape}")


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """Heavy-ball SGD with weight decay added to the gradient (L2 term)."""
    _check_shapes(params, grads, state)
    for k, p in params.items():
        g = grads[k]
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            buf = state.setdefault(k, {}).setdefault("v", np.zeros_like(p))
            buf *= momentum
            buf += g
            g = buf
        p -= (lr * g).astype(p.dtype, copy=False)


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    _check_shapes(params, grads, state)
    b1, b2 = betas
    for k, p in params.items():
        g = grads[k]
        st = state.setdefault(k, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
        t = st.get("t", 0) + 1
        st["t"] = t
        st["m"] *= b1
        st["m"] += (1 - b1) * g
        st["v"] *= b2
        st["v"] += (1 - b2) * g * g
        mhat = st["m"] / (1 - b1 ** t)
        vhat = st["v"] / (1 - b2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


def augment(images: np.ndarray, rng: np.random.Generator, crop_padding: int = 0,
            hflip: bool = False, offsets=None, flips=None) -> np.ndarray:
    """Zero-pad by ``crop_padding`` then take a random crop of the original size;
    flip horizontally with probability 0.5.  ``offsets`` / ``flips`` force the
    random draws (used by tests)."""
    n, c, h, w = images.shape
    out = images
    if crop_padding:
        p = crop_padding
        if offsets is None:
            offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.empty_like(images)
        for i, (dy, dx) in enumerate(np.asarray(offsets).reshape(n, 2)):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if hflip:
        if flips is None:
            flips = rng.random(n) < 0.5
        flips = np.asarray(flips, dtype=bool)
        if flips.any():
            out = out.copy() if out is images else out
            out[flips] = out[flips, :, :, ::-1]
    return out


def select_trainable(model, spec) -> set[str]:
    names = list(model.named_parameters())
    if spec == "all" or spec is None:
        return set(names)
    if spec == "stitcher-only":
        return {n for n in names if n.startswith("stitcher.")}
    chosen = set()
    for pat in spec:
        chosen |= {n for n in names if n == pat or n.startswith(pat.rstrip(".") + ".")}
    return chosen


@dataclass
class History:
    rows: list = field(default_factory=list)     # (step, epoch, split, metric, value)

    def add(self, step, epoch, split, metric, value):
        if self.rows and step < self.rows[-1][0]:
            raise ValueError("history steps must be monotone")
        self.rows.append((int(step), float(epoch), split, metric, float(value)))

    def series(self, split: str, metric: str) -> list[tuple[int, float]]:
        return [(r[0], r[4]) for r in self.rows if r[2] == split and r[3] == metric]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "epoch", "split", "metric", "value"])
            w.writerows(self.rows)


def error_rate(model, images, labels, batch_size: int = 500) -> float:
    logits = model.predict_logits(images, batch_size)
    return float(np.mean(tc.predict(logits) != labels))


def evaluate(model, images, labels, batch_size: int = 500) -> tuple[float, float]:
    """(top-1 error, mean cross-entropy) in eval mode."""
    logits = model.predict_logits(images, batch_size)
    loss, _ = tc.softmax_cross_entropy(logits, labels)
    return float(np.mean(tc.predict(logits) != labels)), loss


def train(model, dataset, config: TrainConfig, test=None, history: History | None = None,
          start_step: int = 0, callback=None):
    """Run ``config.total_steps`` minibatch steps in place and return (model, history).

    ``dataset`` / ``test`` expose ``images`` and ``labels``; images may be any
    NCHW tensor the model accepts (precomputed features included).  Only the
    parameters picked by ``config.trainable`` change.  ``callback(step, model)``
    runs after every step.
    """
    history = history or History()
    if config.total_steps == 0:
        return model, history
    names = select_trainable(model, config.trainable)
    if not names and config.trainable != "stitcher-only":
        raise ValueError(f"trainable filter {config.trainable!r} matches no parameters")
    model.set_trainable(names)
    if not config.frozen_bn_eval:
        model._train_blocks = set(range(len(model.blocks)))
    params = {k: v for k, v in model.named_parameters().items() if k in names}
    if not params:
        return model, history

    rng = np.random.default_rng(config.seed)
    n = len(dataset.labels)
    bs = min(config.batch_size, n)
    steps_per_epoch = max(n // bs, 1)
    state: dict = {}
    order = rng.permutation(n)
    pos = 0
    epoch_losses = []
    for step in range(start_step, start_step + config.total_steps):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        x = dataset.images[idx]
        if config.crop_padding or config.hflip:
            x = augment(x, rng, config.crop_padding, config.hflip)
        logits = model.forward(x, train=True)
        loss, grad = tc.softmax_cross_entropy(logits, dataset.labels[idx])
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        grads = model.backward(grad)
        lr = lr_at(config, step - start_step)
        if config.optimizer == "sgd":
            sgd_step(params, grads, state, lr, config.momentum, config.weight_decay)
        else:
            adam_step(params, grads, state, lr, config.betas, config.adam_eps)
        epoch_losses.append(loss)
        done = step - start_step + 1
        at_epoch_end = done % steps_per_epoch == 0 or done == config.total_steps
        at_eval = (config.eval_every and done % config.eval_every == 0) or \
                  (not config.eval_every and at_epoch_end) or done == config.total_steps
        if at_epoch_end or at_eval:
            epoch = (step + 1) / steps_per_epoch
            if epoch_losses:
                history.add(step + 1, epoch, "train", "loss", float(np.mean(epoch_losses)))
                epoch_losses = []
            if test is not None and at_eval:
                err, _ = evaluate(model, test.images, test.labels)
                history.add(step + 1, epoch, "test", "error", err)
        if callback is not None:
            callback(step + 1, model)
    return model, history
