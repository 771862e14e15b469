"""Stitched models, stitcher fitting, stitching penalties and connectivity.

A stitched model is ``top_{>cut} ∘ s ∘ bottom_{<=cut}`` where only the
stitcher ``s`` is trainable.  The bottom is frozen, so its activations at the
cut are computed once and the stitcher is trained on those features.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import optim
from . import tensor_core as tc
from .layers import Stitcher
from .nn import BlockChain, CutError, ModelGraph

KERNEL_SIZES = (1, 3, 5, 7, 9)

# Desk-scale stitcher budget; see README for the scale-down rationale.
STITCH_BUDGET = optim.TrainConfig(optimizer="adam", lr=1e-2, schedule="cosine",
                                  total_steps=1000, batch_size=128, weight_decay=0.0,
                                  momentum=0.0, trainable="stitcher-only")


class StitchError(ValueError):
    pass


@dataclass(frozen=True)
class StitchFamily:
    kind: str = "conv"          # "identity" | "permutation" | "conv"
    kernel_size: int = 1
    bn_before: bool = True
    bn_after: bool = True
    init: str = "ls"            # "ls" | "kaiming"
    ridge: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("identity", "permutation", "conv"):
            raise StitchError(f"unknown stitching family {self.kind!r}")
        if self.kernel_size not in KERNEL_SIZES:
            raise StitchError(f"kernel size must be one of {KERNEL_SIZES}")
        if self.init not in ("ls", "kaiming"):
            raise StitchError(f"unknown stitcher init {self.init!r}")

    @property
    def name(self) -> str:
        if self.kind != "conv":
            return self.kind
        bn = ("B" if self.bn_before else "") + ("A" if self.bn_after else "")
        return f"conv{self.kernel_size}x{self.kernel_size}" + (f"-bn{bn}" if bn else "")


IDENTITY = StitchFamily("identity")
PERMUTATION = StitchFamily("permutation")
CONV1X1 = StitchFamily()


class StitchedModel(BlockChain):
    """``top`` blocks after ``cut`` fed by ``stitcher`` applied to ``bottom`` at ``cut``."""

    def __init__(self, top: ModelGraph, bottom: ModelGraph | None, cut: int,
                 stitcher: Stitcher, family: StitchFamily):
        bottom_blocks = [] if bottom is None else [(f"bottom.{b}", l) for b, l in
                                                   bottom.blocks[:cut]]
        super().__init__(bottom_blocks + [("stitcher", stitcher)] +
                         [(f"top.{b}", l) for b, l in top.blocks[cut:]])
        self.top, self.bottom, self.cut = top, bottom, cut
        self.stitcher, self.family = stitcher, family
        self.record: dict = {}

    def tail(self) -> "StitchedModel":
        """Stitcher + top suffix only; consumes precomputed bottom features."""
        return StitchedModel(self.top, None, self.cut, self.stitcher, self.family)

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for m in (self.top, self.bottom):
            if m is not None:
                h.update(m.digest().encode())
        return h.hexdigest()


def _permutation_matrix(perm, dtype) -> np.ndarray:
    w = np.zeros((len(perm), len(perm), 1, 1), dtype=dtype)
    w[np.arange(len(perm)), perm, 0, 0] = 1
    return w


def _pixels(act: np.ndarray) -> np.ndarray:
    return act.transpose(0, 2, 3, 1).reshape(-1, act.shape[1]).astype(np.float64)


def _init_stitcher(family: StitchFamily, c_in: int, c_out: int, rng,
                   xb: np.ndarray | None, xa: np.ndarray | None) -> Stitcher:
    k = family.kernel_size
    if family.kind == "identity":
        if c_in != c_out:
            raise StitchError(f"identity stitcher needs equal channels, got {c_in}->{c_out}")
        return Stitcher(_permutation_matrix(np.arange(c_in), np.float32), None,
                        False, False, trainable=False)
    if family.kind == "permutation":
        if c_in != c_out:
            raise StitchError(f"permutation stitcher needs equal channels, got {c_in}->{c_out}")
        perm = np.arange(c_in)
        if xb is not None and xa is not None:
            pb, pa = _pixels(xb), _pixels(xa)
            pb = (pb - pb.mean(0)) / (pb.std(0) + 1e-8)
            pa = (pa - pa.mean(0)) / (pa.std(0) + 1e-8)
            corr = pa.T @ pb / len(pa)               # [out channel, in channel]
            rows, cols = linear_sum_assignment(-corr)
            perm[rows] = cols
        return Stitcher(_permutation_matrix(perm, np.float32), None, False, False,
                        trainable=False)

    weight = (rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k)))
    bias = np.zeros(c_out)
    s = Stitcher(weight.astype(np.float32), bias.astype(np.float32),
                 family.bn_before, family.bn_after)
    if family.init == "ls" and xb is not None and xa is not None:
        z = _pixels(xb)
        if family.bn_before:
            mu, var = z.mean(0), z.var(0)
            bn = s.children["bn_in"]
            bn.running_mean[...] = mu
            bn.running_var[...] = var
            z = (z - mu) / np.sqrt(var + bn.epsilon)
        target = _pixels(xa)
        zc, tm = z - z.mean(0), target.mean(0)
        lam = family.ridge * len(z)
        w = np.linalg.solve(zc.T @ zc + lam * np.eye(c_in), zc.T @ (target - tm)).T
        b = tm - w @ z.mean(0)
        weight = np.zeros((c_out, c_in, k, k))
        weight[:, :, k // 2, k // 2] = w
        s.conv.weight[...] = weight
        s.conv.bias[...] = b
        if family.bn_after:
            y = z @ w.T + b
            bn = s.children["bn_out"]
            mu, var = y.mean(0), y.var(0)
            bn.running_mean[...] = mu
            bn.running_var[...] = var
            bn.gamma[...] = np.sqrt(var + bn.epsilon)
            bn.beta[...] = mu
    return s


def make_stitched(top: ModelGraph, bottom: ModelGraph, cut: int,
                  family: StitchFamily = CONV1X1, seed: int = 0, init_images=None,
                  init_size: int = 256) -> StitchedModel:
    """Build ``top_{>cut} ∘ s ∘ bottom_{<=cut}`` with a freshly initialised stitcher.

    ``init_images`` supplies the batch used for the least-squares (or
    correlation, for permutations) initialisation.
    """
    for m in (top, bottom):
        if not 0 <= cut <= m.num_cuts:
            raise CutError(f"cut {cut} out of range [0, {m.num_cuts}]")
    cb, ct = bottom.cut_shape(cut), top.cut_shape(cut)
    if cb[1:] != ct[1:]:
        raise StitchError(f"spatial mismatch at cut {cut}: bottom {cb[1:]} vs top {ct[1:]}")
    xb = xa = None
    if init_images is not None and family.kind != "identity":
        batch = init_images[:init_size]
        xb = bottom.activations_at(cut, batch)
        xa = top.activations_at(cut, batch)
    rng = np.random.default_rng(seed)
    stitcher = _init_stitcher(family, cb[0], ct[0], rng, xb, xa)
    return StitchedModel(top, bottom, cut, stitcher, family)


def make_stitched_tail(top: ModelGraph, cut: int, family: StitchFamily, seed: int,
                       init_features: np.ndarray, init_images: np.ndarray) -> StitchedModel:
    """Stitcher + top suffix fed by precomputed bottom features of any channel count.

    ``init_features`` are the bottom activations of ``init_images``.
    """
    top._check_cut(cut)
    ct = top.cut_shape(cut)
    if tuple(init_features.shape[2:]) != tuple(ct[1:]):
        raise StitchError(f"spatial mismatch at cut {cut}: features {init_features.shape[2:]} "
                          f"vs top {ct[1:]}")
    xa = top.activations_at(cut, init_images) if family.kind != "identity" else None
    stitcher = _init_stitcher(family, init_features.shape[1], ct[0],
                              np.random.default_rng(seed), init_features, xa)
    return StitchedModel(top, None, cut, stitcher, family)


@dataclass
class Features:
    """Frozen-bottom activations standing in for images in the training loop."""
    images: np.ndarray
    labels: np.ndarray


def bottom_features(sm: StitchedModel, dataset) -> Features:
    return Features(sm.bottom.activations_at(sm.cut, dataset.images), dataset.labels)


def fit_stitcher(sm: StitchedModel, train_ds, budget: optim.TrainConfig = STITCH_BUDGET,
                 train_features: Features | None = None) -> StitchedModel:
    """Optimise only the stitcher on the train set; frozen models are untouched."""
    if budget.trainable != "stitcher-only":
        raise StitchError("stitcher budgets must use trainable='stitcher-only'")
    before = sm.frozen_digest()
    sm.stitcher.training = True
    try:
        if budget.crop_padding or budget.hflip:
            _, hist = optim.train(sm, train_ds, budget)
        else:
            feats = train_features or bottom_features(sm, train_ds)
            _, hist = optim.train(sm.tail(), feats, budget)
    finally:
        sm.stitcher.training = False
    if sm.frozen_digest() != before:
        raise AssertionError("frozen bottom/top parameters changed during stitcher fit")
    losses = [v for _, v in hist.series("train", "loss")]
    sm.record = {"steps": budget.total_steps, "budget": budget.digest(),
                 "curve_digest": hashlib.sha256(np.asarray(losses).tobytes()).hexdigest()[:16],
                 "final_train_loss": losses[-1] if losses else None}
    return sm


def evaluate_stitched(sm: StitchedModel, test_ds, test_features: Features | None = None):
    if test_features is None:
        return optim.evaluate(sm, test_ds.images, test_ds.labels)
    return optim.evaluate(sm.tail(), test_features.images, test_features.labels)


@dataclass
class PenaltyReport:
    cut: int
    stitched_error: float
    top_error: float
    bottom_error: float
    penalty: float
    stitched_loss: float = float("nan")
    loss_penalty: float = float("nan")
    curve_digest: str = ""
    seed: int = 0
    family: str = "conv1x1-bnBA"

    @classmethod
    def build(cls, cut, stitched_error, top_error, bottom_error, **kw) -> "PenaltyReport":
        return cls(cut, stitched_error, top_error, bottom_error,
                   stitched_error - top_error, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def symmetrized_penalty(p_ij: PenaltyReport, p_ji: PenaltyReport) -> float:
    return (p_ij.penalty + p_ji.penalty) / 2


class EvalCache:
    """Memoises base-model test metrics and frozen-bottom features across fits."""

    def __init__(self):
        self._errors: dict = {}
        self._feats: dict = {}

    def error(self, model: ModelGraph, ds) -> tuple[float, float]:
        """Test error and loss; NaN when the model's label space differs from ``ds``
        (e.g. a coarse-label bottom evaluated on fine labels)."""
        if model.spec.classes != ds.classes:
            return float("nan"), float("nan")
        key = (model.digest(), id(ds))
        if key not in self._errors:
            self._errors[key] = optim.evaluate(model, ds.images, ds.labels)
        return self._errors[key]

    def features(self, model: ModelGraph, cut: int, ds) -> Features:
        key = (model.digest(), cut, id(ds))
        if key not in self._feats:
            self._feats[key] = Features(model.activations_at(cut, ds.images), ds.labels)
        return self._feats[key]

    def clear(self):
        self._errors.clear()
        self._feats.clear()


def penalty(top: ModelGraph, bottom: ModelGraph, cut: int, family: StitchFamily,
            train_ds, test_ds, budget: optim.TrainConfig = STITCH_BUDGET, seed: int = 0,
            cache: EvalCache | None = None, restarts: int = 1) -> PenaltyReport:
    """Stitching penalty of ``bottom``'s representation at ``cut`` w.r.t. ``top``.

    With ``restarts > 1`` the best stitcher by train loss is kept.
    """
    cache = cache or EvalCache()
    top_err, top_loss = cache.error(top, test_ds)
    bottom_err, _ = cache.error(bottom, test_ds)
    aug = budget.crop_padding or budget.hflip
    ftrain = None if aug else cache.features(bottom, cut, train_ds)
    best = None
    for r in range(restarts):
        s = seed + 1000 * r
        sm = make_stitched(top, bottom, cut, family, seed=s, init_images=train_ds.images)
        if sm.stitcher.trainable:
            fit_stitcher(sm, train_ds, budget.replace(seed=s), train_features=ftrain)
        if best is None or (sm.record.get("final_train_loss") or 0) < \
                (best.record.get("final_train_loss") or 0):
            best = sm
    ftest = None if aug else cache.features(bottom, cut, test_ds)
    err, loss = evaluate_stitched(best, test_ds, ftest)
    return PenaltyReport.build(cut, err, top_err, bottom_err, stitched_loss=loss,
                               loss_penalty=loss - top_loss,
                               curve_digest=best.record.get("curve_digest", ""),
                               seed=seed, family=family.name)


@dataclass
class ConnectivityReport:
    reports: list                        # PenaltyReport per cut 0..L (seed-averaged)
    threshold: float
    per_seed: list = field(default_factory=list)

    @property
    def penalties(self) -> list[float]:
        return [r.penalty for r in self.reports]

    @property
    def errors(self) -> list[float]:
        return [r.stitched_error for r in self.reports]

    @property
    def max_penalty(self) -> float:
        return max(self.penalties)

    @property
    def max_intermediate_error(self) -> float:
        return max(self.errors)

    @property
    def passed(self) -> bool:
        return self.max_penalty <= self.threshold


def _mean_report(reps: list[PenaltyReport]) -> PenaltyReport:
    r0 = reps[0]
    m = lambda attr: float(np.mean([getattr(r, attr) for r in reps]))
    return PenaltyReport.build(r0.cut, m("stitched_error"), r0.top_error, r0.bottom_error,
                               stitched_loss=m("stitched_loss"),
                               loss_penalty=m("loss_penalty"),
                               curve_digest=r0.curve_digest, seed=r0.seed, family=r0.family)


def connectivity(top: ModelGraph, bottom: ModelGraph, family: StitchFamily, train_ds, test_ds,
                 budget: optim.TrainConfig = STITCH_BUDGET, seeds=(0,), threshold: float = 0.05,
                 cache: EvalCache | None = None, cuts=None) -> ConnectivityReport:
    """Penalties of the interpolating sequence S_0..S_L between ``top`` and ``bottom``.

    S_0 is ``top`` itself (nothing of ``bottom`` is used), so its penalty is
    zero by construction; every other cut fits a stitcher.
    """
    if top.spec.arch_id != bottom.spec.arch_id or top.num_cuts != bottom.num_cuts:
        raise StitchError("connectivity needs two models of identical architecture")
    cache = cache or EvalCache()
    cuts = list(range(top.num_cuts + 1)) if cuts is None else list(cuts)
    top_err, top_loss = cache.error(top, test_ds)
    bottom_err, _ = cache.error(bottom, test_ds)
    per_seed, reports = [], []
    for cut in cuts:
        if cut == 0:
            reps = [PenaltyReport.build(0, top_err, top_err, bottom_err, stitched_loss=top_loss,
                                        loss_penalty=0.0, seed=s, family="identity")
                    for s in seeds]
        else:
            reps = [penalty(top, bottom, cut, family, train_ds, test_ds, budget, s, cache)
                    for s in seeds]
        per_seed.extend(reps)
        reports.append(_mean_report(reps))
    return ConnectivityReport(reports, threshold, per_seed)


# ---------------------------------------------------------------- serialisation

REPORT_COLUMNS = ("experiment_id", "cut", "stitched_err", "top_err", "bottom_err",
                  "penalty", "seed")


def reports_to_csv(reports, experiment_id: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([experiment_id, r.cut, repr(r.stitched_error), repr(r.top_error),
                    repr(r.bottom_error), repr(r.penalty), r.seed])
    return buf.getvalue()


def reports_to_json(reports, experiment_id: str) -> str:
    return json.dumps({"experiment_id": experiment_id,
                       "reports": [r.to_dict() for r in reports]}, indent=2)


def permute_cut_channels(model: ModelGraph, cut: int, perm) -> ModelGraph:
    """Function-preserving reparametrisation whose activations at ``cut`` are
    channel-permuted: ``out[:, i] = original[:, perm[i]]``."""
    if not 1 <= cut < model.num_cuts + 1:
        raise CutError("permutation needs a cut with a producing block")
    perm = np.asarray(perm)
    m = model.copy()
    _, prod = m.blocks[cut - 1]
    ch = prod.children
    if "relu_out" in ch:            # residual block output = relu(bn2 + bn_s)
        pairs = [("conv2", "bn2"), ("shortcut", "bn_s")]
    else:
        pairs = [("conv", "bn")]
    for conv_name, bn_name in pairs:
        conv, bn = ch[conv_name], ch[bn_name]
        conv.weight = conv.weight[perm].copy()
        for attr in ("gamma", "beta", "running_mean", "running_var"):
            setattr(bn, attr, getattr(bn, attr)[perm].copy())
    _, cons = m.blocks[cut]
    cc = cons.children
    if "shortcut" in cc:
        for name in ("conv1", "shortcut"):
            cc[name].weight = cc[name].weight[:, perm].copy()
    elif "fc" in cc:
        cc["fc"].weight = cc["fc"].weight[:, perm].copy()
    else:
        cc["conv"].weight = cc["conv"].weight[:, perm].copy()
    return m
