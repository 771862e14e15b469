"""One runner per experiment kind.  Each returns a :class:`RunResult` whose rows
follow the CSV schema and whose assertions decide the CLI exit code."""
from __future__ import annotations

import logging
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .. import __version__, data, metrics, nn, optim
from .. import stitching as st
from .cache import ModelCache, dataset_key, key_of
from .manifest import ExperimentManifest, load_dataset

log = logging.getLogger("stitchlab.xlab")

MODEL_CUT = -1          # ``cut`` value for rows that describe a whole model


@dataclass(frozen=True)
class Row:
    experiment_id: str
    kind: str
    variant: str
    cut: int
    metric: str
    value: float
    seed: int
    manifest_digest: str


@dataclass
class Assertion:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class RunResult:
    manifest: ExperimentManifest
    manifest_digest: str
    rows: list = field(default_factory=list)
    assertions: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)      # variant -> list[PenaltyReport]
    curves: dict = field(default_factory=dict)       # variant -> {cut: value}
    wall_clock: float = 0.0
    environment: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def add(self, variant: str, cut: int, metric: str, value: float, seed: int = 0):
        m = self.manifest
        self.rows.append(Row(m.id, m.kind, variant, int(cut), metric, float(value), int(seed),
                             self.manifest_digest))

    def check(self, name: str, passed: bool, detail: str = ""):
        self.assertions.append(Assertion(name, bool(passed), detail))
        log.info("%s %s %s", "PASS" if passed else "FAIL", name, detail)

    def penalties(self, variant: str) -> dict[int, float]:
        return {r.cut: r.penalty for r in self.reports[variant]}

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r.variant, r.cut, r.seed, r.metric))


def environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "platform": platform.platform(), "stitchlab": __version__}


class Lab:
    """Shared resolution of datasets, cached models and cached stitching results."""

    def __init__(self, manifest: ExperimentManifest, cache: ModelCache | None = None):
        self.m = manifest
        self.cache = cache or ModelCache(manifest.cache_dir)
        self.train_ds = load_dataset(manifest.dataset)
        self.test_ds = load_dataset(manifest.test_dataset)
        self.evals = st.EvalCache()
        self.family = manifest.stitch_family()
        self.budget = manifest.stitch_config()
        self.context = ""           # what is being trained, for error messages

    # ------------------------------------------------------------ models
    def model(self, seed: int, dataset=None, width: float | None = None, classes: int | None = None,
              config: optim.TrainConfig | None = None, checkpoints=(), tags=None, init=None):
        ds = dataset if dataset is not None else self.train_ds
        spec = self.m.spec(width, classes or ds.classes)
        cfg = config or self.m.base_config(seed=seed)
        test = self.test_ds if (classes or ds.classes) == self.test_ds.classes else None
        self.context = f"base model seed={seed} width={spec.width} data={dataset_key(ds)[:8]}"
        models = self.cache.trained_model(spec, seed, ds, cfg, test=test,
                                          checkpoints=checkpoints, tags=tags, init=init)
        return models if checkpoints else models[cfg.total_steps]

    def random_model(self, seed: int, width: float | None = None) -> nn.ModelGraph:
        return nn.build(self.m.spec(width), seed)

    def cuts(self, model: nn.ModelGraph) -> list[int]:
        return list(self.m.cuts) if self.m.cuts is not None else model.cut_points

    def error(self, model) -> float:
        return self.evals.error(model, self.test_ds)[0]

    # ------------------------------------------------------------ stitching
    def penalty(self, top, bottom, cut: int, family: st.StitchFamily | None = None,
                seed: int = 0) -> st.PenaltyReport:
        """Cached stitching penalty; cut 0 is S_0 = top by construction."""
        family = family or self.family
        top_err, top_loss = self.evals.error(top, self.test_ds)
        if cut == 0:
            bottom_err = self.error(bottom)
            return st.PenaltyReport.build(0, top_err, top_err, bottom_err, stitched_loss=top_loss,
                                          loss_penalty=0.0, seed=seed, family="identity")
        key = key_of({"top": top.digest(), "bottom": bottom.digest(), "cut": cut,
                      "family": family.__dict__, "budget": self.budget.to_dict(), "seed": seed,
                      "train": dataset_key(self.train_ds), "test": dataset_key(self.test_ds),
                      "v": __version__})
        hit = self.cache.result(key)
        if hit is not None:
            return st.PenaltyReport(**hit)
        t0 = time.time()
        rep = st.penalty(top, bottom, cut, family, self.train_ds, self.test_ds, self.budget,
                         seed, self.evals)
        log.info("stitched cut %d (%s): err %.4f penalty %+.4f [%.0fs]", cut, family.name,
                 rep.stitched_error, rep.penalty, time.time() - t0)
        self.cache.store_result(key, rep.to_dict())
        return rep

    def curve(self, result: RunResult, variant: str, top, bottom,
              family: st.StitchFamily | None = None) -> dict[int, float]:
        """Seed-averaged penalty per cut; per-seed rows go into ``result``."""
        reps = []
        for cut in self.cuts(top):
            self.context = f"stitcher variant={variant} cut={cut}"
            per_seed = [self.penalty(top, bottom, cut, family, s) for s in self.m.stitch_seeds]
            for r in per_seed:
                for metric in ("penalty", "stitched_error", "top_error", "bottom_error",
                               "loss_penalty"):
                    result.add(variant, cut, metric, getattr(r, metric), r.seed)
            reps.append(st._mean_report(per_seed))
        result.reports[variant] = reps
        curve = {r.cut: r.penalty for r in reps}
        result.curves[variant] = curve
        return curve


def _fmt(curve: dict) -> str:
    return " ".join(f"{c}:{v * 100:+.1f}" for c, v in sorted(curve.items()))


def _nontrivial(curve: dict) -> dict:
    return {c: v for c, v in curve.items() if c > 0}


# ---------------------------------------------------------------- connectivity

def run_connectivity(m: ExperimentManifest, lab: Lab, res: RunResult):
    a, b = lab.model(m.seeds[0]), lab.model(m.seeds[1])
    thr, noise = m.threshold("threshold"), m.threshold("noise")
    res.add("two-seed", MODEL_CUT, "top_error", lab.error(a), m.seeds[0])
    res.add("two-seed", MODEL_CUT, "bottom_error", lab.error(b), m.seeds[1])
    if m.param("self"):
        c = lab.curve(res, "self", a, a)
        res.check("self_stitch_within_noise", max(abs(v) for v in c.values()) <= noise,
                  f"|penalty| <= {noise}: {_fmt(c)}")
    c = lab.curve(res, "two-seed", a, b)
    res.check("two_seed_connected", max(c.values()) <= thr, f"max <= {thr}: {_fmt(c)}")
    if m.param("disjoint"):
        p0, p1 = data.disjoint_split(lab.train_ds, 2, m.param("disjoint_seed"))
        da, db = lab.model(m.seeds[0], p0), lab.model(m.seeds[1], p1)
        res.add("disjoint", MODEL_CUT, "top_error", lab.error(da), m.seeds[0])
        res.add("disjoint", MODEL_CUT, "bottom_error", lab.error(db), m.seeds[1])
        c = lab.curve(res, "disjoint", da, db)
        res.check("disjoint_connected", max(c.values()) <= thr, f"max <= {thr}: {_fmt(c)}")
    if m.param("random_reference"):
        r = lab.random_model(m.param("random_seed"))
        c = lab.curve(res, "random", a, r)
        lim = m.threshold("random_min")
        res.check("random_not_connected", max(c.values()) >= lim, f"max >= {lim}: {_fmt(c)}")


# ---------------------------------------------------------------- random sanity

def run_random_sanity(m: ExperimentManifest, lab: Lab, res: RunResult):
    a = lab.model(m.seeds[0])
    r = lab.random_model(m.param("random_seed"))
    rc = _nontrivial(lab.curve(res, "random", a, r))
    cuts = sorted(rc)
    shallow, deep = cuts[0], cuts[-1]
    eps = m.threshold("monotone_eps")
    drops = [rc[c] - rc[d] for c, d in zip(cuts, cuts[1:])]
    res.check("random_penalty_nondecreasing", max(drops, default=0) <= eps,
              f"largest drop {max(drops, default=0):.4f} <= {eps}: {_fmt(rc)}")
    lim = m.threshold("shallow_max")
    res.check("random_shallow_penalty_small", rc[shallow] <= lim,
              f"cut {shallow}: {rc[shallow]:.4f} <= {lim}")
    rise = m.threshold("deep_rise")
    res.check("random_deep_exceeds_shallow", rc[deep] - rc[shallow] >= rise,
              f"P({deep}) - P({shallow}) = {rc[deep] - rc[shallow]:.4f} >= {rise}")
    n = min(m.param("cka_n"), len(lab.test_ds))
    pooling = m.param("pooling")
    cka_r = dict(metrics.cka_curve(a, r, lab.test_ds, pooling, n, cuts=lab.cuts(a)))
    for c, v in cka_r.items():
        res.add("random", c, "cka", v)
    res.check("random_cka_decreasing_at_depth", cka_r[deep] < cka_r[shallow],
              f"cka({deep}) = {cka_r[deep]:.4f} < cka({shallow}) = {cka_r[shallow]:.4f}")
    if m.param("compare_seed") and len(m.seeds) > 1:
        b = lab.model(m.seeds[1])
        tc_ = _nontrivial(lab.curve(res, "two-seed", a, b))
        for c, v in metrics.cka_curve(a, b, lab.test_ds, pooling, n, cuts=lab.cuts(a)):
            res.add("two-seed", c, "cka", v)
        deep_cuts = [c for c in cuts if c > max(cuts) / 2]
        gap = min(rc[c] - tc_[c] for c in deep_cuts)
        lim = m.threshold("deep_gap")
        res.check("random_exceeds_two_seed_at_depth", gap >= lim,
                  f"min over cuts {deep_cuts} of P_random - P_two_seed = {gap:.4f} >= {lim}")


# ---------------------------------------------------------------- more data

def run_more_data(m: ExperimentManifest, lab: Lab, res: RunResult):
    sseed = m.param("subset_seed")
    top_ds = data.subset(lab.train_ds, m.param("top_size"), sseed)
    top = lab.model(m.seeds[0], top_ds)
    res.add("top", MODEL_CUT, "error", lab.error(top), m.seeds[0])
    sizes = sorted(m.param("sizes"))
    curves = {}
    for n in sizes:
        bottom = lab.model(m.seeds[1], data.subset(lab.train_ds, n, sseed))
        res.add(f"n{n}", MODEL_CUT, "error", lab.error(bottom), m.seeds[1])
        curves[n] = lab.curve(res, f"n{n}", top, bottom)
    eps = m.threshold("eps")
    for small, big in zip(sizes, sizes[1:]):
        worst = max(curves[big][c] - curves[small][c] for c in curves[small])
        res.check(f"more_data_ordering_{small}_{big}", worst <= eps,
                  f"max_c P({big}) - P({small}) = {worst:.4f} <= {eps}")
    best = min(_nontrivial(curves[sizes[-1]]).values())
    res.check("largest_bottom_improves", best <= eps,
              f"min_c P({sizes[-1]}) = {best:.4f} <= {eps}")
    spread = {c: curves[sizes[0]][c] - curves[sizes[-1]][c] for c in curves[sizes[0]]}
    for c, v in spread.items():
        res.add("spread", c, "penalty_spread", v)


# ---------------------------------------------------------------- more time

def run_more_time(m: ExperimentManifest, lab: Lab, res: RunResult):
    cps = sorted(m.param("checkpoints"))
    run = lab.model(m.seeds[0], checkpoints=cps)
    top = run[m.param("top_checkpoint")]
    curves = {}
    for step in cps:
        res.add(f"step{step}", MODEL_CUT, "error", lab.error(run[step]), m.seeds[0])
        curves[step] = lab.curve(res, f"step{step}", top, run[step])
    eps, noise = m.threshold("eps"), m.threshold("noise")
    selfc = curves[m.param("top_checkpoint")]
    # one-sided: a stitcher can recalibrate an unconverged checkpoint and lower its error
    res.check("same_checkpoint_self_stitch", max(selfc.values()) <= noise,
              f"max penalty <= {noise}: " + _fmt(selfc))
    for early, late in zip(cps, cps[1:]):
        worst = max(curves[late][c] - curves[early][c] for c in curves[early])
        res.check(f"more_time_ordering_{early}_{late}", worst <= eps,
                  f"max_c P({late}) - P({early}) = {worst:.4f} <= {eps}")


# ---------------------------------------------------------------- more width

def run_more_width(m: ExperimentManifest, lab: Lab, res: RunResult):
    """Tops use the first seed and bottoms the second at every width, so the
    reference-width pair reduces to the two-seed connectivity case."""
    ref = m.param("reference_width")
    widths = sorted(set(m.param("widths")) | {ref})
    tops = {w: lab.model(m.seeds[0], width=w) for w in widths}
    bottoms = {w: lab.model(m.seeds[1], width=w) for w in widths}
    for w in widths:
        res.add(f"w{w}", MODEL_CUT, "top_error", lab.error(tops[w]), m.seeds[0])
        res.add(f"w{w}", MODEL_CUT, "bottom_error", lab.error(bottoms[w]), m.seeds[1])
    into_ref, wide_narrow, narrow_wide = {}, [], []
    for w in widths:
        into_ref[w] = lab.curve(res, f"b{w}-t{ref}", tops[ref], bottoms[w])
        if w == ref:
            continue
        out_ref = lab.curve(res, f"b{ref}-t{w}", tops[w], bottoms[ref])
        mean_in, mean_out = (np.mean(list(_nontrivial(c).values())) for c in (into_ref[w], out_ref))
        (wide_narrow if w > ref else narrow_wide).append(mean_in)
        (narrow_wide if w > ref else wide_narrow).append(mean_out)
    eps = m.threshold("eps")
    for narrow, wide in zip(widths, widths[1:]):
        worst = max(into_ref[wide][c] - into_ref[narrow][c] for c in into_ref[narrow])
        res.check(f"wider_bottom_not_worse_{narrow}_{wide}", worst <= eps,
                  f"top w{ref}: max_c P(w{wide}) - P(w{narrow}) = {worst:.4f} <= {eps}")
    if wide_narrow and narrow_wide:
        wn, nw = float(np.mean(wide_narrow)), float(np.mean(narrow_wide))
        res.check("width_asymmetry", wn < nw,
                  f"mean penalty wide->narrow {wn:.4f} < narrow->wide {nw:.4f}")
    wider = [w for w in widths if w > ref]
    if wider:
        best = min(min(_nontrivial(into_ref[w]).values()) for w in wider)
        res.check("wide_bottom_improves_somewhere", best <= 0.0,
                  f"min over cuts of wide-into-w{ref} penalty {best:.4f} <= 0")


# ---------------------------------------------------------------- label quality

def run_label_quality(m: ExperimentManifest, lab: Lab, res: RunResult):
    top = lab.model(m.seeds[0])
    variants = {}
    if m.param("coarse"):
        coarse_map = (data.SYNTH_COARSE if lab.train_ds.provenance[0]["op"] == "synthetic"
                      else data.CIFAR10_COARSE)
        coarse_ds = data.coarsen_labels(lab.train_ds, coarse_map)
        variants["coarse"] = lab.model(m.seeds[1], coarse_ds)
        coarse_test = data.coarsen_labels(lab.test_ds, coarse_map)
        res.add("coarse", MODEL_CUT, "coarse_error",
                optim.error_rate(variants["coarse"], coarse_test.images, coarse_test.labels),
                m.seeds[1])
    for p in m.param("noise"):
        noisy = data.corrupt_labels(lab.train_ds, p, m.param("corrupt_seed"))
        variants[f"p{p}"] = lab.model(m.seeds[1], noisy)
    curves = {}
    for name, bottom in variants.items():
        curves[name] = lab.curve(res, name, top, bottom)
    last = max(next(iter(curves.values())))
    first_half = [c for c in curves[next(iter(curves))] if 0 < c <= last // 2]
    lim = m.threshold("shallow_max")
    for name, c in curves.items():
        if name == "p1.0":
            continue
        worst = max(c[k] for k in first_half)
        res.check(f"{name}_shallow_connected", worst <= lim,
                  f"max over cuts {first_half} = {worst:.4f} <= {lim}: {_fmt(c)}")
    if "p1.0" in curves:
        deep = curves["p1.0"][last]
        lim = m.threshold("deep_min")
        res.check("p1.0_deep_penalty_large", deep >= lim, f"P({last}) = {deep:.4f} >= {lim}")
        if m.param("random_reference"):
            rc = lab.curve(res, "random", top, lab.random_model(m.param("random_seed")))
            band = m.threshold("random_band")
            diff = abs(rc[last] - deep)
            res.check("p1.0_like_random_at_depth", diff <= band,
                      f"|P_random({last}) - P_p1({last})| = {diff:.4f} <= {band}")


# ---------------------------------------------------------------- kernel ablation

def run_kernel_ablation(m: ExperimentManifest, lab: Lab, res: RunResult):
    a, b = lab.model(m.seeds[0]), lab.model(m.seeds[1])
    base = m.stitch_family()
    curves = {}
    for k in m.param("kernel_sizes"):
        fam = st.StitchFamily(base.kind, k, base.bn_before, base.bn_after, base.init, base.ridge)
        curves[k] = lab.curve(res, f"k{k}", a, b, fam)
    lim = m.threshold("max_spread")
    for c in curves[1]:
        vals = [curves[k][c] for k in curves]
        spread = max(vals) - min(vals)
        res.add("spread", c, "penalty_spread", spread)
        res.check(f"kernel_spread_cut{c}", spread <= lim, f"{spread:.4f} <= {lim}")


# ---------------------------------------------------------------- fine-tuning baseline

def finetune(lab: Lab, bottom: nn.ModelGraph, cut: int, init_seed: int, seed: int):
    """Freeze ``bottom``'s first ``cut`` blocks; train freshly initialised later blocks."""
    fresh = nn.build(bottom.spec, init_seed)
    init = nn.ModelGraph(bottom.spec, bottom.blocks[:cut] + fresh.blocks[cut:], init_seed)
    init = init.copy()
    trainable = [name for name, _ in init.blocks[cut:]]
    cfg = lab.m.base_config(seed=seed, trainable=trainable)
    return lab.model(seed, config=cfg, init=init,
                     tags={"finetune_bottom": bottom.digest(), "cut": cut, "init_seed": init_seed})


def run_finetune_baseline(m: ExperimentManifest, lab: Lab, res: RunResult):
    a, b = lab.model(m.seeds[0]), lab.model(m.seeds[1])
    r = lab.random_model(m.param("random_seed"))
    base_err = lab.error(a)
    res.add("baseline", MODEL_CUT, "error", base_err, m.seeds[0])
    ft = {}
    for cut in m.param("finetune_cuts"):
        for name, bottom in (("random", r), ("trained", b)):
            model = finetune(lab, bottom, cut, m.param("init_seed"), m.seeds[0])
            ft[(name, cut)] = lab.error(model)
            res.add(f"finetune-{name}", cut, "finetune_error", ft[(name, cut)], m.seeds[0])
    sr = lab.curve(res, "stitch-random", a, r)
    sb = lab.curve(res, "stitch-trained", a, b)
    gap_lim = m.threshold("finetune_gap")
    for cut in m.param("finetune_cuts"):
        gap = ft[("random", cut)] - base_err
        res.check(f"finetune_random_recovers_cut{cut}", gap <= gap_lim,
                  f"finetuned {ft[('random', cut)]:.4f} - baseline {base_err:.4f} = {gap:.4f} "
                  f"<= {gap_lim}")
    deep = max(sr)
    lim = m.threshold("stitch_min")
    res.check("stitching_flags_random_at_depth", sr[deep] >= lim,
              f"P_random({deep}) = {sr[deep]:.4f} >= {lim} (trained bottom: {sb[deep]:.4f})")


# ---------------------------------------------------------------- freeze training

def select_frozen(fwd: dict, rev: dict, num_cuts: int, tau: float) -> list[int]:
    """Block indices to freeze from the small-sample model.

    ``fwd[c]`` is the penalty of the small model's bottom into the full model;
    ``rev[c]`` of the full model's bottom into the small model's top.  A prefix
    of blocks is frozen while the forward penalty stays within ``tau`` of zero, and
    a suffix from the first cut after which the reverse penalty stays within ``tau``
    of zero.  A large negative penalty means the other model is much better at that
    cut, so it does not qualify.
    """
    prefix = 0
    for c in range(1, num_cuts + 1):
        if abs(fwd.get(c, np.inf)) > tau:
            break
        prefix = c
    suffix = num_cuts + 1
    for c in range(num_cuts, 0, -1):
        if abs(rev.get(c, np.inf)) > tau:
            break
        suffix = c
    return sorted(set(range(prefix)) | set(range(max(suffix, prefix), num_cuts + 1)))


def run_freeze_training(m: ExperimentManifest, lab: Lab, res: RunResult):
    full = lab.model(m.seeds[0])
    small_ds = data.subset(lab.train_ds, m.param("small_size"), m.param("subset_seed"))
    small = lab.model(m.seeds[1], small_ds)
    full_err, small_err = lab.error(full), lab.error(small)
    res.add("full", MODEL_CUT, "error", full_err, m.seeds[0])
    res.add("small", MODEL_CUT, "error", small_err, m.seeds[1])
    fwd = lab.curve(res, "small-into-full", full, small)
    rev = lab.curve(res, "full-into-small", small, full)
    names = small.block_names()
    if m.param("freeze") is not None:
        frozen = sorted(names.index(n) for n in m.param("freeze"))
    else:
        frozen = select_frozen(fwd, rev, small.num_cuts, m.threshold("select_tau"))
    for i in frozen:
        res.add("frozen", i, "frozen_block", 1.0)
    fresh = nn.build(small.spec, m.param("init_seed"))
    blocks = [(n, small.blocks[i][1] if i in frozen else fresh.blocks[i][1])
              for i, n in enumerate(names)]
    init = nn.ModelGraph(small.spec, blocks, m.param("init_seed")).copy()
    trainable = [n for i, n in enumerate(names) if i not in frozen]
    if trainable:
        cfg = m.base_config(seed=m.seeds[0], trainable=trainable)
        model = lab.model(m.seeds[0], config=cfg, init=init,
                          tags={"freeze_from": small.digest(), "frozen": frozen,
                                "init_seed": m.param("init_seed")})
    else:
        model = small
    err = lab.error(model)
    res.add("freeze-trained", MODEL_CUT, "error", err, m.seeds[0])
    lim = m.threshold("max_gap")
    res.check("freeze_selection_nonempty", bool(frozen),
              f"blocks with |penalty| <= {m.threshold('select_tau')}: {[names[i] for i in frozen]}")
    res.check("freeze_training_close_to_full", err - full_err <= lim,
              f"frozen {[names[i] for i in frozen]}: {err:.4f} - full {full_err:.4f} = "
              f"{err - full_err:.4f} <= {lim}")


# ---------------------------------------------------------------- CKA comparison

class _SpuriousImages:
    """Bottom features with ``k`` extra channels, each one N(0,1) draw per example
    broadcast over space, so pooling yields exactly ``augment_spurious`` columns."""

    def __init__(self, feats: np.ndarray, noise: np.ndarray):
        self.feats, self.noise = feats, noise.astype(feats.dtype)
        n, c, h, w = feats.shape
        self.shape = (n, c + noise.shape[1], h, w)

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, idx):
        f = self.feats[idx]
        z = np.broadcast_to(self.noise[idx][:, :, None, None],
                            (f.shape[0], self.noise.shape[1], *f.shape[2:]))
        return np.concatenate([f, z], axis=1)


def spurious_penalty(lab: Lab, top, bottom, cut: int, k: int, seed: int, stitch_seed: int):
    """Penalty of ``bottom``'s representation at ``cut`` with ``k`` gaussian coordinates added."""
    # least-squares init needs well over one example per input channel
    n_init = min(len(lab.train_ds.labels), max(2048, 8 * (bottom.cut_shape(cut)[0] + k)))
    key = key_of({"spurious": k, "seed": seed, "n_init": n_init, "top": top.digest(), "bottom": bottom.digest(),
                  "cut": cut, "family": lab.family.__dict__, "budget": lab.budget.to_dict(),
                  "stitch_seed": stitch_seed, "train": dataset_key(lab.train_ds),
                  "test": dataset_key(lab.test_ds), "v": __version__})
    hit = lab.cache.result(key)
    if hit is not None:
        return st.PenaltyReport(**hit)
    rng = np.random.default_rng(seed)
    tr_f = lab.evals.features(bottom, cut, lab.train_ds).images
    te_f = lab.evals.features(bottom, cut, lab.test_ds).images
    tr = _SpuriousImages(tr_f, rng.standard_normal((len(tr_f), k)))
    te = _SpuriousImages(te_f, rng.standard_normal((len(te_f), k)))
    sm = st.make_stitched_tail(top, cut, lab.family, stitch_seed, tr[:n_init],
                               lab.train_ds.images[:n_init])
    st.fit_stitcher(sm, None, lab.budget.replace(seed=stitch_seed),
                    train_features=st.Features(tr, lab.train_ds.labels))
    err, loss = st.evaluate_stitched(sm, None, st.Features(te, lab.test_ds.labels))
    top_err, top_loss = lab.evals.error(top, lab.test_ds)
    rep = st.PenaltyReport.build(cut, err, top_err, lab.error(bottom), stitched_loss=loss,
                                 loss_penalty=loss - top_loss, seed=stitch_seed,
                                 family=lab.family.name)
    lab.cache.store_result(key, rep.to_dict())
    return rep


def run_cka_compare(m: ExperimentManifest, lab: Lab, res: RunResult):
    a, b = lab.model(m.seeds[0]), lab.model(m.seeds[1])
    r = lab.random_model(m.param("random_seed"))
    n = min(m.param("cka_n"), len(lab.test_ds))
    for pooling in m.param("poolings"):
        for name, other in (("two-seed", b), ("random", r)):
            for c, v in metrics.cka_curve(a, other, lab.test_ds, pooling, n, cuts=lab.cuts(a)):
                res.add(f"{name}-{pooling}", c, "cka", v)
    k = m.param("spurious_k")
    if k:
        cut = m.param("spurious_cut")
        cut = a.num_cuts if cut < 0 else cut
        x = metrics.extract_repr(b, cut, lab.test_ds, "pool", n)
        aug = metrics.augment_spurious(x, k, m.param("spurious_seed"))
        self_cka = metrics.linear_cka(x, x)
        aug_cka = metrics.linear_cka(x, aug)
        res.add("spurious", cut, "cka", aug_cka)
        res.add("original", cut, "cka", self_cka)
        drop = self_cka - aug_cka
        res.check("spurious_lowers_cka", drop >= m.threshold("cka_drop"),
                  f"CKA drop {drop:.4f} >= {m.threshold('cka_drop')}")
        s0 = m.stitch_seeds[0]
        orig = lab.penalty(a, b, cut, seed=s0)
        sp = spurious_penalty(lab, a, b, cut, k, m.param("spurious_seed"), s0)
        res.add("original", cut, "penalty", orig.penalty, s0)
        res.add("spurious", cut, "penalty", sp.penalty, s0)
        change = abs(sp.penalty - orig.penalty)
        res.check("spurious_penalty_stable", change <= m.threshold("penalty_change"),
                  f"|{sp.penalty:.4f} - {orig.penalty:.4f}| = {change:.4f} "
                  f"<= {m.threshold('penalty_change')}")


RUNNERS = {
    "connectivity": run_connectivity,
    "random_sanity": run_random_sanity,
    "more_data": run_more_data,
    "more_time": run_more_time,
    "more_width": run_more_width,
    "label_quality": run_label_quality,
    "kernel_ablation": run_kernel_ablation,
    "finetune_baseline": run_finetune_baseline,
    "freeze_training": run_freeze_training,
    "cka_compare": run_cka_compare,
}


def run(manifest: ExperimentManifest, cache: ModelCache | None = None) -> RunResult:
    """Validate and execute a manifest."""
    manifest.validate()
    t0 = time.time()
    lab = Lab(manifest, cache)
    res = RunResult(manifest, manifest.digest(), environment=environment())
    try:
        RUNNERS[manifest.kind](manifest, lab, res)
    except optim.TrainingDivergedError as e:
        raise optim.TrainingDivergedError(e.step, e.loss,
                                          f"{manifest.id} ({lab.context})") from e
    res.wall_clock = time.time() - t0
    return res
