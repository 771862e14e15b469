"""``stitchlab`` command line.

Verbs: train, stitch, fold, cka, connect, run, validate, gradcheck, arch.
``run`` exits 0 iff every assertion of the manifest passes.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .. import metrics, nn, optim
from .. import stitching as st
from .. import tensor_core as tc
from ..layers import BatchNorm, Conv2d, Linear, ReLU, ResidualBlock, Sequential, Stitcher
from . import report, runners
from .cache import ModelCache
from .manifest import BASE_BUDGET, ManifestError, load_dataset, load_manifest


def _family(args) -> st.StitchFamily:
    return st.StitchFamily(args.family, args.kernel)


def _budget(args) -> optim.TrainConfig:
    return st.STITCH_BUDGET.replace(total_steps=args.steps, seed=args.seed)


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    test = load_dataset(args.test) if args.test else None
    spec = nn.ArchitectureSpec(args.arch, args.width, classes=ds.classes)
    cfg = BASE_BUDGET.replace(total_steps=args.steps, seed=args.seed,
                              drops=[args.steps // 2, 3 * args.steps // 4] if args.steps >= 4 else [])
    model, hist = optim.train(nn.build(spec, args.seed), ds, cfg, test=test)
    nn.save(model, args.out, {"train_config": cfg.digest(), "data": args.data})
    if args.history:
        hist.to_csv(args.history)
    if test is not None:
        print(f"test error {optim.error_rate(model, test.images, test.labels):.4f}")
    return 0


def _stitch(args):
    top, bottom = nn.load(args.top), nn.load(args.bottom)
    train, test = load_dataset(args.data), load_dataset(args.test)
    rep = st.penalty(top, bottom, args.cut, _family(args), train, test, _budget(args), args.seed)
    return top, bottom, train, test, rep


def cmd_stitch(args) -> int:
    *_, rep = _stitch(args)
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


def cmd_fold(args) -> int:
    top, bottom = nn.load(args.top), nn.load(args.bottom)
    train, test = load_dataset(args.data), load_dataset(args.test)
    sm = st.make_stitched(top, bottom, args.cut, st.CONV1X1, args.seed, train.images)
    st.fit_stitcher(sm, train, _budget(args))
    folded = nn.fold_stitcher(top, sm.stitcher, args.cut)
    stitched_err, _ = st.evaluate_stitched(sm, test)
    feats = bottom.activations_at(args.cut, test.images)
    logits = folded.forward_from(args.cut, feats)
    folded_err = float(np.mean(tc.predict(logits) != test.labels))
    nn.save(folded, args.out, {"folded_cut": args.cut})
    print(json.dumps({"stitched_error": stitched_err, "folded_error": folded_err,
                      "arch": folded.spec.arch_id}, indent=2))
    return 0


def cmd_cka(args) -> int:
    a, b = nn.load(args.a), nn.load(args.b)
    ds = load_dataset(args.data)
    for cut, v in metrics.cka_curve(a, b, ds, args.pooling, args.n):
        print(f"{cut}\t{v:.6f}")
    return 0


def cmd_connect(args) -> int:
    top, bottom = nn.load(args.top), nn.load(args.bottom)
    train, test = load_dataset(args.data), load_dataset(args.test)
    rep = st.connectivity(top, bottom, _family(args), train, test, _budget(args),
                          seeds=(args.seed,), threshold=args.threshold)
    sys.stdout.write(st.reports_to_csv(rep.reports, "connect"))
    print(f"max penalty {rep.max_penalty:.4f} threshold {rep.threshold} "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def cmd_run(args) -> int:
    m = load_manifest(args.manifest)
    if args.out:
        m.output_dir = args.out
    cache = ModelCache(args.cache_dir or m.cache_dir)
    result = runners.run(m, cache)
    paths = report.write_outputs(result, m.output_dir)
    for a in result.assertions:
        print(f"{'PASS' if a.passed else 'FAIL'}  {a.name}  {a.detail}")
    print(f"wrote {paths['csv']} ({len(result.rows)} rows) in {result.wall_clock:.0f}s")
    return 0 if result.passed else 1


def cmd_validate(args) -> int:
    try:
        m = load_manifest(args.manifest).validate(resolve=not args.no_resolve)
    except ManifestError as e:
        print(f"invalid: {e}")
        return 1
    print(f"ok: {m.id} ({m.kind}) digest {m.digest()}")
    return 0


def gradcheck_suite(seed: int = 0) -> list:
    """64-bit finite-difference checks of every layer kind used by the models."""
    rng = np.random.default_rng(seed)
    f64 = np.float64

    def bn(c):
        b = BatchNorm(c, f64)
        b.gamma[...] = rng.uniform(0.5, 1.5, c)
        b.beta[...] = rng.normal(0, 0.3, c)
        return b

    cases = [
        ("linear", Linear(rng.standard_normal((3, 5)), rng.standard_normal(3)),
         rng.standard_normal((4, 5))),
        ("conv3x3", Conv2d(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), 2, 1),
         rng.standard_normal((2, 3, 7, 7))),
        ("batchnorm", bn(3), rng.standard_normal((4, 3, 3, 3))),
        ("conv-bn-relu", Sequential({"conv": Conv2d(rng.standard_normal((4, 3, 3, 3)), None, 1, 1),
                                     "bn": bn(4), "relu": ReLU()}),
         rng.standard_normal((3, 3, 5, 5))),
        ("residual", ResidualBlock(rng, 3, 4, 2, dtype=f64), rng.standard_normal((2, 3, 6, 6))),
        ("stitcher", Stitcher(rng.standard_normal((4, 3, 1, 1)), rng.standard_normal(4),
                              True, True), rng.standard_normal((3, 3, 4, 4))),
    ]
    reports = []
    for name, layer, x in cases:
        rep = tc.grad_check(layer, x)
        rep.layer = name
        reports.append(rep)
    return reports


def cmd_gradcheck(args) -> int:
    reports = gradcheck_suite(args.seed)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.layer:14s} max rel err {r.max_rel_error:.2e} "
              f"(tol {r.tolerance:.0e})")
    return 0 if all(r.passed for r in reports) else 1


def cmd_arch(args) -> int:
    print(nn.dump_architecture(args.arch_id))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stitchlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a base model and write a checkpoint")
    t.add_argument("--arch", default="small-resnet-8")
    t.add_argument("--width", type=float, default=1.0)
    t.add_argument("--data", default="synth:100:10000")
    t.add_argument("--test", default="synth:999:2000")
    t.add_argument("--steps", type=int, default=BASE_BUDGET.total_steps)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--history")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def stitch_args(q):
        q.add_argument("--top", required=True)
        q.add_argument("--bottom", required=True)
        q.add_argument("--data", default="synth:100:10000")
        q.add_argument("--test", default="synth:999:2000")
        q.add_argument("--steps", type=int, default=st.STITCH_BUDGET.total_steps)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--family", default="conv", choices=["identity", "permutation", "conv"])
        q.add_argument("--kernel", type=int, default=1)

    s = sub.add_parser("stitch", help="stitching penalty at one cut")
    stitch_args(s)
    s.add_argument("--cut", type=int, required=True)
    s.set_defaults(func=cmd_stitch)

    f = sub.add_parser("fold", help="fit a 1x1 stitcher and fold it into the top model")
    stitch_args(f)
    f.add_argument("--cut", type=int, required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fold)

    c = sub.add_parser("cka", help="linear CKA per cut between two checkpoints")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--data", default="synth:999:2000")
    c.add_argument("--pooling", default="pool", choices=["pool", "flatten"])
    c.add_argument("--n", type=int, default=2048)
    c.set_defaults(func=cmd_cka)

    k = sub.add_parser("connect", help="stitching connectivity over all cuts")
    stitch_args(k)
    k.add_argument("--threshold", type=float, default=0.05)
    k.set_defaults(func=cmd_connect)

    r = sub.add_parser("run", help="run an experiment manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="output directory (overrides the manifest)")
    r.add_argument("--cache-dir")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a manifest without running it")
    v.add_argument("manifest")
    v.add_argument("--no-resolve", action="store_true", help="skip loading datasets")
    v.set_defaults(func=cmd_validate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("arch", help="print an architecture spec")
    a.add_argument("arch_id", choices=sorted(nn.ARCHITECTURES))
    a.set_defaults(func=cmd_arch)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ManifestError, optim.TrainingDivergedError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
