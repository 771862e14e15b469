import csv
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from stitchlab import metrics, optim
from stitchlab.xlab import cli, manifest as mf, report, runners
from stitchlab.xlab.cache import ModelCache, key_of
from stitchlab.xlab.runners import MODEL_CUT, Row, RunResult, select_frozen

GOLDEN = Path(__file__).parent / "golden" / "tiny_connectivity.csv"

TINY = {
    "dataset": "synth:5:300",
    "test_dataset": "synth:6:200",
    "width": 0.25,
    "cuts": [0, 1, 2, 4],
    "base_budget": {"total_steps": 24, "drops": [16], "batch_size": 32, "eval_every": 0},
    "stitch_budget": {"total_steps": 8, "batch_size": 32},
}


def tiny(kind, **kw):
    d = {"id": f"tiny-{kind}", "kind": kind, **TINY, **kw}
    return mf.from_dict(d)


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return ModelCache(tmp_path_factory.mktemp("cache"))


def write_toml(path, text):
    path.write_text(text)
    return path


TINY_TOML = """\
id = "tiny-connectivity"
kind = "connectivity"
dataset = "synth:5:300"
test_dataset = "synth:6:200"
width = 0.25
cuts = [0, 1, 2, 4]
output_dir = "out"
cache_dir = "cache"

[base_budget]
total_steps = 24
drops = [16]
batch_size = 32
eval_every = 0

[stitch_budget]
total_steps = 8
batch_size = 32

[params]
disjoint = false

[thresholds]
threshold = 1.0
noise = 1.0
random_min = 0.0
"""


# ---------------------------------------------------------------- manifests

def test_defaults_cover_every_kind():
    assert set(mf.KIND_PARAMS) == set(mf.KINDS) == set(mf.KIND_THRESHOLDS)
    assert set(runners.RUNNERS) == set(mf.KINDS)


@pytest.mark.parametrize("kw, match", [
    ({"kind": "nonsense"}, "unknown experiment kind"),
    ({"arch": "resnet-50"}, "unknown architecture"),
    ({"width": 3.0}, "width"),
    ({"seeds": [0]}, "at least 2 seeds"),
    ({"seeds": []}, "seeds"),
    ({"stitch_seeds": []}, "stitch_seeds"),
    ({"params": {"epochs": 3}}, "unknown params"),
    ({"thresholds": {"tolerance": 3}}, "unknown thresholds"),
    ({"stitch_budget": {"trainable": "all"}}, "stitcher-only"),
    ({"stitch_budget": {"lr": -1.0}}, "invalid budget"),
    ({"family": {"kernel_size": 4}}, "invalid budget/family"),
    ({"dataset": "synth:nope"}, "not resolvable"),
])
def test_validate_rejects(kw, match):
    kind = kw.pop("kind", "connectivity")
    with pytest.raises(mf.ManifestError, match=match):
        tiny(kind, **kw).validate()


def test_validate_kind_specific_rules():
    with pytest.raises(mf.ManifestError, match="kernel size 1"):
        tiny("kernel_ablation", params={"kernel_sizes": [3, 5]}).validate()
    with pytest.raises(mf.ManifestError, match="top_checkpoint"):
        tiny("more_time", params={"checkpoints": [8, 24], "top_checkpoint": 16}).validate()
    with pytest.raises(mf.ManifestError, match="exceed"):
        tiny("more_time", params={"checkpoints": [8, 48], "top_checkpoint": 8}).validate()
    with pytest.raises(mf.ManifestError, match="width"):
        tiny("more_width", params={"widths": [0.25, 3.0]}).validate()


def test_validate_without_resolving_skips_datasets():
    m = tiny("connectivity", dataset="cifar10:/does/not/exist")
    m.validate(resolve=False)
    with pytest.raises(mf.ManifestError):
        m.validate()


def test_from_dict_requires_keys_and_rejects_unknown():
    with pytest.raises(mf.ManifestError, match="missing"):
        mf.from_dict({"id": "x", "kind": "connectivity"})
    with pytest.raises(mf.ManifestError, match="unknown manifest keys"):
        mf.from_dict({"id": "x", "kind": "connectivity", "dataset": "a", "test_dataset": "b",
                      "epochs": 3})


def test_digest_ignores_locations_but_not_content():
    a = tiny("connectivity")
    b = tiny("connectivity", output_dir="/elsewhere", cache_dir="/tmp/c")
    c = tiny("connectivity", seeds=[0, 2])
    assert a.digest() == b.digest() != c.digest()


def test_load_manifest_resolves_relative_dirs(tmp_path):
    p = write_toml(tmp_path / "m.toml", TINY_TOML)
    m = mf.load_manifest(p)
    assert m.kind == "connectivity" and m.cuts == [0, 1, 2, 4]
    assert m.output_dir == str(tmp_path / "out") and m.cache_dir == str(tmp_path / "cache")
    assert m.base_config().total_steps == 24 and m.base_config().lr == mf.BASE_BUDGET.lr
    assert m.param("disjoint") is False and m.param("self") is True
    assert m.threshold("threshold") == 1.0


def test_load_manifest_reports_syntax_errors(tmp_path):
    p = write_toml(tmp_path / "bad.toml", "id = \n")
    with pytest.raises(mf.ManifestError):
        mf.load_manifest(p)


def test_shipped_manifests_validate():
    root = Path(__file__).parent.parent / "manifests"
    paths = sorted(root.glob("*.toml"))
    assert len(paths) >= 10
    kinds = set()
    for p in paths:
        m = mf.load_manifest(p).validate()
        kinds.add(m.kind)
    assert kinds == set(mf.KINDS)
    for p in sorted((root / "cifar").glob("*.toml")):
        mf.load_manifest(p).validate(resolve=False)


# ---------------------------------------------------------------- reports

def fake_result(rows=()):
    m = tiny("connectivity")
    res = RunResult(m, m.digest())
    for variant, cut, metric, value in rows:
        res.add(variant, cut, metric, value)
    return res


def test_empty_result_gives_header_only_csv(tmp_path):
    report.emit_csv(None, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text() == ",".join(report.CSV_COLUMNS) + "\n"
    report.emit_csv(fake_result(), tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text() == ",".join(report.CSV_COLUMNS) + "\n"


def test_csv_rows_sorted_and_carry_digest(tmp_path):
    res = fake_result([("z", 2, "penalty", 0.5), ("a", 1, "penalty", 0.25),
                       ("a", 0, "penalty", 0.0)])
    report.emit_csv(res, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as f:
        rows = list(csv.DictReader(f))
    assert [(r["variant"], r["cut"]) for r in rows] == [("a", "0"), ("a", "1"), ("z", "2")]
    assert {r["manifest_digest"] for r in rows} == {res.manifest_digest}
    assert float(rows[1]["value"]) == 0.25


def test_svg_is_well_formed_with_one_polyline_per_variant(tmp_path):
    res = fake_result([(v, c, "penalty", (c - 1) * 0.1 * i)
                       for i, v in enumerate(["self", "two-seed", "random"]) for c in range(4)]
                      + [("self", MODEL_CUT, "error", 0.1)])
    report.emit_svg(res, tmp_path / "p.svg")
    root = ET.parse(tmp_path / "p.svg").getroot()
    ns = "{http://www.w3.org/2000/svg}"
    assert len(root.findall(f"{ns}polyline")) == 3
    texts = [t.text for t in root.iter(f"{ns}text")]
    assert "cut index" in texts and "penalty" in texts
    assert {"self", "two-seed", "random"} <= set(texts)


def test_svg_handles_empty_result(tmp_path):
    report.emit_svg(fake_result(), tmp_path / "e.svg")
    ET.parse(tmp_path / "e.svg")


def test_unwritable_path_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write"):
        report.emit_csv(None, blocker / "sub" / "a.csv")


# ---------------------------------------------------------------- runners

def test_select_frozen():
    fwd = {1: 0.0, 2: 0.005, 3: 0.04, 4: 0.08}
    rev = {1: 0.2, 2: 0.1, 3: 0.0, 4: -0.01}
    # blocks 0,1 (prefix while fwd small) and 3,4 (suffix where rev small)
    assert select_frozen(fwd, rev, 4, 0.01) == [0, 1, 3, 4]
    assert select_frozen({c: 1.0 for c in fwd}, {c: 1.0 for c in rev}, 4, 0.01) == []
    assert select_frozen({c: 0.0 for c in fwd}, {c: 1.0 for c in rev}, 4, 0.01) == [0, 1, 2, 3]
    # a strongly negative reverse penalty is not "close to zero"
    assert select_frozen(fwd, {c: -0.4 for c in rev}, 4, 0.01) == [0, 1]


def test_spurious_images_pool_to_augment_spurious():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((6, 4, 3, 3)).astype(np.float32)
    noise = rng.standard_normal((6, 5))
    imgs = runners._SpuriousImages(feats, noise)
    assert len(imgs) == 6 and imgs.shape == (6, 9, 3, 3)
    batch = imgs[np.array([0, 2, 5])]
    assert batch.shape == (3, 9, 3, 3)
    pooled = batch.mean(axis=(2, 3))
    np.testing.assert_allclose(pooled[:, :4], feats[[0, 2, 5]].mean(axis=(2, 3)), atol=1e-6)
    np.testing.assert_allclose(pooled[:, 4:], noise[[0, 2, 5]], atol=1e-6)


def test_tiny_connectivity_matches_golden_and_is_deterministic(tmp_path, cache):
    m = tiny("connectivity", params={"disjoint": False})
    r1 = runners.run(m, cache)
    r2 = runners.run(m, ModelCache(tmp_path / "fresh"))
    report.emit_csv(r1, tmp_path / "a.csv")
    report.emit_csv(r2, tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    assert text == GOLDEN.read_text()


def test_base_models_trained_once(tmp_path):
    c = ModelCache(tmp_path)
    m = tiny("connectivity", params={"disjoint": False, "self": False,
                                     "random_reference": False})
    runners.run(m, c)
    assert c.trained == 2
    runners.run(m, c)
    assert c.trained == 2
    runners.run(m, ModelCache(tmp_path))
    assert len(list((tmp_path / "models").glob("*.stch"))) == 2


def test_more_time_reuses_one_training_run(tmp_path):
    c = ModelCache(tmp_path)
    m = tiny("more_time", params={"checkpoints": [8, 16, 24], "top_checkpoint": 16})
    res = runners.run(m, c)
    assert c.trained == 1
    # 16-step models are near chance, so only the exact cut-0 self-stitch is pinned
    assert set(res.curves) == {"step8", "step16", "step24"}
    assert res.curves["step16"][0] == 0.0


KIND_OVERRIDES = {
    "more_data": {"params": {"top_size": 100, "sizes": [50, 100, 200]}},
    "more_time": {"params": {"checkpoints": [8, 24], "top_checkpoint": 8}},
    "more_width": {"params": {"widths": [0.25, 0.5]}},
    "label_quality": {"params": {"noise": [0.5, 1.0]}},
    "kernel_ablation": {"params": {"kernel_sizes": [1, 3]}},
    "freeze_training": {"params": {"small_size": 100}},
    "cka_compare": {"params": {"spurious_k": 20, "cka_n": 100}},
    "random_sanity": {"params": {"cka_n": 100}},
}


@pytest.mark.parametrize("kind", mf.KINDS)
def test_every_kind_runs_and_emits(kind, cache, tmp_path):
    m = tiny(kind, **KIND_OVERRIDES.get(kind, {}))
    res = runners.run(m, cache)
    assert res.rows and res.assertions
    assert all(isinstance(r, Row) and r.manifest_digest == m.digest() for r in res.rows)
    assert all(r.kind == kind and r.experiment_id == m.id for r in res.rows)
    paths = report.write_outputs(res, tmp_path)
    with open(paths["csv"]) as f:
        header = next(csv.reader(f))
    assert tuple(header) == report.CSV_COLUMNS
    ET.parse(paths["svg"])


def test_divergence_reports_variant_context(tmp_path):
    m = tiny("connectivity", base_budget={**TINY["base_budget"], "lr": 1e8})
    with np.errstate(all="ignore"), \
            pytest.raises(optim.TrainingDivergedError, match="tiny-connectivity.*base model"):
        runners.run(m, ModelCache(tmp_path))


def test_result_cache_round_trip(tmp_path):
    c = ModelCache(tmp_path)
    key = key_of({"a": 1})
    assert c.result(key) is None
    c.store_result(key, {"penalty": 0.125})
    assert ModelCache(tmp_path).result(key) == {"penalty": 0.125}


# ---------------------------------------------------------------- CLI

def test_cli_validate_exit_codes(tmp_path, capsys):
    good = write_toml(tmp_path / "good.toml", TINY_TOML)
    bad = write_toml(tmp_path / "bad.toml", TINY_TOML.replace('"connectivity"', '"nope"'))
    assert cli.main(["validate", str(good)]) == 0
    assert "ok: tiny-connectivity" in capsys.readouterr().out
    assert cli.main(["validate", str(bad)]) == 1
    assert "invalid" in capsys.readouterr().out


def test_cli_run_exit_code_follows_assertions(tmp_path, capsys):
    good = write_toml(tmp_path / "good.toml", TINY_TOML)
    assert cli.main(["run", str(good)]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert (tmp_path / "out" / "tiny-connectivity.csv").exists()
    assert (tmp_path / "out" / "tiny-connectivity.svg").exists()
    strict = write_toml(tmp_path / "strict.toml",
                        TINY_TOML.replace("random_min = 0.0", "random_min = 2.0"))
    assert cli.main(["run", str(strict), "--out", str(tmp_path / "o2")]) == 1
    assert "FAIL  random_not_connected" in capsys.readouterr().out
    bad = write_toml(tmp_path / "bad.toml", TINY_TOML.replace('"connectivity"', '"nope"'))
    assert cli.main(["run", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_gradcheck_and_arch(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == len(cli.gradcheck_suite())
    assert cli.main(["arch", "small-resnet-8"]) == 0
    assert "small-resnet-8" in capsys.readouterr().out


def test_cli_train_stitch_fold_cka(tmp_path, capsys):
    a, b = tmp_path / "a.stch", tmp_path / "b.stch"
    common = ["--data", "synth:5:300", "--test", "synth:6:200"]
    for seed, path in ((0, a), (1, b)):
        assert cli.main(["train", "--width", "0.25", "--steps", "20", "--seed", str(seed),
                         "--out", str(path), *common]) == 0
    capsys.readouterr()
    assert cli.main(["stitch", "--top", str(a), "--bottom", str(b), "--cut", "2",
                     "--steps", "5", *common]) == 0
    assert '"penalty"' in capsys.readouterr().out
    assert cli.main(["fold", "--top", str(a), "--bottom", str(b), "--cut", "2", "--steps", "5",
                     "--out", str(tmp_path / "f.stch"), *common]) == 0
    out = capsys.readouterr().out
    doc = json.loads(out)
    assert abs(doc["folded_error"] - doc["stitched_error"]) <= 0.002
    assert cli.main(["cka", "--a", str(a), "--b", str(a), "--data", "synth:6:200"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [float(l.split()[1]) for l in lines] == pytest.approx([1.0] * len(lines), abs=1e-9)


def test_cka_curve_self_is_one(cache):
    m = tiny("connectivity")
    lab = runners.Lab(m, cache)
    a = lab.model(0)
    for _, v in metrics.cka_curve(a, a, lab.test_ds, "pool", 100):
        assert v == pytest.approx(1.0, abs=1e-10)
