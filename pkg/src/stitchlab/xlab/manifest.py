"""Experiment manifests: TOML files describing one experiment.

Top-level keys::

    id, kind, dataset, test_dataset, arch, width, seeds, stitch_seeds, cuts,
    output_dir, cache_dir
    [family]        stitching family (kind, kernel_size, bn_before, bn_after, init)
    [base_budget]   TrainConfig fields for base models
    [stitch_budget] TrainConfig fields for stitchers
    [params]        kind-specific variation parameters (see KIND_PARAMS)
    [thresholds]    pass/fail thresholds (see KIND_THRESHOLDS)
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

from .. import data
from ..nn import ARCHITECTURES, WIDTHS, ArchitectureSpec
from ..optim import TrainConfig
from ..stitching import STITCH_BUDGET, StitchFamily

KINDS = ("connectivity", "random_sanity", "more_data", "more_time", "more_width",
         "label_quality", "kernel_ablation", "finetune_baseline", "freeze_training",
         "cka_compare")

# Desk-scale base recipe: a proportional scale-down of the reference SGD schedule.
BASE_BUDGET = TrainConfig(optimizer="sgd", lr=0.05, momentum=0.9, weight_decay=1e-4,
                          schedule="step", drops=(1500, 2250), drop_factor=0.2,
                          total_steps=3000, batch_size=64, eval_every=1000)

KIND_PARAMS = {
    "connectivity": {"self": True, "disjoint": True, "random_reference": True,
                     "random_seed": 1000, "disjoint_seed": 0},
    "random_sanity": {"random_seed": 1000, "compare_seed": True, "pooling": "pool",
                      "cka_n": 2048},
    "more_data": {"top_size": 2000, "sizes": [1000, 2000, 5000], "subset_seed": 0},
    "more_time": {"checkpoints": [750, 1500, 3000], "top_checkpoint": 1500},
    "more_width": {"widths": [0.25, 1.0, 2.0], "reference_width": 1.0},
    "label_quality": {"coarse": True, "noise": [0.1, 0.5, 1.0], "corrupt_seed": 0,
                      "random_reference": True, "random_seed": 1000},
    "kernel_ablation": {"kernel_sizes": [1, 3, 5, 7, 9]},
    "finetune_baseline": {"finetune_cuts": [1], "random_seed": 1000, "init_seed": 77},
    "freeze_training": {"small_size": 1000, "subset_seed": 0, "init_seed": 77,
                        "freeze": None},
    "cka_compare": {"poolings": ["pool", "flatten"], "cka_n": 2048, "random_seed": 1000,
                    "spurious_k": 1000, "spurious_cut": -1, "spurious_seed": 0},
}

KIND_THRESHOLDS = {
    "connectivity": {"threshold": 0.05, "noise": 0.01, "random_min": 0.20},
    "random_sanity": {"monotone_eps": 0.02, "shallow_max": 0.05, "deep_rise": 0.15,
                      "deep_gap": 0.10},
    "more_data": {"eps": 0.01},
    "more_time": {"eps": 0.01, "noise": 0.01},
    "more_width": {"eps": 0.01},
    "label_quality": {"shallow_max": 0.05, "deep_min": 0.20, "random_band": 0.10},
    "kernel_ablation": {"max_spread": 0.02},
    "finetune_baseline": {"finetune_gap": 0.03, "stitch_min": 0.15},
    "freeze_training": {"select_tau": 0.01, "max_gap": 0.03},
    "cka_compare": {"cka_drop": 0.05, "penalty_change": 0.01},
}


class ManifestError(ValueError):
    pass


@dataclass
class ExperimentManifest:
    id: str
    kind: str
    dataset: str
    test_dataset: str
    arch: str = "small-resnet-8"
    width: float = 1.0
    seeds: list = field(default_factory=lambda: [0, 1])
    stitch_seeds: list = field(default_factory=lambda: [0])
    cuts: list | None = None
    family: dict = field(default_factory=dict)
    base_budget: dict = field(default_factory=dict)
    stitch_budget: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    output_dir: str = "results"
    cache_dir: str | None = None

    # ------------------------------------------------------------ resolution
    def spec(self, width: float | None = None, classes: int = 10) -> ArchitectureSpec:
        return ArchitectureSpec(self.arch, self.width if width is None else width,
                                classes=classes)

    def base_config(self, **kw) -> TrainConfig:
        return BASE_BUDGET.replace(**{**self.base_budget, **kw})

    def stitch_config(self) -> TrainConfig:
        return STITCH_BUDGET.replace(**self.stitch_budget)

    def stitch_family(self) -> StitchFamily:
        return StitchFamily(**self.family)

    def param(self, key):
        return self.params.get(key, KIND_PARAMS[self.kind][key])

    def threshold(self, key) -> float:
        return float(self.thresholds.get(key, KIND_THRESHOLDS[self.kind][key]))

    # ------------------------------------------------------------ identity
    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def digest(self) -> str:
        """Content hash; output and cache locations do not affect results."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("cache_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # ------------------------------------------------------------ checks
    def validate(self, resolve: bool = True) -> "ExperimentManifest":
        """Check the schema and, with ``resolve``, that every dataset URI loads."""
        if self.kind not in KINDS:
            raise ManifestError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.arch not in ARCHITECTURES:
            raise ManifestError(f"unknown architecture {self.arch!r}")
        if self.width not in WIDTHS:
            raise ManifestError(f"width must be one of {WIDTHS}")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ManifestError("seeds must be a non-empty list of integers")
        needs_two = {"connectivity", "more_data", "label_quality", "kernel_ablation",
                     "more_width", "finetune_baseline", "freeze_training", "cka_compare"}
        if self.kind in needs_two and len(self.seeds) < 2:
            raise ManifestError(f"{self.kind} needs at least 2 seeds")
        if not self.stitch_seeds:
            raise ManifestError("stitch_seeds must be non-empty")
        unknown = set(self.params) - set(KIND_PARAMS[self.kind])
        if unknown:
            raise ManifestError(f"unknown params for {self.kind}: {sorted(unknown)}")
        unknown = set(self.thresholds) - set(KIND_THRESHOLDS[self.kind])
        if unknown:
            raise ManifestError(f"unknown thresholds for {self.kind}: {sorted(unknown)}")
        try:
            self.base_config()
            stitch = self.stitch_config()
            self.stitch_family()
            self.spec()
        except (TypeError, ValueError) as e:
            raise ManifestError(f"invalid budget/family/architecture: {e}") from e
        if stitch.trainable != "stitcher-only":
            raise ManifestError("stitch_budget.trainable must be 'stitcher-only'")
        if self.kind == "more_width":
            for w in self.param("widths"):
                if w not in WIDTHS:
                    raise ManifestError(f"width {w} not in {WIDTHS}")
        if self.kind == "more_time":
            cps = self.param("checkpoints")
            if self.param("top_checkpoint") not in cps:
                raise ManifestError("top_checkpoint must be one of checkpoints")
            if max(cps) > self.base_config().total_steps:
                raise ManifestError("checkpoints exceed base_budget.total_steps")
        if self.kind == "kernel_ablation" and 1 not in self.param("kernel_sizes"):
            raise ManifestError("kernel ablation must include kernel size 1")
        if resolve:
            for uri in (self.dataset, self.test_dataset):
                try:
                    load_dataset(uri)
                except (OSError, ValueError) as e:
                    raise ManifestError(f"dataset {uri!r} not resolvable: {e}") from e
        return self


_DATASETS: dict = {}


def load_dataset(uri: str):
    """Resolve a dataset URI once per process."""
    if uri not in _DATASETS:
        _DATASETS[uri] = data.parse_uri(uri)
    return _DATASETS[uri]


def from_dict(d: dict) -> ExperimentManifest:
    d = dict(d)
    missing = {"id", "kind", "dataset", "test_dataset"} - set(d)
    if missing:
        raise ManifestError(f"manifest missing required keys: {sorted(missing)}")
    unknown = set(d) - set(ExperimentManifest.__dataclass_fields__)
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    return ExperimentManifest(**d)


def load_manifest(path) -> ExperimentManifest:
    path = Path(path)
    try:
        d = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ManifestError(f"{path}: {e}") from e
    m = from_dict(d)
    if not Path(m.output_dir).is_absolute():
        m.output_dir = str(path.parent / m.output_dir)
    if m.cache_dir and not Path(m.cache_dir).is_absolute():
        m.cache_dir = str(path.parent / m.cache_dir)
    return m
