"""Experiment runner: manifests, cached models, per-experiment runners, reports, CLI."""
from .cache import ModelCache
from .manifest import ExperimentManifest, ManifestError, load_manifest
from .report import emit_csv, emit_json, emit_svg
from .runners import RunResult, run

__all__ = ["ExperimentManifest", "ManifestError", "ModelCache", "RunResult", "emit_csv",
           "emit_json", "emit_svg", "load_manifest", "run"]
