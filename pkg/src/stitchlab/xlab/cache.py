"""Content-addressed caches for trained checkpoints and stitching results.

A base model is identified by (architecture spec, init seed, dataset
provenance, training config, extra tags); each distinct key is trained at most
once and stored as a checkpoint.  Stitching results are keyed by the digests
of the frozen models and everything else that determines them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from pathlib import Path

from .. import __version__, nn, optim

log = logging.getLogger("stitchlab.xlab")

DEFAULT_CACHE_DIR = ".stitchlab-cache"


def key_of(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def dataset_key(ds) -> str:
    return key_of(ds.provenance)


def resolve_cache_dir(cache_dir=None) -> Path:
    return Path(cache_dir or os.environ.get("STITCHLAB_CACHE", DEFAULT_CACHE_DIR))


class ModelCache:
    def __init__(self, root=None):
        self.root = resolve_cache_dir(root)
        (self.root / "models").mkdir(parents=True, exist_ok=True)
        (self.root / "results").mkdir(parents=True, exist_ok=True)
        self.trained = 0            # training runs actually executed by this instance
        self._memo: dict = {}

    # ------------------------------------------------------------ models
    def model_key(self, spec: nn.ArchitectureSpec, seed: int, dataset,
                  config: optim.TrainConfig, tags: dict | None = None) -> str:
        return key_of({"v": __version__, "spec": spec.to_dict(), "seed": seed,
                       "data": dataset.provenance, "config": config.to_dict(),
                       "tags": tags or {}})

    def _path(self, key: str, step: int | None = None) -> Path:
        suffix = "" if step is None else f"-s{step}"
        return self.root / "models" / f"{key}{suffix}.stch"

    def trained_model(self, spec: nn.ArchitectureSpec, seed: int, dataset,
                      config: optim.TrainConfig, test=None, checkpoints=(),
                      tags: dict | None = None, init=None):
        """Return ``{step: model}`` for the requested checkpoints plus the final step.

        ``init`` optionally supplies the starting model (defaults to
        ``nn.build(spec, seed)``); anything that shapes it must be in ``tags``.
        """
        key = self.model_key(spec, seed, dataset, config, tags)
        steps = sorted(set(checkpoints) | {config.total_steps})
        paths = {s: self._path(key, None if s == config.total_steps else s) for s in steps}
        out = {}
        for s, p in paths.items():
            memo = self._memo.get((key, s))
            if memo is None and p.exists():
                memo = self._memo[(key, s)] = nn.load(p)
            out[s] = memo
        if all(v is not None for v in out.values()):
            return out
        model = init.copy() if init is not None else nn.build(spec, seed)
        meta = {"cache_key": key, "train_config": config.digest(),
                "data": dataset_key(dataset)}

        def save_checkpoint(step, m):
            if step in paths and step != config.total_steps:
                nn.save(m, paths[step], {**meta, "step": step})

        t0 = time.time()
        log.info("training %s seed=%s width=%s on %d examples (%d steps)", spec.arch_id, seed,
                 spec.width, len(dataset), config.total_steps)
        _, hist = optim.train(model, dataset, config, test=test, callback=save_checkpoint)
        self.trained += 1
        final_err = hist.series("test", "error")
        nn.save(model, paths[config.total_steps],
                {**meta, "step": config.total_steps,
                 "test_error": final_err[-1][1] if final_err else None,
                 "seconds": round(time.time() - t0, 1)})
        return {s: nn.load(p) for s, p in paths.items()}

    def final(self, *args, **kw):
        models = self.trained_model(*args, **kw)
        return models[max(models)]

    # ------------------------------------------------------------ results
    def result(self, key: str):
        p = self.root / "results" / f"{key}.json"
        return json.loads(p.read_text()) if p.exists() else None

    def store_result(self, key: str, value) -> None:
        p = self.root / "results" / f"{key}.json"
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(value, sort_keys=True))
        tmp.replace(p)
