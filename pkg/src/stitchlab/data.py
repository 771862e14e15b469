"""Datasets: a procedural shapes task, CIFAR-10 binaries, and label manipulations.

Every transform returns a new :class:`LabeledDataset` and appends a record to
its provenance chain; :func:`replay` rebuilds a dataset from that chain alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("disk", "ring", "square", "triangle", "cross")
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
# Animals -> 0, objects -> 1.  Bird is placed with the animals.
CIFAR10_COARSE = {0: 1, 1: 1, 2: 0, 3: 0, 4: 0, 5: 0, 6: 0, 7: 0, 8: 1, 9: 1}
# Round shapes (disk, ring) -> 0, angular shapes -> 1, for either colour regime.
SYNTH_COARSE = {c: 0 if c % len(SHAPES) in (0, 1) else 1 for c in range(10)}

_CIFAR_RECORD = 1 + 3 * 32 * 32
_CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST_FILE = "test_batch.bin"


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset must be non-empty")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree in length")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def _derive(self, images, labels, classes, record) -> "LabeledDataset":
        return LabeledDataset(images, labels, classes, [*self.provenance, record])

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


# ---------------------------------------------------------------- synthetic task

def _shape_sdf(kind: int, u, v, r):
    if kind == 0:
        return np.hypot(u, v) - r
    if kind == 1:
        return np.abs(np.hypot(u, v) - 0.75 * r) - 0.25 * r
    if kind == 2:
        return np.maximum(np.abs(u), np.abs(v)) - 0.8 * r
    if kind == 3:
        d = -np.inf
        for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            d = np.maximum(d, u * np.cos(a) + v * np.sin(a))
        return d - 0.5 * r
    arm = 0.3 * r
    return np.minimum(np.maximum(np.abs(u) - r, np.abs(v) - arm),
                      np.maximum(np.abs(u) - arm, np.abs(v) - r))


def _hsv_to_rgb(h, s, v):
    h = np.asarray(h) % 1.0
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    return np.array(table[int(i)], dtype=np.float64)


def generate_synthetic(seed: int, n: int, classes: int = 10) -> LabeledDataset:
    """Procedural 32×32 RGB shapes.

    Class ``c`` is shape ``SHAPES[c % 5]`` drawn in colour regime ``c // 5``
    (regime 0: warm foreground hues, regime 1: cool).  Position, scale,
    rotation, background colour, a background gradient and pixel noise are
    nuisances.  Labels are exactly balanced up to ±1.
    """
    if not 2 <= classes <= 2 * len(SHAPES):
        raise ValueError(f"synthetic task supports 2..{2 * len(SHAPES)} classes")
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    grid = (np.arange(32) + 0.5) / 16.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, 3, 32, 32), dtype=np.float32)
    for i, c in enumerate(labels):
        shape, regime = c % len(SHAPES), c // len(SHAPES)
        cx, cy = rng.uniform(-0.45, 0.45, size=2)
        r = rng.uniform(0.28, 0.5)
        th = rng.uniform(0, 2 * np.pi)
        u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
        v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
        mask = np.clip(0.5 - _shape_sdf(shape, u, v, r) * 16.0, 0.0, 1.0)
        hue = rng.uniform(-0.1, 0.1) if regime == 0 else rng.uniform(0.45, 0.65)
        fg = _hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.55, 1.0))
        bg = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.6), rng.uniform(0.15, 0.7))
        ga = rng.uniform(-0.15, 0.15, size=2)
        shade = 1.0 + ga[0] * xx + ga[1] * yy
        img = bg[:, None, None] * shade + (fg - bg)[:, None, None] * mask
        img += rng.normal(0.0, 0.06, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels.astype(np.int64), classes,
                          [{"op": "synthetic", "seed": seed, "n": n, "classes": classes}])


def parse_uri(uri: str) -> LabeledDataset:
    """Resolve ``synth:<seed>:<n>`` (optionally ``:<classes>``) or ``cifar10:<dir>:<train|test>``."""
    kind, _, rest = uri.partition(":")
    if kind == "synth":
        parts = [int(p) for p in rest.split(":")]
        if len(parts) not in (2, 3):
            raise ValueError(f"bad synthetic URI {uri!r}")
        return generate_synthetic(*parts)
    if kind == "cifar10":
        directory, _, split = rest.rpartition(":")
        train, test = load_cifar10(directory)
        return train if split == "train" else test
    raise ValueError(f"unknown dataset URI {uri!r}")


# ---------------------------------------------------------------- CIFAR-10

def _read_cifar_file(path: Path, expected_records: int | None = None):
    if not path.exists():
        raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD:
        raise DatasetFormatError(f"{path}: length {raw.size} is not a multiple of "
                                 f"{_CIFAR_RECORD} bytes per record")
    records = raw.size // _CIFAR_RECORD
    if expected_records is not None and records != expected_records:
        raise DatasetFormatError(f"{path}: {records} records, expected {expected_records}")
    raw = raw.reshape(records, _CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetFormatError(f"{path}: label byte out of range")
    images = (raw[:, 1:].reshape(records, 3, 32, 32).astype(np.float32) / 255.0)
    return images, labels


def load_cifar10(directory, records_per_file: int | None = 10000):
    """Read the binary CIFAR-10 release (5 train batches + 1 test batch)."""
    directory = Path(directory)
    parts = [_read_cifar_file(directory / f, records_per_file) for f in _CIFAR_TRAIN_FILES]
    timg, tlab = _read_cifar_file(directory / _CIFAR_TEST_FILE, records_per_file)
    train = LabeledDataset(np.concatenate([p[0] for p in parts]),
                           np.concatenate([p[1] for p in parts]), 10,
                           [{"op": "cifar10", "dir": str(directory), "split": "train"}])
    test = LabeledDataset(timg, tlab, 10,
                          [{"op": "cifar10", "dir": str(directory), "split": "test"}])
    return train, test


# ---------------------------------------------------------------- transforms

def subset(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Uniform sample of ``n`` examples without replacement."""
    if not 0 < n <= len(ds):
        raise ValueError(f"subset size {n} not in [1, {len(ds)}]")
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    return ds._derive(ds.images[idx], ds.labels[idx], ds.classes,
                      {"op": "subset", "n": n, "seed": seed})


def disjoint_split(ds: LabeledDataset, k: int, seed: int) -> list[LabeledDataset]:
    """Partition into ``k`` equal disjoint parts (remainder dropped)."""
    if k < 1 or k > len(ds):
        raise ValueError(f"cannot split {len(ds)} examples into {k} parts")
    size = len(ds) // k
    perm = np.random.default_rng(seed).permutation(len(ds))
    out = []
    for part in range(k):
        idx = perm[part * size:(part + 1) * size]
        out.append(ds._derive(ds.images[idx], ds.labels[idx], ds.classes,
                              {"op": "disjoint_split", "k": k, "part": part, "seed": seed}))
    return out


def corrupt_labels(ds: LabeledDataset, p: float, seed: int) -> LabeledDataset:
    """Resample the label of exactly ``round(p*N)`` uniformly chosen examples.

    New labels are uniform over all classes and may coincide with the old one.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"corruption fraction must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    m = int(round(p * len(ds)))
    idx = rng.permutation(len(ds))[:m]
    labels = ds.labels.copy()
    labels[idx] = rng.integers(0, ds.classes, size=m)
    out = ds._derive(ds.images, labels, ds.classes, {"op": "corrupt_labels", "p": p, "seed": seed})
    out.touched = np.sort(idx)
    return out


def coarsen_labels(ds: LabeledDataset, mapping: dict) -> LabeledDataset:
    mapping = {int(k): int(v) for k, v in mapping.items()}
    missing = set(range(ds.classes)) - set(mapping)
    if missing:
        raise ValueError(f"mapping is not total: classes {sorted(missing)} unmapped")
    classes = max(mapping.values()) + 1
    lut = np.array([mapping[c] for c in range(ds.classes)], dtype=np.int64)
    return ds._derive(ds.images, lut[ds.labels], classes,
                      {"op": "coarsen_labels", "mapping": {str(k): v for k, v in mapping.items()}})


def replay(provenance: list) -> LabeledDataset:
    """Rebuild a dataset from its provenance chain."""
    head, *rest = provenance
    if head["op"] == "synthetic":
        ds = generate_synthetic(head["seed"], head["n"], head["classes"])
    elif head["op"] == "cifar10":
        train, test = load_cifar10(head["dir"])
        ds = train if head["split"] == "train" else test
    else:
        raise ValueError(f"unknown source op {head['op']!r}")
    for rec in rest:
        op = rec["op"]
        if op == "subset":
            ds = subset(ds, rec["n"], rec["seed"])
        elif op == "disjoint_split":
            ds = disjoint_split(ds, rec["k"], rec["seed"])[rec["part"]]
        elif op == "corrupt_labels":
            ds = corrupt_labels(ds, rec["p"], rec["seed"])
        elif op == "coarsen_labels":
            ds = coarsen_labels(ds, rec["mapping"])
        else:
            raise ValueError(f"unknown transform {op!r}")
    return ds
