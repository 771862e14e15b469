"""Linear CKA between representation matrices, plus the spurious-column probe."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    """A representation with zero covariance has no defined CKA."""


@dataclass
class ReprMatrix:
    values: np.ndarray                  # (n, d) float64
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("representation matrix must be 2-D (n x d)")
        if self.values.shape[0] < 2:
            raise ValueError("need at least 2 examples")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("representation contains non-finite entries")

    @property
    def shape(self):
        return self.values.shape


def _as_matrix(x) -> np.ndarray:
    return x.values if isinstance(x, ReprMatrix) else np.asarray(x, dtype=np.float64)


def extract_repr(model, cut: int, dataset, pooling: str = "pool", max_n: int | None = None,
                 batch_size: int = 500) -> ReprMatrix:
    """Per-example features at ``cut``: ``pool`` averages each channel over space,
    ``flatten`` keeps the whole C·H·W vector."""
    n = len(dataset.labels) if max_n is None else max_n
    if n > len(dataset.labels):
        raise ValueError(f"max_n={n} exceeds dataset size {len(dataset.labels)}")
    if pooling not in ("pool", "flatten"):
        raise ValueError(f"unknown pooling {pooling!r}")
    act = model.activations_at(cut, dataset.images[:n], batch_size)
    if pooling == "pool":
        feats = act.mean(axis=(2, 3), dtype=np.float64)
    else:
        feats = act.reshape(n, -1).astype(np.float64)
    return ReprMatrix(feats, {"cut": cut, "pooling": pooling,
                              "arch": getattr(getattr(model, "spec", None), "arch_id", None)})


def linear_cka(x, y) -> float:
    """``||Cov(x, y)||_F^2 / (||Cov(x)||_F * ||Cov(y)||_F)`` with column-centred data.

    The 1/(n-1) normalisers cancel.  When the feature count exceeds the
    sample count the same Frobenius norms are evaluated through n×n Gram
    matrices (``||Xc^T Yc||_F^2 == <Xc Xc^T, Yc Yc^T>``).
    """
    a, b = _as_matrix(x), _as_matrix(y)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"example counts differ: {a.shape[0]} vs {b.shape[0]}")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    n = a.shape[0]
    if max(a.shape[1], b.shape[1]) > n:
        ka, kb = a @ a.T, b @ b.T
        cross = float(np.sum(ka * kb))
        na, nb = np.linalg.norm(ka), np.linalg.norm(kb)
    else:
        cross = float(np.sum((a.T @ b) ** 2))
        na, nb = np.linalg.norm(a.T @ a), np.linalg.norm(b.T @ b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("representation has zero covariance")
    return float(min(max(cross / (na * nb), 0.0), 1.0))


def augment_spurious(x, k: int, seed: int) -> ReprMatrix:
    """Append ``k`` independent standard-normal columns."""
    if k < 0:
        raise ValueError("k must be non-negative")
    a = _as_matrix(x)
    prov = dict(x.provenance) if isinstance(x, ReprMatrix) else {}
    if k == 0:
        return ReprMatrix(a.copy(), prov)
    noise = np.random.default_rng(seed).standard_normal((a.shape[0], k))
    return ReprMatrix(np.concatenate([a, noise], axis=1), {**prov, "spurious": k, "seed": seed})


def cka_curve(model_a, model_b, dataset, pooling: str = "pool", max_n: int | None = 2048,
              cuts=None) -> list[tuple[int, float]]:
    """CKA between the two models at every shared cut point."""
    if cuts is None:
        cuts = range(min(model_a.num_cuts, model_b.num_cuts) + 1)
    max_n = min(max_n or len(dataset.labels), len(dataset.labels))
    out = []
    for cut in cuts:
        xa = extract_repr(model_a, cut, dataset, pooling, max_n)
        xb = extract_repr(model_b, cut, dataset, pooling, max_n)
        out.append((cut, linear_cka(xa, xb)))
    return out
