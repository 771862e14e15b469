import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from stitchlab import metrics
from stitchlab.data import generate_synthetic
from stitchlab.metrics import ReprMatrix, linear_cka
from stitchlab.nn import ArchitectureSpec, build


def direct_cka(x, y):
    """Definition by explicit loops over centred entries."""
    n, dx = len(x), len(x[0])
    dy = len(y[0])
    mx = [sum(x[i][a] for i in range(n)) / n for a in range(dx)]
    my = [sum(y[i][b] for i in range(n)) / n for b in range(dy)]

    def cov(u, mu, a, v, mv, b):
        return sum((u[i][a] - mu[a]) * (v[i][b] - mv[b]) for i in range(n)) / (n - 1)

    cross = sum(cov(x, mx, a, y, my, b) ** 2 for a in range(dx) for b in range(dy))
    sxx = sum(cov(x, mx, a, x, mx, b) ** 2 for a in range(dx) for b in range(dx)) ** 0.5
    syy = sum(cov(y, my, a, y, my, b) ** 2 for a in range(dy) for b in range(dy)) ** 0.5
    return cross / (sxx * syy)


def rand(seed, n=50, d=8):
    return np.random.default_rng(seed).standard_normal((n, d))


def test_hand_case_matches_direct_definition():
    x = [[1.0, 2.0], [3.0, -1.0], [0.5, 4.0]]
    y = [[2.0, 0.0], [1.0, 1.0], [-3.0, 2.5]]
    assert linear_cka(np.array(x), np.array(y)) == pytest.approx(direct_cka(x, y), abs=1e-12)


@given(seed=st.integers(0, 10_000), n=st.integers(3, 7), dx=st.integers(1, 4),
       dy=st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_random_small_cases_match_direct_definition(seed, n, dx, dy):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((n, dx)), rng.standard_normal((n, dy))
    assert linear_cka(x, y) == pytest.approx(direct_cka(x.tolist(), y.tolist()), abs=1e-12)


def test_gram_path_matches_covariance_path():
    x, y = rand(0, n=20, d=5), rand(1, n=20, d=5)
    wide = np.concatenate([x, np.zeros((20, 30))], axis=1)     # d > n, same covariance content
    assert linear_cka(wide, y) == pytest.approx(linear_cka(x, y), abs=1e-12)


def test_self_similarity_and_symmetry():
    x, y = rand(2), rand(3, d=5)
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-10)
    assert abs(linear_cka(x, y) - linear_cka(y, x)) <= 1e-12


def test_orthogonal_and_scale_invariance():
    x, y = rand(4), rand(5, d=6)
    q = ortho_group.rvs(8, random_state=0)
    base = linear_cka(x, y)
    assert linear_cka(x @ q, y) == pytest.approx(base, abs=1e-8)
    assert linear_cka(y, x @ q) == pytest.approx(base, abs=1e-8)
    assert linear_cka(3.7 * x, y) == pytest.approx(base, abs=1e-8)


def test_range():
    for s in range(10):
        v = linear_cka(rand(s), rand(s + 100))
        assert 0.0 <= v <= 1.0


def test_degenerate_and_mismatched_inputs():
    with pytest.raises(metrics.DegenerateInputError):
        linear_cka(np.ones((10, 3)), rand(0, n=10))
    with pytest.raises(ValueError):
        linear_cka(rand(0, n=10), rand(0, n=11))
    with pytest.raises(ValueError):
        ReprMatrix(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ReprMatrix(np.array([[np.nan, 1.0], [0.0, 1.0]]))


def test_augment_spurious():
    x = ReprMatrix(rand(6, n=512, d=64))
    assert np.array_equal(metrics.augment_spurious(x, 0, 1).values, x.values)
    aug = metrics.augment_spurious(x, 1000, seed=1)
    assert aug.shape == (512, 1064)
    assert np.array_equal(aug.values[:, :64], x.values)
    assert np.all(np.abs(aug.values[:, 64:].mean(axis=0)) < 0.2)
    assert linear_cka(x, aug) <= 1.0 - 0.05
    with pytest.raises(ValueError):
        metrics.augment_spurious(x, -1, 0)


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(0, 40)


def test_extract_repr_shapes(tiny):
    model = build(ArchitectureSpec(), 0)
    pooled = metrics.extract_repr(model, 4, tiny, "pool")
    assert pooled.shape == (40, 64)
    flat = metrics.extract_repr(model, 1, tiny, "flatten", max_n=10)
    assert flat.shape == (10, 16 * 15 * 15)
    # pooling is flatten followed by per-channel spatial averaging
    full = metrics.extract_repr(model, 3, tiny, "flatten").values.reshape(40, 32, 64)
    np.testing.assert_allclose(metrics.extract_repr(model, 3, tiny, "pool").values,
                               full.mean(axis=2), rtol=1e-6, atol=1e-7)
    with pytest.raises(ValueError):
        metrics.extract_repr(model, 1, tiny, max_n=41)


def test_cka_curve_self_is_one(tiny):
    model = build(ArchitectureSpec(), 1)
    curve = metrics.cka_curve(model, model, tiny)
    assert [c for c, _ in curve] == [0, 1, 2, 3, 4]
    assert all(v == pytest.approx(1.0, abs=1e-10) for _, v in curve)
