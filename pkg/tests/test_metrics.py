import math
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from fae import metrics
from fae.errors import MatchingError, NumericError, RegularizationError, ShapeError, UsageError


def _orthogonal(rng, d):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q


# ---------------------------------------------------------------- similarity

def test_query_self_similarity_is_one(rng):
    grid = rng.standard_normal((4, 5, 6))
    smap = metrics.patch_similarity_map(grid, (2, 3))
    assert smap.values[2, 3] == 1.0 and smap.values.shape == (4, 5)
    assert np.all(np.abs(smap.values) <= 1.0)


def test_identical_patches_score_one(rng):
    grid = rng.standard_normal((3, 3, 4))
    grid[0, 0] = grid[2, 1] * 3.0
    assert metrics.patch_similarity_map(grid, (2, 1)).values[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_similarity_matches_scalar_cosine(rng):
    grid = rng.standard_normal((3, 4, 5))
    smap = metrics.patch_similarity_map(grid, (1, 1))
    q = grid[1, 1].tolist()
    for r in range(3):
        for c in range(4):
            p = grid[r, c].tolist()
            dot = sum(a * b for a, b in zip(p, q))
            ref = dot / math.sqrt(sum(a * a for a in p)) / math.sqrt(sum(b * b for b in q))
            assert abs(smap.values[r, c] - ref) <= 1e-10


def test_zero_norm_patch_is_named(rng):
    grid = rng.standard_normal((2, 3, 4))
    grid[1, 2] = 0.0
    with pytest.raises(NumericError, match="row 1, col 2"):
        metrics.patch_similarity_map(grid, (0, 0))
    with pytest.raises(UsageError):
        metrics.patch_similarity_map(rng.standard_normal((2, 2, 3)), (2, 0))


def test_similarity_pgm_outlines_query(rng):
    smap = metrics.patch_similarity_map(rng.standard_normal((2, 2, 3)), (1, 0))
    data = metrics.similarity_pgm(smap, cell=4)
    assert data.startswith(b"P5\n8 8\n255\n")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), scale=st.floats(0.1, 10.0))
def test_isometry_preserves_rankings(seed, scale):
    rng = np.random.default_rng(seed)
    grid = rng.standard_normal((4, 4, 6))
    mapped = scale * grid @ _orthogonal(rng, 6)
    assert metrics.similarity_preservation(grid, mapped) == pytest.approx(1.0, abs=1e-12)


def test_independent_grids_give_near_zero_correlation(rng):
    a, b = rng.standard_normal((16, 16, 32)), rng.standard_normal((16, 16, 32))
    assert abs(metrics.similarity_preservation(a, b)) <= 0.1


def test_similarity_preservation_layout_and_degenerate_queries(rng):
    with pytest.raises(ShapeError):
        metrics.similarity_preservation(rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 2, 4)))
    # a grid whose patches are all parallel gives constant similarity rows
    flat = np.ones((3, 3, 4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(NumericError):
            metrics.similarity_preservation(flat, flat)


# ---------------------------------------------------------------- matching

def _object_grid(rng):
    g = rng.normal(0, 0.05, (8, 8, 16))
    g[2:6, 2:6] += 4 * np.eye(16)[0]
    return g


def test_self_matching_is_identity(rng):
    g = _object_grid(rng)
    ms = metrics.cross_image_match(g, g, n_pairs=8, seed=1)
    assert len(ms.pairs) == 8
    for src, dst, score in ms.pairs:
        assert src == dst and score == pytest.approx(1.0)
        assert 2 <= src[0] < 6 and 2 <= src[1] < 6


def test_matching_validation(rng):
    g = _object_grid(rng)
    with pytest.raises(UsageError):
        metrics.cross_image_match(g, g, k_clusters=1)
    with pytest.raises(MatchingError, match="exceeds"):
        metrics.cross_image_match(g, g, n_pairs=40)
    with pytest.raises(ShapeError):
        metrics.cross_image_match(g, g[..., :8])


def test_matching_is_deterministic(rng):
    a, b = _object_grid(rng), _object_grid(rng)
    assert metrics.cross_image_match(a, b, seed=3) == metrics.cross_image_match(a, b, seed=3)


# ---------------------------------------------------------------- linear probe

def _blobs(rng, n_per=30, k=4, d=8, spread=0.3):
    centres = rng.standard_normal((k, d)) * 3
    x = np.concatenate([c + spread * rng.standard_normal((n_per, d)) for c in centres])
    return x, np.repeat(np.arange(k), n_per)


def test_probe_separates_blobs(rng):
    x, y = _blobs(rng)
    assert metrics.linear_probe(x, y, x, y) == 1.0


def test_probe_on_shuffled_labels_is_chance(rng):
    k, n = 4, 2000
    x = rng.standard_normal((n, 8))
    xt = rng.standard_normal((n, 8))
    acc = metrics.linear_probe(x, rng.integers(0, k, n), xt, rng.integers(0, k, n), num_classes=k)
    sigma = math.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 0.25) <= 3 * sigma


def test_unregularized_rank_deficient_probe_raises(rng):
    x, y = _blobs(rng, n_per=2, d=16)
    with pytest.raises(RegularizationError):
        metrics.fit_linear_probe(x, y, l2_reg=0.0)
    with pytest.raises(UsageError):
        metrics.fit_linear_probe(x, y, l2_reg=-1.0)


def test_probe_invariant_under_orthogonal_map(rng):
    x, y = _blobs(rng, n_per=50, spread=1.5)
    xt, yt = _blobs(np.random.default_rng(9), n_per=50, spread=1.5)
    q = _orthogonal(rng, 8)
    a = metrics.fit_linear_probe(x, y).predict(xt)
    b = metrics.fit_linear_probe(x @ q, y).predict(xt @ q)
    assert (a == b).mean() >= 0.99


def test_pool_averages_patches(rng):
    g = rng.standard_normal((3, 2, 2, 5))
    assert np.allclose(metrics.pool(g), g.mean((1, 2)))


# ---------------------------------------------------------------- retrieval

def test_identity_retrieval_is_perfect(rng):
    x = rng.standard_normal((20, 6))
    assert metrics.retrieval_top1(x, x) == (1.0, 1.0)


def test_orthogonal_distractors(rng):
    basis = _orthogonal(rng, 8)
    q = basis[:4] + 0.01 * rng.standard_normal((4, 8))
    gallery = np.concatenate([basis[:4], basis[4:]])
    assert metrics.retrieval_top1(q, gallery) == (1.0, 1.0)
    # a swapped ground truth costs both directions
    fwd, rev = metrics.retrieval_top1(q, gallery, [1, 0, 2, 3])
    assert fwd == 0.5 and rev == 0.5


def test_retrieval_errors(rng):
    with pytest.raises(UsageError):
        metrics.retrieval_top1(np.zeros((0, 3)), rng.standard_normal((2, 3)))
    with pytest.raises(ShapeError):
        metrics.retrieval_top1(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), [0])


# ---------------------------------------------------------------- frechet

def _stats(mean, cov, n=100):
    return metrics.GaussianStats(np.asarray(mean, float), np.asarray(cov, float), n)


def test_frechet_examples():
    n = 5
    eye = np.eye(n)
    assert metrics.frechet_distance(_stats(np.zeros(n), eye), _stats(np.zeros(n), eye)) == 0.0
    d = np.arange(n, dtype=float)
    assert metrics.frechet_distance(_stats(d, eye), _stats(np.zeros(n), eye)) == pytest.approx(d @ d)
    assert metrics.frechet_distance(_stats(np.zeros(n), eye), _stats(np.zeros(n), 4 * eye)) == pytest.approx(n)


def test_frechet_symmetric_and_matches_sqrtm(rng):
    x, y = rng.standard_normal((200, 6)), rng.standard_normal((150, 6)) @ rng.standard_normal((6, 6))
    a, b = metrics.gaussian_stats(x), metrics.gaussian_stats(y)
    fd = metrics.frechet_distance(a, b)
    assert fd == pytest.approx(metrics.frechet_distance(b, a), rel=1e-9)
    cross = scipy.linalg.sqrtm(a.covariance @ b.covariance).real
    d = a.mean - b.mean
    ref = d @ d + np.trace(a.covariance + b.covariance - 2 * cross)
    assert fd == pytest.approx(ref, rel=1e-8)


def test_frechet_rejects_indefinite_covariance():
    bad = np.diag([1.0, -1e-3])
    with pytest.raises(NumericError):
        metrics.frechet_distance(_stats(np.zeros(2), bad), _stats(np.zeros(2), np.eye(2)))
    with pytest.raises(UsageError):
        metrics.gaussian_stats(np.zeros((1, 3)))
    with pytest.raises(NumericError):
        _stats(np.zeros(2), [[1.0, 0.5], [0.0, 1.0]])
