"""Semantic-preservation and quality metrics on patch grids and pooled features."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from sklearn.cluster import KMeans

from .errors import MatchingError, NumericError, RegularizationError, ShapeError, UsageError
from .formats import encode_pgm
from .runtime import numpy_rng, write_csv

log = logging.getLogger("fae")


def _values(grid) -> np.ndarray:
    return np.asarray(getattr(grid, "values", grid), dtype=np.float64)


def _unit(vecs, names=None):
    norms = np.linalg.norm(vecs, axis=-1, keepdims=True)
    bad = np.argwhere(norms[..., 0] == 0)
    if len(bad):
        where = tuple(int(i) for i in bad[0]) if names is None else names(bad[0])
        raise NumericError(f"zero-norm vector at {where}")
    return vecs / norms


# --------------------------------------------------------------------------
# similarity maps
# --------------------------------------------------------------------------

@dataclass
class SimilarityMap:
    query_index: tuple
    values: np.ndarray      # (H, W) cosine similarities


def patch_similarity_map(grid, query) -> SimilarityMap:
    """Cosine similarity of every patch of an (H, W, D) grid to the query patch."""
    x = _values(grid)
    if x.ndim != 3:
        raise ShapeError(f"expected an (H, W, D) grid, got shape {x.shape}")
    H, W, _ = x.shape
    r, c = query
    if not (0 <= r < H and 0 <= c < W):
        raise UsageError(f"query {query} outside {H}x{W} grid")
    u = _unit(x, names=lambda idx: f"patch (row {idx[0]}, col {idx[1]})")
    sims = np.clip(u @ u[r, c], -1.0, 1.0)
    sims[r, c] = 1.0
    return SimilarityMap((int(r), int(c)), sims)


def _query_spearman(a, b):
    """Per-query Spearman correlations between two (T, D) patch sets, query excluded; NaN if degenerate."""
    ua, ub = _unit(a), _unit(b)
    sa, sb = ua @ ua.T, ub @ ub.T
    T = len(a)
    out = np.full(T, np.nan)
    mask = ~np.eye(T, dtype=bool)
    for q in range(T):
        ra, rb = sa[q][mask[q]], sb[q][mask[q]]
        if np.ptp(ra) == 0 or np.ptp(rb) == 0:
            continue
        out[q] = stats.spearmanr(ra, rb).statistic
    return out


def similarity_preservation(orig, lat) -> float:
    """Mean over query patches of the Spearman correlation between the cosine
    rankings induced by the two representations. Accepts (H, W, D) grids or
    (N, H, W, D) batches; grids may differ in channel dim but not in layout."""
    a, b = _values(orig), _values(lat)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"grid layouts differ: {a.shape[:-1]} vs {b.shape[:-1]}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    corrs = np.concatenate([_query_spearman(x.reshape(-1, x.shape[-1]), y.reshape(-1, y.shape[-1]))
                            for x, y in zip(a, b)])
    n_bad = int(np.isnan(corrs).sum())
    if n_bad:
        warnings.warn(f"{n_bad} queries with constant similarity vectors excluded", RuntimeWarning)
    if n_bad == len(corrs):
        raise NumericError("all similarity vectors are degenerate")
    return float(np.nanmean(corrs))


def similarity_pgm(smap: SimilarityMap, cell: int = 8) -> bytes:
    """Grayscale map (black = -1, white = 1) with the query cell outlined in alternating black/white."""
    v = (smap.values + 1) / 2
    img = np.kron(v, np.ones((cell, cell)))
    r, c = smap.query_index
    y0, x0 = r * cell, c * cell
    ring = np.zeros((cell, cell), dtype=bool)
    ring[[0, -1], :] = True
    ring[:, [0, -1]] = True
    checker = (np.add.outer(np.arange(cell), np.arange(cell)) % 2).astype(float)
    block = img[y0:y0 + cell, x0:x0 + cell]
    block[ring] = checker[ring]
    return encode_pgm(img)


# --------------------------------------------------------------------------
# cross-image matching
# --------------------------------------------------------------------------

@dataclass
class MatchSet:
    pairs: list             # ((ra, ca), (rb, cb), score)
    k_clusters: int
    n_pairs: int
    foreground: int


def foreground_patches(grid, k_clusters: int, seed: int = 0, foreground: int | None = None):
    """(labels (H, W), chosen cluster): K-Means over patches; foreground is the
    cluster whose mean lies farthest from the image's mean patch embedding."""
    if k_clusters < 2:
        raise UsageError(f"k_clusters must be >= 2, got {k_clusters}")
    x = _values(grid)
    H, W, D = x.shape
    flat = x.reshape(-1, D)
    km = KMeans(n_clusters=k_clusters, max_iter=100, n_init=1, random_state=seed % (2 ** 32)).fit(flat)
    labels = km.labels_
    if foreground is None:
        centre = flat.mean(0)
        dists = [np.linalg.norm(flat[labels == k].mean(0) - centre) if (labels == k).any() else -np.inf
                 for k in range(k_clusters)]
        foreground = int(np.argmax(dists))
    return labels.reshape(H, W), foreground


def cross_image_match(a, b, k_clusters: int = 2, n_pairs: int = 16, seed: int = 0,
                      foreground: int | None = None) -> MatchSet:
    """Sample ``n_pairs`` foreground patches of ``a`` and match each to its most cosine-similar patch in ``b``."""
    xa, xb = _values(a), _values(b)
    if xa.shape[-1] != xb.shape[-1]:
        raise ShapeError(f"channel dims differ: {xa.shape[-1]} vs {xb.shape[-1]}")
    labels, fg = foreground_patches(xa, k_clusters, seed, foreground)
    cells = np.argwhere(labels == fg)
    if len(cells) == 0:
        raise MatchingError(f"foreground cluster {fg} is empty")
    if n_pairs > len(cells):
        raise MatchingError(f"n_pairs={n_pairs} exceeds the {len(cells)} foreground patches")
    rng = numpy_rng(seed, "match")
    chosen = cells[np.sort(rng.choice(len(cells), n_pairs, replace=False))]
    ua = _unit(xa)
    ub = _unit(xb).reshape(-1, xb.shape[-1])
    Wb = xb.shape[1]
    pairs = []
    for r, c in chosen:
        sims = ub @ ua[r, c]
        j = int(np.argmax(sims))
        pairs.append(((int(r), int(c)), (j // Wb, j % Wb), float(np.clip(sims[j], -1, 1))))
    return MatchSet(pairs, k_clusters, n_pairs, fg)


# --------------------------------------------------------------------------
# linear probe
# --------------------------------------------------------------------------

def pool(grids) -> np.ndarray:
    """Mean over patch tokens: (N, H, W, D) -> (N, D)."""
    x = _values(grids)
    return x.reshape(x.shape[0], -1, x.shape[-1]).mean(1)


@dataclass
class LinearProbe:
    weight: np.ndarray      # (D, K)
    bias: np.ndarray        # (K,)
    loss: float
    iterations: int

    def logits(self, feats):
        return np.asarray(feats, dtype=np.float64) @ self.weight + self.bias

    def predict(self, feats):
        return self.logits(feats).argmax(1)

    def accuracy(self, feats, labels) -> float:
        return float((self.predict(feats) == np.asarray(labels)).mean())


def fit_linear_probe(feats, labels, l2_reg: float = 1e-4, num_classes: int | None = None,
                     tol: float = 1e-6, max_iter: int = 2000) -> LinearProbe:
    """Multinomial logistic regression (mean cross-entropy + l2_reg/2 ||W||^2) by L-BFGS."""
    X = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ShapeError(f"probe expects (N, D) features with N labels, got {X.shape} / {y.shape}")
    if l2_reg < 0:
        raise UsageError("l2_reg must be >= 0")
    N, D = X.shape
    K = int(num_classes or y.max() + 1)
    if y.min() < 0 or y.max() >= K:
        raise UsageError(f"labels must lie in [0, {K})")
    if l2_reg == 0:
        design = np.hstack([X, np.ones((N, 1))])
        if np.linalg.matrix_rank(design) < D + 1:
            raise RegularizationError("design matrix is rank-deficient; l2_reg must be > 0")
    Y = np.eye(K)[y]

    def objective(theta):
        Wt, b = theta[:D * K].reshape(D, K), theta[D * K:]
        z = X @ Wt + b
        z = z - z.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        loss = -(Y * logp).sum() / N + 0.5 * l2_reg * (Wt ** 2).sum()
        g = (np.exp(logp) - Y) / N
        grad = np.concatenate([(X.T @ g + l2_reg * Wt).ravel(), g.sum(0)])
        return loss, grad

    res = optimize.minimize(objective, np.zeros(D * K + K), jac=True, method="L-BFGS-B",
                            options=dict(maxiter=max_iter, ftol=tol, gtol=1e-9))
    if not np.isfinite(res.fun):
        raise NumericError("probe objective became non-finite")
    return LinearProbe(res.x[:D * K].reshape(D, K), res.x[D * K:], float(res.fun), int(res.nit))


def linear_probe(train_feats, train_labels, test_feats, test_labels, l2_reg: float = 1e-4,
                 num_classes: int | None = None) -> float:
    """Top-1 accuracy of a probe fit on the training features."""
    probe = fit_linear_probe(train_feats, train_labels, l2_reg, num_classes)
    return probe.accuracy(test_feats, test_labels)


# --------------------------------------------------------------------------
# retrieval
# --------------------------------------------------------------------------

def retrieval_top1(queries, gallery, ground_truth=None) -> tuple[float, float]:
    """(query->gallery, gallery->query) recall@1 under argmax cosine.

    ``ground_truth[i]`` is the gallery index paired with query i (identity by default).
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if len(g) == 0 or len(q) == 0:
        raise UsageError("retrieval needs non-empty queries and gallery")
    gt = np.arange(len(q)) if ground_truth is None else np.asarray(ground_truth)
    if len(gt) != len(q):
        raise ShapeError("ground_truth must have one entry per query")
    sims = _unit(q) @ _unit(g).T
    forward = float((sims.argmax(1) == gt).mean())
    # reverse direction: each gallery item that is someone's ground truth retrieves a query
    back = sims.argmax(0)
    targets = {}
    for i, j in enumerate(gt):
        targets.setdefault(int(j), set()).add(i)
    hits = [back[j] in qs for j, qs in targets.items()]
    return forward, float(np.mean(hits))


# --------------------------------------------------------------------------
# Frechet distance
# --------------------------------------------------------------------------

@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        if self.count < 2:
            raise UsageError("Gaussian statistics need at least 2 samples")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9, rtol=0):
            raise NumericError("covariance is not symmetric")


def gaussian_stats(x) -> GaussianStats:
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise UsageError("Gaussian statistics need at least 2 samples")
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return GaussianStats(x.mean(0), (cov + cov.T) / 2, len(x))


def _psd_sqrt(m, clamp=-1e-8):
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < clamp:
        raise NumericError(f"matrix has eigenvalue {w.min():.3e} below {clamp}; badly conditioned input")
    return (v * np.sqrt(np.maximum(w, 0))) @ v.T, w


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), via symmetric square roots."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dims differ: {a.mean.shape} vs {b.mean.shape}")
    root_a, _ = _psd_sqrt(a.covariance)
    _, w = _psd_sqrt(root_a @ b.covariance @ root_a)
    cross = np.sqrt(np.maximum(w, 0)).sum()
    d = a.mean - b.mean
    val = float(d @ d + np.trace(a.covariance) + np.trace(b.covariance) - 2 * cross)
    return max(val, 0.0)


def write_metrics(path, rows, seed: int) -> None:
    """rows: iterable of (metric, split, value)."""
    write_csv(path, ["metric", "split", "value", "seed"], [(m, s, repr(float(v)), seed) for m, s, v in rows])
