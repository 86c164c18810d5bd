"""Distribution-comparison metrics over generated and reference shapes.

Coverage, minimum matching distance, 1-NN accuracy, an edge-count
discrepancy statistic, and Frechet distances over image/point embeddings,
all built on pluggable shape distances and embedders.  The default shape
distance is symmetric squared Chamfer over sampled surface points; the
default embedders are a pooled gradient-orientation histogram for images
(d=64) and moment/radial-histogram features for point sets (d=60).
"""

from __future__ import annotations

import struct
import warnings
from itertools import combinations_with_replacement

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree

from .errors import DataError, DimensionError, NumericError, UsageError
from .geometry import sample_surface_points
from .render import camera_rig, render_shading

IMAGE_EMBED_DIM = 64
POINT_EMBED_DIM = 60
_FEAT_MAGIC = b"FEAT"


# ---------------------------------------------------------------------------
# shape distances and distance matrices


def chamfer_distance(a, b):
    """Symmetric squared Chamfer distance between two point sets (n, 3)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError("point sets must share shape (n, d)")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise UsageError("chamfer distance needs nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float((d_ab ** 2).mean() + (d_ba ** 2).mean())


def pairwise_distances(set_g, set_r, distance=chamfer_distance):
    """Distance matrix rows = generated set, columns = reference set."""
    if not set_g or not set_r:
        raise UsageError("both shape sets must be nonempty")
    out = np.empty((len(set_g), len(set_r)))
    for i, x in enumerate(set_g):
        for j, y in enumerate(set_r):
            out[i, j] = distance(x, y)
    return out


def union_distances(set_g, set_r, distance=chamfer_distance):
    """Symmetric zero-diagonal matrix over the concatenated union."""
    union = list(set_g) + list(set_r)
    n = len(union)
    if n < 2:
        raise UsageError("union distance matrix needs at least two shapes")
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = distance(union[i], union[j])
    return out




def _check_matrix(dist, square=False):
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] == 0 or dist.shape[1] == 0:
        raise UsageError("distance matrix must be 2-D and nonempty")
    if (dist < 0).any():
        raise UsageError("distances must be non-negative")
    if square:
        if dist.shape[0] != dist.shape[1]:
            raise UsageError("union distance matrix must be square")
        if not np.allclose(dist, dist.T, atol=1e-10):
            raise UsageError("union distance matrix must be symmetric")
    return dist


# ---------------------------------------------------------------------------
# set-level metrics


def coverage(dist):
    """Fraction of reference shapes matched as someone's nearest neighbor.

    ``dist`` is generated x reference; argmin ties go to the lowest index.
    """
    dist = _check_matrix(dist)
    matched = {int(np.argmin(row)) for row in dist}
    return len(matched) / dist.shape[1]


def mmd(dist):
    """Mean over reference shapes of the distance to the closest generate."""
    dist = _check_matrix(dist)
    return float(dist.min(axis=0).mean())


def one_nna(dist_union, n_g):
    """Leave-one-out 1-NN accuracy separating the two halves of the union.

    The first ``n_g`` rows/columns are the generated set; the diagonal is
    excluded from the neighbor search, ties go to the lowest index.
    """
    dist = _check_matrix(dist_union, square=True)
    n = dist.shape[0]
    if n < 2:
        raise UsageError("1-NN accuracy needs a union of at least two shapes")
    if not 0 < n_g < n:
        raise UsageError(f"generated-set size {n_g} outside union of {n}")
    labels = np.zeros(n, dtype=bool)
    labels[:n_g] = True
    search = dist.copy()
    np.fill_diagonal(search, np.inf)
    nearest = search.argmin(axis=1)
    return float((labels[nearest] == labels).mean())


def _kmst_edges(dist, k):
    """Edges of k successive minimum spanning trees, shape (k*(n-1), 2)."""
    n = dist.shape[0]
    weights = dist + 1.0
    edges = []
    for _ in range(k):
        tree = minimum_spanning_tree(weights).tocoo()
        if tree.row.size < n - 1:
            raise UsageError(
                "union too small for the requested number of spanning trees")
        for i, j in zip(tree.row, tree.col):
            edges.append((int(i), int(j)))
            weights[i, j] = weights[j, i] = np.inf
    return np.asarray(edges, dtype=np.int64)


def ecd(dist_union, n_g, k=5, permutations=100, rng=None):
    """Edge-count discrepancy of the union's k-MST graph.

    Counts within-reference and within-generated edges of the k-MST and
    returns the Mahalanobis distance of that pair from its null
    distribution over random label permutations (covariance regularized by
    1e-8 I).
    """
    dist = _check_matrix(dist_union, square=True)
    n = dist.shape[0]
    if n < k + 2:
        raise UsageError(f"union of {n} too small for k={k} spanning trees")
    if not 0 < n_g < n:
        raise UsageError(f"generated-set size {n_g} outside union of {n}")
    rng = np.random.default_rng(rng)
    edges = _kmst_edges(dist, k)
    labels = np.zeros(n, dtype=bool)
    labels[:n_g] = True

    def counts(lab):
        a, b = lab[edges[:, 0]], lab[edges[:, 1]]
        return np.array([float((a & b).sum()), float((~a & ~b).sum())])

    observed = counts(labels)
    null = np.stack([counts(rng.permutation(labels))
                     for _ in range(permutations)])
    mu = null.mean(axis=0)
    cov = np.cov(null, rowvar=False) + 1e-8 * np.eye(2)
    try:
        delta = np.linalg.solve(cov, observed - mu)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular permutation-null covariance") from exc
    return float(np.sqrt((observed - mu) @ delta))


# ---------------------------------------------------------------------------
# Gaussian embeddings and Frechet distances


class GaussianSummary:
    """Mean and symmetrized covariance of a set of embedding vectors."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if self.mean.ndim != 1 or cov.shape != (self.mean.size, self.mean.size):
            raise DimensionError("mean must be (d,) and covariance (d, d)")
        self.cov = 0.5 * (cov + cov.T)

    @classmethod
    def from_embeddings(cls, rows):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise UsageError("embeddings must be a nonempty (n, d) array")
        n, d = rows.shape
        if n <= d:
            warnings.warn(
                f"covariance of {n} embeddings in {d} dimensions is "
                "rank-deficient", RuntimeWarning, stacklevel=2)
        mean = rows.mean(axis=0)
        if n == 1:
            return cls(mean, np.zeros((d, d)))
        return cls(mean, np.cov(rows, rowvar=False))


def _sqrtm_psd(matrix):
    vals, vecs = np.linalg.eigh(matrix)
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(a, b):
    """Frechet distance between two Gaussian summaries.

    ||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}), with the
    matrix square root taken through the symmetric product
    cov_a^{1/2} cov_b cov_a^{1/2} and negative eigenvalues clamped at zero.
    """
    if a.mean.shape != b.mean.shape:
        raise UsageError("Gaussian summaries have mismatched dimensions")
    root_a = _sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = np.maximum(np.linalg.eigvalsh(inner), 0.0)
    value = (float(((a.mean - b.mean) ** 2).sum())
             + float(np.trace(a.cov) + np.trace(b.cov))
             - 2.0 * float(np.sqrt(cross).sum()))
    return max(value, 0.0)


def frechet_from_features(rows_a, rows_b):
    return frechet_gaussian(GaussianSummary.from_embeddings(rows_a),
                            GaussianSummary.from_embeddings(rows_b))


# ---------------------------------------------------------------------------
# built-in embedders


def embed_image(image):
    """Pooled gradient-orientation histogram of an image, shape (64,).

    4x4 spatial cells times 4 unsigned orientation bins, magnitudes
    accumulated and normalized by the total.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=2)
    if image.ndim != 2 or min(image.shape) < 4:
        raise DimensionError("image must be at least 4x4 pixels")
    gy, gx = np.gradient(image)
    magnitude = np.hypot(gx, gy)
    orientation = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((orientation / (np.pi / 4.0)).astype(np.int64), 3)
    features = np.zeros((4, 4, 4))
    rows = np.array_split(np.arange(image.shape[0]), 4)
    cols = np.array_split(np.arange(image.shape[1]), 4)
    for ci, rr in enumerate(rows):
        for cj, cc in enumerate(cols):
            m = magnitude[np.ix_(rr, cc)]
            b = bins[np.ix_(rr, cc)]
            for k in range(4):
                features[ci, cj, k] = m[b == k].sum()
    flat = features.reshape(-1)
    return flat / (flat.sum() + 1e-12)


def embed_points(points):
    """Moment and radial-histogram features of a point set, shape (60,).

    Centroid (3), unique central moments of orders 2..4 (6+10+15), and a
    26-bin radial histogram of distances from the centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise DimensionError("points must be a nonempty (n, 3) array")
    mean = points.mean(axis=0)
    centered = points - mean
    feats = [mean]
    for order in (2, 3, 4):
        block = [
            np.prod([centered[:, axis] for axis in combo], axis=0).mean()
            for combo in combinations_with_replacement(range(3), order)
        ]
        feats.append(np.asarray(block))
    radii = np.linalg.norm(centered, axis=1)
    hist, _ = np.histogram(radii, bins=26, range=(0.0, 2.0))
    feats.append(hist / points.shape[0])
    out = np.concatenate(feats)
    if out.size != POINT_EMBED_DIM:
        raise NumericError(
            f"point embedding has {out.size} entries, expected "
            f"{POINT_EMBED_DIM}")
    return out


# ---------------------------------------------------------------------------
# mesh-level Frechet metrics


def shading_fid(meshes_g, meshes_r, embedder=embed_image, res=299):
    """Mean over the 20 rig views of per-view Frechet embedding distances."""
    if not meshes_g or not meshes_r:
        raise UsageError("both mesh sets must be nonempty")
    scores = []
    for view in camera_rig():
        rows_g = np.stack([embedder(render_shading(m, view, res))
                           for m in meshes_g])
        rows_r = np.stack([embedder(render_shading(m, view, res))
                           for m in meshes_r])
        scores.append(frechet_from_features(rows_g, rows_r))
    return float(np.mean(scores))


def fpd(meshes_g, meshes_r, embedder=embed_points, n=2048, seed=0):
    """Frechet distance between surface-point embeddings of two mesh sets.

    Each set samples its meshes with a fresh generator from ``seed``, so
    identical sets under the same seed embed identically.
    """
    if not meshes_g or not meshes_r:
        raise UsageError("both mesh sets must be nonempty")

    def rows(meshes):
        rng = np.random.default_rng(seed)
        return np.stack([embedder(sample_surface_points(m, n, rng))
                         for m in meshes])

    return frechet_from_features(rows(meshes_g), rows(meshes_r))


# ---------------------------------------------------------------------------
# feature files


def write_features(path, rows):
    """Write an (n, d) feature array: magic FEAT, u32 n, u32 d, f32 rows."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionError("features must be a 2-D array")
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC)
        f.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        f.write(rows.astype("<f4").tobytes())


def read_features(path):
    """Read a feature file written by write_features, shape (n, d)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _FEAT_MAGIC:
        raise DataError(f"{path} is not a feature file")
    if len(blob) < 12:
        raise DataError(f"truncated feature header in {path}")
    n, d = struct.unpack("<II", blob[4:12])
    payload = np.frombuffer(blob, dtype="<f4", offset=12)
    if payload.size != n * d:
        raise DataError(
            f"feature payload holds {payload.size} values, expected {n * d}")
    return payload.astype(np.float64).reshape(n, d)


# ---------------------------------------------------------------------------
# reference evaluation protocol


def paper_protocol(gen_sets, test_sets, rng=None, distance=chamfer_distance,
                   k=5, permutations=100, draws=10):
    """COV/MMD on the full sets plus subsampled 1-NNA/ECD averages.

    COV and MMD compare every generated shape against the test split
    (intended with |S_g| = 5 |S_r|); 1-NNA and ECD are computed on unions
    of a random size-|S_r| generated subsample with the test split and
    averaged over ``draws`` draws.
    """
    if len(gen_sets) < len(test_sets):
        raise UsageError("protocol expects at least |S_r| generated shapes")
    rng = np.random.default_rng(rng)
    dist = pairwise_distances(gen_sets, test_sets, distance)
    n_r = len(test_sets)
    nna_values, ecd_values = [], []
    for _ in range(draws):
        pick = rng.choice(len(gen_sets), size=n_r, replace=False)
        subsample = [gen_sets[i] for i in pick]
        square = union_distances(subsample, test_sets, distance)
        nna_values.append(one_nna(square, n_r))
        ecd_values.append(ecd(square, n_r, k=k, permutations=permutations,
                              rng=rng))
    return {
        "cov": coverage(dist),
        "mmd": mmd(dist),
        "1nna": float(np.mean(nna_values)),
        "ecd": float(np.mean(ecd_values)),
    }
