"""Precision, recall, density and coverage over k-NN neighbourhood spheres.

Both implementations compute every distance with :func:`pair_dist`, so the
accelerated path reproduces the brute-force counts exactly rather than to
within rounding. Sphere membership is inclusive (``dist <= radius``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_K = 5
# candidate search radii are widened by this much, then filtered exactly
_REL_PAD = 1e-9
_ABS_PAD = 1e-12
_NAIVE_CHUNK = 1024


def pair_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between broadcast-aligned rows of ``a`` and ``b``."""
    sq = np.zeros(np.broadcast_shapes(a.shape, b.shape)[:-1])
    for k in range(a.shape[-1]):
        diff = a[..., k] - b[..., k]
        sq += diff * diff
    return np.sqrt(sq)


@dataclass
class Manifold:
    points: np.ndarray
    radii: np.ndarray
    k: int


@dataclass
class PrdcReport:
    precision: float
    recall: float
    density: float
    coverage: float
    k: int
    n_real: int
    n_gen: int

    def to_dict(self) -> dict:
        return asdict(self)

    def fields(self) -> tuple:
        return (self.precision, self.recall, self.density, self.coverage)


def _check(points, k, name):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"{name} must be an (N, d) array")
    if not 1 <= k < pts.shape[0]:
        raise ValueError(f"k={k} needs 1 <= k < N, but {name} has {pts.shape[0]} points")
    return pts


# -- brute force --------------------------------------------------------------


def knn_radii_naive(points: np.ndarray, k: int) -> np.ndarray:
    n = len(points)
    radii = np.empty(n)
    for lo in range(0, n, _NAIVE_CHUNK):
        block = pair_dist(points[lo:lo + _NAIVE_CHUNK, None, :], points[None, :, :])
        rows = np.arange(block.shape[0])
        block[rows, lo + rows] = np.inf  # exclude self
        radii[lo:lo + _NAIVE_CHUNK] = np.partition(block, k - 1, axis=1)[:, k - 1]
    return radii


def membership_naive(centers: np.ndarray, radii: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Boolean ``(len(queries), len(centers))`` matrix: query j inside sphere i."""
    out = np.empty((len(queries), len(centers)), dtype=bool)
    for lo in range(0, len(queries), _NAIVE_CHUNK):
        dist = pair_dist(queries[lo:lo + _NAIVE_CHUNK, None, :], centers[None, :, :])
        out[lo:lo + _NAIVE_CHUNK] = dist <= radii[None, :]
    return out


def build_manifold(points, k: int = DEFAULT_K) -> Manifold:
    """Neighbourhood spheres: each point with its distance to its k-th neighbour."""
    pts = _check(points, k, "points")
    return Manifold(pts, knn_radii_fast(pts, k), k)


def prdc(real, gen, k: int = DEFAULT_K) -> PrdcReport:
    """Brute-force O(N M) reference implementation."""
    real = _check(real, k, "real")
    gen = _check(gen, k, "gen")
    if real.shape[1] != gen.shape[1]:
        raise ValueError(f"dimension mismatch: real d={real.shape[1]}, gen d={gen.shape[1]}")
    r_real = knn_radii_naive(real, k)
    r_gen = knn_radii_naive(gen, k)
    inside_real = membership_naive(real, r_real, gen)  # (M, N)
    inside_gen = membership_naive(gen, r_gen, real)  # (N, M)
    n, m = len(real), len(gen)
    return PrdcReport(
        precision=float(inside_real.any(axis=1).sum()) / m,
        recall=float(inside_gen.any(axis=1).sum()) / n,
        density=float(inside_real.sum()) / (k * m),
        coverage=float(inside_real.any(axis=0).sum()) / n,
        k=k,
        n_real=n,
        n_gen=m,
    )


# -- accelerated ----------------------------------------------------------------


def _flatten(lists):
    lens = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    owner = np.repeat(np.arange(len(lists)), lens)
    flat = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=int(lens.sum()))
    return owner, flat


def knn_radii_fast(points: np.ndarray, k: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.shape[1] > 3:
        return knn_radii_naive(points, k)
    tree = cKDTree(points)
    # self sits at distance 0, so the (k+1)-th including self is the k-th excluding it
    approx, _ = tree.query(points, k=k + 1)
    reach = approx[:, k] * (1.0 + _REL_PAD) + _ABS_PAD
    owner, cand = _flatten(tree.query_ball_point(points, reach))
    dist = pair_dist(points[owner], points[cand])
    radii = np.empty(len(points))
    order = np.lexsort((dist, owner))
    starts = np.searchsorted(owner[order], np.arange(len(points)))
    radii[:] = dist[order][starts + k]
    return radii


def sphere_pairs(centers: np.ndarray, radii: np.ndarray, queries: np.ndarray):
    """All ``(center_index, query_index)`` pairs with the query inside the sphere."""
    if centers.shape[1] > 3:
        inside = membership_naive(centers, radii, queries)
        q, c = np.nonzero(inside)
        return c, q
    tree = cKDTree(queries)
    reach = radii * (1.0 + _REL_PAD) + _ABS_PAD
    c, q = _flatten(tree.query_ball_point(centers, reach))
    keep = pair_dist(centers[c], queries[q]) <= radii[c]
    return c[keep], q[keep]


def membership_counts(centers, radii, queries) -> np.ndarray:
    """For each query point, how many spheres contain it."""
    _, q = sphere_pairs(centers, radii, queries)
    return np.bincount(q, minlength=len(queries))


def prdc_fast(real, gen, k: int = DEFAULT_K) -> PrdcReport:
    """Same report as :func:`prdc`, using KD-tree candidate search for d <= 3."""
    real = _check(real, k, "real")
    gen = _check(gen, k, "gen")
    if real.shape[1] != gen.shape[1]:
        raise ValueError(f"dimension mismatch: real d={real.shape[1]}, gen d={gen.shape[1]}")
    n, m = len(real), len(gen)
    r_real = knn_radii_fast(real, k)
    r_gen = knn_radii_fast(gen, k)
    ci, gj = sphere_pairs(real, r_real, gen)
    _, ri = sphere_pairs(gen, r_gen, real)
    return PrdcReport(
        precision=float(len(np.unique(gj))) / m,
        recall=float(len(np.unique(ri))) / n,
        density=float(len(gj)) / (k * m),
        coverage=float(len(np.unique(ci))) / n,
        k=k,
        n_real=n,
        n_gen=m,
    )
