"""Structural penalties on a batch of predicted noise, with exact gradients.

Every penalty measures how far the rows of ``eps_pred`` (shape ``(N, d)``)
are from an isotropic standard Gaussian and vanishes at that target. The
gradients are derived by hand; ``tests/test_regularizers.py`` checks them
against central finite differences.

Covariance-based penalties go through the centred matrix ``C = P - mean(P)``
and ``S = C^T C / (N - 1)``. For a penalty ``L(S)`` with symmetric gradient
``G = dL/dS`` the row gradient is ``2 C G / (N - 1)``; the centring needs no
extra term because the rows of ``C G`` already sum to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = (
    "none",
    "mean",
    "skewness",
    "kurtosis",
    "kl",
    "mmd",
    "iso_trace_mean",
    "iso_frobenius",
    "iso_diag_split",
    "iso_log_eig",
    "iso_bures",
)
# kinds that need an invertible (or strictly positive) covariance
NEEDS_INVERTIBLE = frozenset({"skewness", "kurtosis", "kl", "iso_log_eig", "iso_bures"})

SINGULAR_TOL = 1e-12
EIG_TIE_TOL = 1e-9


class SingularCovarianceError(ValueError):
    """The batch covariance has an eigenvalue below ``SINGULAR_TOL``."""


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    lam: float = 0.1
    mmd_bandwidth: str | float = "median"
    mmd_reference_count: int | None = None  # None: same size as the batch
    ref_seed: int = 11

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {KINDS}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        bw = self.mmd_bandwidth
        if bw != "median" and not (isinstance(bw, (int, float)) and bw > 0):
            raise ValueError(f"mmd bandwidth must be 'median' or a positive number, got {bw!r}")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.lam > 0

    def to_dict(self) -> dict:
        return {
            "regularizer": self.kind,
            "lambda": self.lam,
            "mmd": {
                "bandwidth": self.mmd_bandwidth,
                "reference_count": self.mmd_reference_count,
                "ref_seed": self.ref_seed,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizerSpec":
        mmd = d.get("mmd", {}) or {}
        return cls(
            kind=d.get("regularizer", "none"),
            lam=float(d.get("lambda", 0.1)),
            mmd_bandwidth=mmd.get("bandwidth", "median"),
            mmd_reference_count=mmd.get("reference_count"),
            ref_seed=int(mmd.get("ref_seed", 11)),
        )


# -- linear algebra ---------------------------------------------------------


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(float(np.abs(a).max()), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.triu(a, 1) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


@dataclass
class BatchMoments:
    mean: np.ndarray
    cov: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    centered: np.ndarray

    @property
    def n(self) -> int:
        return self.centered.shape[0]

    @property
    def d(self) -> int:
        return self.centered.shape[1]

    def inv_cov(self) -> np.ndarray:
        return (self.eigvecs / self.eigvals) @ self.eigvecs.T


def batch_moments(eps, check: bool = True) -> BatchMoments:
    """Mean, unbiased covariance and its Jacobi eigen-decomposition.

    With ``check`` set, raises :class:`SingularCovarianceError` when the
    smallest eigenvalue is below ``SINGULAR_TOL``.
    """
    p = np.asarray(eps, dtype=np.float64)
    n, d = p.shape
    if n < 2:
        raise SingularCovarianceError(f"need at least 2 rows for a covariance, got {n}")
    mu = p.mean(axis=0)
    c = p - mu
    cov = c.T @ c / (n - 1)
    cov = 0.5 * (cov + cov.T)
    w, v = jacobi_eigh(cov)
    if check and w[0] < SINGULAR_TOL:
        raise SingularCovarianceError(
            f"batch covariance is singular (min eigenvalue {w[0]:.3e}, {n} rows, d={d})"
        )
    return BatchMoments(mu, cov, w, v, c)


def _spectral_grad(eigvals, eigvecs, fprime) -> np.ndarray:
    """dL/dS for L = sum_k f(lambda_k); tied eigenvalues share the averaged f'."""
    g = np.asarray(fprime, dtype=np.float64).copy()
    i = 0
    k = len(eigvals)
    while i < k:
        j = i + 1
        while j < k and eigvals[j] - eigvals[j - 1] < EIG_TIE_TOL:
            j += 1
        if j - i > 1:
            g[i:j] = g[i:j].mean()
        i = j
    return (eigvecs * g) @ eigvecs.T


def _cov_row_grad(c, g_cov):
    n = c.shape[0]
    return 2.0 * c @ g_cov / (n - 1)


# -- individual penalties: each returns (value, d value / d eps) -------------


def mardia_skewness_target(d: int) -> float:
    """E[(z^T z)^{3/2}] for z ~ N(0, I_d), i.e. the 3/2-moment of chi^2_d."""
    return 2.0 ** 1.5 * math.exp(math.lgamma(d / 2.0 + 1.5) - math.lgamma(d / 2.0))


def _mean(p):
    n = p.shape[0]
    mu = p.mean(axis=0)
    return float(mu @ mu), np.broadcast_to(2.0 * mu / n, p.shape).copy()


def _iso_trace_mean(p):
    n, d = p.shape
    m = float(np.sum(p * p)) / (n * d)
    return (m - 1.0) ** 2, 2.0 * (m - 1.0) * 2.0 * p / (n * d)


def _mahalanobis_penalty(p, power, target):
    """(mean_i r_i^power - target)^2 with r_i the squared Mahalanobis norm."""
    bm = batch_moments(p)
    n = bm.n
    c = bm.centered
    sinv = bm.inv_cov()
    cs = c @ sinv
    r = np.einsum("ij,ij->i", cs, c)
    r = np.maximum(r, 0.0)
    stat = float(np.mean(r ** power))
    value = (stat - target) ** 2
    # a_i = dvalue/dr_i
    a = 2.0 * (stat - target) * power * r ** (power - 1.0) / n
    m = cs.T @ (a[:, None] * cs)
    g_c = 2.0 * a[:, None] * cs - 2.0 * c @ m / (n - 1)
    return value, g_c - g_c.mean(axis=0)


def _skewness(p):
    return _mahalanobis_penalty(p, 1.5, mardia_skewness_target(p.shape[1]))


def _kurtosis(p):
    d = p.shape[1]
    return _mahalanobis_penalty(p, 2.0, d * (d + 2.0))


def _kl(p):
    bm = batch_moments(p)
    n, d = bm.n, bm.d
    mu = bm.mean
    value = 0.5 * (np.trace(bm.cov) + mu @ mu - d - np.sum(np.log(bm.eigvals)))
    g_cov = 0.5 * (np.eye(d) - bm.inv_cov())
    grad = _cov_row_grad(bm.centered, g_cov) + mu / n
    return float(value), grad


def _iso_frobenius(p):
    bm = batch_moments(p, check=False)
    diff = bm.cov - np.eye(bm.d)
    return float(np.sum(diff * diff)), _cov_row_grad(bm.centered, 2.0 * diff)


def _iso_diag_split(p):
    bm = batch_moments(p, check=False)
    d = bm.d
    s = bm.cov
    off = s - np.diag(np.diag(s))
    tr_term = np.trace(s) / d - 1.0
    value = tr_term ** 2
    g_cov = (2.0 * tr_term / d) * np.eye(d)
    if d > 1:
        value += float(np.sum(off * off)) / (d * (d - 1))
        g_cov = g_cov + 2.0 * off / (d * (d - 1))
    return float(value), _cov_row_grad(bm.centered, g_cov)


def _iso_log_eig(p):
    bm = batch_moments(p)
    d = bm.d
    lw = np.log(bm.eigvals)
    value = float(np.sum(lw ** 2)) / d
    g_cov = _spectral_grad(bm.eigvals, bm.eigvecs, 2.0 * lw / (d * bm.eigvals))
    return value, _cov_row_grad(bm.centered, g_cov)


def _iso_bures(p):
    bm = batch_moments(p)
    d = bm.d
    sq = np.sqrt(bm.eigvals)
    value = float(np.sum((sq - 1.0) ** 2)) / d
    g_cov = _spectral_grad(bm.eigvals, bm.eigvecs, (sq - 1.0) / (d * sq))
    return value, _cov_row_grad(bm.centered, g_cov)


def _sq_dists(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(x, y) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    z = np.concatenate([x, y])
    d2 = _sq_dists(z, z)
    iu = np.triu_indices(len(z), 1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def _mmd(p, reference, bandwidth):
    """Biased (V-statistic) MMD^2 with an RBF kernel; the bandwidth is held fixed."""
    n, m = p.shape[0], reference.shape[0]
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-_sq_dists(p, p) * inv)
    kyy = np.exp(-_sq_dists(reference, reference) * inv)
    kxy = np.exp(-_sq_dists(p, reference) * inv)
    value = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    s2 = bandwidth * bandwidth
    g_xx = -(2.0 / (n * n * s2)) * (kxx.sum(axis=1)[:, None] * p - kxx @ p)
    g_xy = (2.0 / (n * m * s2)) * (kxy.sum(axis=1)[:, None] * p - kxy @ reference)
    return max(float(value), 0.0), g_xx + g_xy


_PENALTIES = {
    "mean": _mean,
    "skewness": _skewness,
    "kurtosis": _kurtosis,
    "kl": _kl,
    "iso_trace_mean": _iso_trace_mean,
    "iso_frobenius": _iso_frobenius,
    "iso_diag_split": _iso_diag_split,
    "iso_log_eig": _iso_log_eig,
    "iso_bures": _iso_bures,
}


@dataclass
class PenaltyResult:
    value: float  # unweighted penalty
    weighted: float  # lambda * value
    grad: np.ndarray  # d(lambda * value) / d eps_pred


def mmd_reference(spec: RegularizerSpec, n: int, d: int, rng: np.random.Generator | None = None):
    count = spec.mmd_reference_count or n
    rng = rng if rng is not None else np.random.default_rng(spec.ref_seed)
    return rng.standard_normal((count, d))


def penalty(
    spec: RegularizerSpec,
    eps_pred,
    *,
    rng: np.random.Generator | None = None,
    reference: np.ndarray | None = None,
    bandwidth: float | None = None,
) -> PenaltyResult:
    """Structural penalty of ``spec.kind`` on the batch, and its weighted gradient.

    For MMD the standard-normal reference sample comes from ``reference`` if
    given, else from ``rng``, else from a generator seeded with
    ``spec.ref_seed``. The bandwidth is ``bandwidth`` if given, else the
    spec's fixed value, else the pooled median distance; it is treated as a
    constant when differentiating.
    """
    p = np.asarray(eps_pred, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"eps_pred must be (N, d), got shape {p.shape}")
    if spec.kind == "none":
        return PenaltyResult(0.0, 0.0, np.zeros_like(p))
    if spec.kind == "mmd":
        if reference is None:
            reference = mmd_reference(spec, p.shape[0], p.shape[1], rng)
        if bandwidth is None:
            bw = spec.mmd_bandwidth
            bandwidth = median_bandwidth(p, reference) if bw == "median" else float(bw)
        value, grad = _mmd(p, reference, bandwidth)
    else:
        value, grad = _PENALTIES[spec.kind](p)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise FloatingPointError(f"non-finite {spec.kind} penalty")
    return PenaltyResult(value, spec.lam * value, spec.lam * grad)


@dataclass
class LossResult:
    value: float
    simple: float
    penalty: float  # lambda-weighted
    grad: np.ndarray  # d value / d eps_pred


def total_loss(eps_true, eps_pred, spec: RegularizerSpec, **penalty_kw) -> LossResult:
    """Batch mean of ||eps - eps_pred||^2 plus the weighted structural penalty."""
    e = np.asarray(eps_true, dtype=np.float64)
    p = np.asarray(eps_pred, dtype=np.float64)
    if e.shape != p.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {p.shape}")
    n = p.shape[0]
    diff = p - e
    simple = float(np.sum(diff * diff)) / n
    grad = 2.0 * diff / n
    pen = 0.0
    if spec.active:
        res = penalty(spec, p, **penalty_kw)
        pen = res.weighted
        grad = grad + res.grad
    return LossResult(simple + pen, simple, pen, grad)


# -- distances between discretised densities --------------------------------


@dataclass
class Histogram:
    """A density tabulated on a regular grid; ``values`` integrate to 1."""

    values: np.ndarray
    edges: tuple[np.ndarray, ...]

    @property
    def bin_volume(self) -> float:
        return float(np.prod([e[1] - e[0] for e in self.edges]))

    def centers(self) -> np.ndarray:
        mids = [0.5 * (e[1:] + e[:-1]) for e in self.edges]
        mesh = np.meshgrid(*mids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def weights(self) -> np.ndarray:
        return self.values.ravel() * self.bin_volume


def _check_pair(p: Histogram, q: Histogram):
    if p.values.shape != q.values.shape or len(p.edges) != len(q.edges):
        raise ValueError("histograms are on different grids")
    for a, b in zip(p.edges, q.edges):
        if a.shape != b.shape or not np.array_equal(a, b):
            raise ValueError("histograms are on different grids")
    for h in (p, q):
        if np.any(h.values < 0):
            raise ValueError("histogram has negative mass")
        if abs(h.weights().sum() - 1.0) > 1e-9:
            raise ValueError("histogram is not normalised")


def l2_density_distance(p: Histogram, q: Histogram) -> float:
    _check_pair(p, q)
    diff = p.values - q.values
    return math.sqrt(float(np.sum(diff * diff)) * p.bin_volume)


def histogram_measure(h: Histogram, kind: str) -> float:
    """Scalar structural measure of a tabulated density, using bin centres."""
    w = h.weights()
    y = h.centers()
    d = y.shape[1]
    mu = w @ y
    c = y - mu
    cov = (c * w[:, None]).T @ c
    if kind == "none":
        return 0.0
    if kind == "mean":
        return float(mu @ mu)
    if kind == "iso_trace_mean":
        return (float(w @ np.sum(y * y, axis=1)) / d - 1.0) ** 2
    if kind == "iso_frobenius":
        return float(np.sum((cov - np.eye(d)) ** 2))
    if kind == "iso_diag_split":
        off = cov - np.diag(np.diag(cov))
        val = (np.trace(cov) / d - 1.0) ** 2
        if d > 1:
            val += float(np.sum(off * off)) / (d * (d - 1))
        return float(val)
    eigvals, _ = jacobi_eigh(cov)
    if eigvals[0] < SINGULAR_TOL:
        raise SingularCovarianceError("histogram covariance is singular")
    if kind == "iso_log_eig":
        return float(np.sum(np.log(eigvals) ** 2)) / d
    if kind == "iso_bures":
        return float(np.sum((np.sqrt(eigvals) - 1.0) ** 2)) / d
    if kind == "kl":
        return 0.5 * float(np.trace(cov) + mu @ mu - d - np.sum(np.log(eigvals)))
    if kind in ("skewness", "kurtosis"):
        r = np.einsum("ij,jk,ik->i", c, np.linalg.inv(cov), c)
        if kind == "skewness":
            return (float(w @ r ** 1.5) - mardia_skewness_target(d)) ** 2
        return (float(w @ r ** 2) - d * (d + 2.0)) ** 2
    raise ValueError(f"{kind!r} has no moment form for tabulated densities")


def structural_distance(p: Histogram, q: Histogram, kind: str = "iso_trace_mean") -> float:
    """|I(p) - I(q)| for the scalar measure I of ``kind``."""
    _check_pair(p, q)
    return abs(histogram_measure(p, kind) - histogram_measure(q, kind))


def d_new(p: Histogram, q: Histogram, lam: float, kind: str = "iso_trace_mean") -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l2_density_distance(p, q) + lam * structural_distance(p, q, kind)
