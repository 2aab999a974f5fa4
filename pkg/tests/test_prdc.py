import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structdiff.prdc import (
    build_manifold,
    knn_radii_fast,
    knn_radii_naive,
    membership_counts,
    prdc,
    prdc_fast,
)

# 7 real / 4 generated points; generated points fall in (2, 3, 1, 2) real spheres at k=2
FIG_REAL = np.array([[5, 7], [5, 2], [5, 0], [3, 6], [1, 5], [4, 2], [0, 4]], dtype=float)
FIG_GEN = np.array([[3.5, 0], [5.5, 2], [6, 5], [3, 2.5]])
FIG_K = 2


def double_loop_prdc(real, gen, k):
    """Plain-Python reference with per-pair math.dist."""
    def radii(pts):
        out = []
        for i, p in enumerate(pts):
            ds = sorted(math.dist(p, q) for j, q in enumerate(pts) if j != i)
            out.append(ds[k - 1])
        return out

    rr, rg = radii(real), radii(gen)
    inside = [[math.dist(g, x) <= r for x, r in zip(real, rr)] for g in gen]
    inside_g = [[math.dist(x, g) <= r for g, r in zip(gen, rg)] for x in real]
    m, n = len(gen), len(real)
    return (
        sum(any(row) for row in inside) / m,
        sum(any(row) for row in inside_g) / n,
        sum(sum(row) for row in inside) / (k * m),
        sum(any(inside[j][i] for j in range(m)) for i in range(n)) / n,
    )


def test_collinear_radii():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    np.testing.assert_array_equal(knn_radii_naive(pts, 1), [1.0, 1.0, 2.0])
    np.testing.assert_array_equal(knn_radii_fast(pts, 1), [1.0, 1.0, 2.0])


def test_k_equals_n_minus_one_is_farthest():
    pts = np.random.default_rng(0).standard_normal((9, 2))
    far = np.array([max(math.dist(p, q) for q in pts) for p in pts])
    np.testing.assert_allclose(build_manifold(pts, 8).radii, far, rtol=1e-15)


def test_duplicate_pair_zero_radius():
    pts = np.array([[1.0, 1.0], [1.0, 1.0], [4.0, 0.0]])
    r = build_manifold(pts, 1).radii
    assert r[0] == 0.0 and r[1] == 0.0


def test_identical_sets():
    x = np.random.default_rng(1).standard_normal((300, 2))
    rep = prdc_fast(x, x.copy(), 5)
    assert rep.precision == rep.recall == rep.coverage == 1.0


def test_far_generated_set():
    x = np.random.default_rng(2).standard_normal((100, 2))
    rep = prdc_fast(x, x + 1e3, 5)
    assert rep.precision == rep.density == rep.coverage == rep.recall == 0.0


def test_constructed_instance_matches_double_loop():
    rep = prdc(FIG_REAL, FIG_GEN, FIG_K)
    assert rep.fields() == pytest.approx(double_loop_prdc(FIG_REAL, FIG_GEN, FIG_K), abs=0)
    counts = membership_counts(FIG_REAL, build_manifold(FIG_REAL, FIG_K).radii, FIG_GEN)
    assert sorted(counts.tolist(), reverse=True) == [3, 2, 2, 1]
    assert rep.precision == 1.0
    assert rep.recall == 5 / 7
    assert rep.coverage == 5 / 7
    # standard density normalisation: total count / (k M)
    assert rep.density == 8 / (FIG_K * 4)
    assert prdc_fast(FIG_REAL, FIG_GEN, FIG_K) == rep


def test_errors():
    with pytest.raises(ValueError):
        prdc(np.zeros((5, 2)), np.zeros((5, 3)), 2)
    with pytest.raises(ValueError):
        prdc_fast(np.zeros((5, 2)), np.zeros((10, 2)), 5)
    with pytest.raises(ValueError):
        build_manifold(np.zeros((3, 2)), 0)


point_sets = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=30, deadline=None)
@given(point_sets, st.integers(1, 6), st.booleans())
def test_fast_equals_naive(rng, k, rounded):
    real = rng.standard_normal((40, 2))
    gen = rng.standard_normal((35, 2)) * 1.2
    if rounded:  # force duplicates and exact ties
        real, gen = np.round(real, 1), np.round(gen, 1)
    assert prdc_fast(real, gen, k) == prdc(real, gen, k)


@settings(max_examples=30, deadline=None)
@given(point_sets)
def test_matches_double_loop(rng):
    real = rng.standard_normal((15, 2))
    gen = rng.standard_normal((12, 2))
    assert prdc(real, gen, 3).fields() == pytest.approx(double_loop_prdc(real, gen, 3), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(point_sets)
def test_exchange_symmetry(rng):
    a = rng.standard_normal((30, 2))
    b = rng.standard_normal((30, 2)) + 0.5
    ab, ba = prdc(a, b, 4), prdc(b, a, 4)
    assert ab.precision == ba.recall
    assert ab.recall == ba.precision


@settings(max_examples=30, deadline=None)
@given(point_sets, st.integers(0, 3), st.booleans())
def test_rigid_motion_invariance(rng, quarter_turns, flip):
    # integer coordinates keep rotations by quarter turns, reflections and
    # integer shifts exact, so every count must be unchanged
    real = rng.integers(-50, 50, (40, 2)).astype(float)
    gen = rng.integers(-50, 50, (40, 2)).astype(float)
    m = np.linalg.matrix_power(np.array([[0.0, -1.0], [1.0, 0.0]]), quarter_turns)
    if flip:
        m = m @ np.diag([1.0, -1.0])
    shift = rng.integers(-1000, 1000, 2).astype(float)
    moved = prdc(real @ m.T + shift, gen @ m.T + shift, 5)
    assert moved.fields() == prdc(real, gen, 5).fields()


@settings(max_examples=30, deadline=None)
@given(point_sets, st.integers(1, 5))
def test_density_and_coverage_monotone_in_k(rng, k):
    real = rng.standard_normal((50, 2))
    gen = rng.standard_normal((50, 2))
    small, big = prdc(real, gen, k), prdc(real, gen, k + 1)
    assert big.precision >= small.precision
    assert big.coverage >= small.coverage
    assert big.recall >= small.recall
    assert big.density * (k + 1) >= small.density * k


def test_all_zero_and_collinear_degenerate():
    z = np.zeros((20, 2))
    assert prdc_fast(z, z, 3) == prdc(z, z, 3)
    line = np.stack([np.arange(30.0), 2 * np.arange(30.0)], axis=1)
    assert prdc_fast(line, line[::-1] + 0.5, 4) == prdc(line, line[::-1] + 0.5, 4)


def test_large_spot_check_against_naive():
    rng = np.random.default_rng(3)
    real = rng.standard_normal((3000, 2))
    gen = rng.standard_normal((2500, 2)) * 0.9 + 0.1
    assert prdc_fast(real, gen, 5) == prdc(real, gen, 5)


def test_high_dimension_falls_back():
    rng = np.random.default_rng(4)
    real, gen = rng.standard_normal((2, 60, 5))
    assert prdc_fast(real, gen, 3) == prdc(real, gen, 3)
