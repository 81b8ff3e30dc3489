import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from twostage.errors import EmptySample, NotPSD, NotSymmetric, SingularHessian, SizeMismatch
from twostage.inference import (
    EmpiricalCDF,
    InfluenceParts,
    PsiSample,
    asymptotic_variance,
    build_report,
    cholesky_sqrt,
    confidence_interval,
    debias,
    debiased_psi,
    empirical_cdf,
    quantile,
    simulate_psi,
    wasserstein_l1,
)
from twostage.rng import Stream


def const_parts(A, V, e):
    e = np.atleast_1d(np.asarray(e, dtype=float))
    return InfluenceParts(A, V, lambda stream, s: e.copy())


def normal_parts(A, V, sd, dim=1):
    def draw(stream, s):
        return sd * stream.generator(s).standard_normal(dim)

    return InfluenceParts(A, V, draw, e_batch=lambda stream, k: sd * stream.normal_rows(k, dim))


# ---------------------------------------------------------------- cholesky_sqrt


def test_cholesky_identity():
    np.testing.assert_allclose(cholesky_sqrt(np.eye(3)), np.eye(3))


def test_cholesky_diagonal():
    np.testing.assert_allclose(cholesky_sqrt([[4.0, 0.0], [0.0, 9.0]]), [[2.0, 0.0], [0.0, 3.0]])


def test_cholesky_random_spd_matches_eig_reconstruction():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((5, 5))
    M = B.T @ B
    L = cholesky_sqrt(M)
    w, Q = np.linalg.eigh(M)
    oracle = (Q * w) @ Q.T
    assert np.allclose(np.tril(L), L)
    assert np.linalg.norm(L @ L.T - oracle) <= 1e-8 * (1 + np.linalg.norm(M))


def test_cholesky_semidefinite():
    v = np.array([[1.0], [2.0], [-1.0]])
    M = v @ v.T
    L = cholesky_sqrt(M)
    assert np.allclose(np.tril(L), L)
    assert np.linalg.norm(L @ L.T - M) <= 1e-8 * (1 + np.linalg.norm(M))


def test_cholesky_zero_matrix():
    assert np.array_equal(cholesky_sqrt(np.zeros((2, 2))), np.zeros((2, 2)))


def test_cholesky_errors():
    with pytest.raises(NotPSD):
        cholesky_sqrt([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NotSymmetric):
        cholesky_sqrt([[1.0, 0.5], [0.0, 1.0]])


def test_cholesky_tolerates_roundoff_asymmetry():
    M = np.array([[2.0, 1.0], [1.0 + 1e-14, 2.0]])
    L = cholesky_sqrt(M)
    np.testing.assert_allclose(L @ L.T, 0.5 * (M + M.T), atol=1e-12)


# ---------------------------------------------------------------- simulate_psi


def test_psi_zero_case():
    psi = simulate_psi(const_parts(np.eye(2), np.zeros((2, 2)), [0.0, 0.0]), n=10, kappa=50, seed=1)
    assert psi.draws.shape == (50, 2)
    assert np.all(psi.draws == 0)


def test_psi_direct_arithmetic():
    psi = simulate_psi(const_parts(2.0, 0.0, 0.4), n=10, kappa=7, seed=3)
    np.testing.assert_allclose(psi.draws, 0.2)


def test_psi_standard_normal_lln():
    psi = simulate_psi(const_parts(1.0, 1.0, 0.0), n=1, kappa=100_000, seed=11)
    assert abs(psi.draws.mean()) < 0.02
    assert abs(psi.draws.var(ddof=1) - 1) < 0.02


def test_psi_singular_hessian():
    with pytest.raises(SingularHessian):
        const_parts([[1.0, 1.0], [1.0, 1.0]], np.eye(2), [0.0, 0.0])


def test_psi_requires_variance():
    parts = InfluenceParts(1.0, None, lambda st_, s: np.zeros(1))
    with pytest.raises(NotPSD):
        simulate_psi(parts, 10, 5, 0)


def test_psi_deterministic_and_batch_consistent():
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    V = np.array([[1.0, 0.2], [0.2, 0.5]])
    batch = normal_parts(A, V, 0.7, dim=2)
    single = InfluenceParts(A, V, batch.e_draw)
    p1 = simulate_psi(batch, 100, 300, 42)
    p2 = simulate_psi(single, 100, 300, 42)
    p3 = simulate_psi(normal_parts(A, V, 0.7, dim=2), 100, 300, 42)
    assert np.array_equal(p1.draws, p2.draws)
    assert np.array_equal(p1.draws, p3.draws)


def test_e_draw_reproducible():
    parts = normal_parts(1.0, 1.0, 1.0)
    s = Stream(9).child(2)
    assert np.array_equal(parts.e_draw(s, 17), parts.e_draw(s, 17))


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.1, 20.0), seed=st.integers(0, 2**31))
def test_psi_scale_equivariance(c, seed):
    A = np.array([[1.5, 0.2], [0.2, 0.8]])
    V = np.array([[0.5, 0.1], [0.1, 0.4]])
    base = normal_parts(A, V, 0.3, dim=2)
    scaled = InfluenceParts(
        c * A, c**2 * V, lambda stream, s: c * base.e_draw(stream, s),
        e_batch=lambda stream, k: c * base.e_batch(stream, k),
    )
    p = simulate_psi(base, 50, 200, seed)
    q = simulate_psi(scaled, 50, 200, seed)
    np.testing.assert_allclose(q.draws, p.draws, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- empirical_cdf / quantile


def test_ecdf_counting():
    F = empirical_cdf([1, 2, 3])
    assert F(2) == pytest.approx(2 / 3)
    assert F(np.inf) == 1.0
    assert F(0.999) == 0.0


def test_ecdf_normal_symmetry():
    x = np.random.default_rng(5).standard_normal(10_000)
    assert abs(empirical_cdf(x)(0.0) - 0.5) < 0.02


def test_ecdf_empty():
    with pytest.raises(EmptySample):
        empirical_cdf([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.floats(-2e6, 2e6), st.floats(0, 1e5))
def test_ecdf_monotone_right_continuous(xs, t, dt):
    F = EmpiricalCDF(xs)
    m = len(xs)
    assert F(t) <= F(t + dt)
    assert float(F(t) * m) == pytest.approx(round(F(t) * m))
    # right continuity at every atom: F(x) counts x itself
    for x in xs:
        assert F(x) >= np.mean(np.asarray(xs) <= x) - 1e-15


def test_quantile_convention():
    assert quantile([10, 20, 30, 40], 0.5) == 20
    assert quantile([40, 30, 10, 20], 0.75) == 30
    for a in (0.01, 0.5, 0.99):
        assert quantile([5], a) == 5


def test_quantile_uniform_oracle():
    u = np.random.default_rng(8).uniform(size=100_000)
    assert abs(quantile(u, 0.975) - 0.975) < 0.005


def test_quantile_errors():
    with pytest.raises(EmptySample):
        quantile([], 0.5)
    with pytest.raises(ValueError):
        quantile([1.0], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=80), st.floats(0.001, 0.999))
def test_quantile_is_generalized_inverse_of_ecdf(xs, a):
    q = quantile(xs, a)
    F = EmpiricalCDF(xs)
    # smallest sample point with F >= a
    assert F(q) >= a - 1e-12
    below = [x for x in xs if x < q]
    if below:
        assert F(max(below)) < a + 1e-12


# ---------------------------------------------------------------- confidence_interval


def test_ci_degenerate():
    psi = PsiSample(np.zeros((10, 1)), n=25, kappa=10, theta_hat=[1.5])
    lo, hi = confidence_interval([1.5], psi, 0.95)
    assert lo[0] == hi[0] == 1.5


def test_ci_two_point_mass():
    psi = PsiSample(np.array([-1.0, 1.0] * 50)[:, None], n=1, kappa=100, theta_hat=[0.0])
    lo, hi = confidence_interval([0.0], psi, 0.5)
    assert (lo[0], hi[0]) == (-1.0, 1.0)


def test_ci_normal_oracle():
    psi = simulate_psi(const_parts(1.0, 1.0, 0.0), n=100, kappa=100_000, seed=2, theta_hat=[1.0])
    lo, hi = confidence_interval([1.0], psi, 0.95)
    z = stats.norm.ppf(0.975) / 10
    assert abs(lo[0] - (1 - z)) < 0.01
    assert abs(hi[0] - (1 + z)) < 0.01


def test_ci_theta_mismatch():
    psi = PsiSample(np.zeros((4, 1)), n=1, kappa=4, theta_hat=[0.0])
    with pytest.raises(ValueError):
        confidence_interval([1.0], psi, 0.9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), l1=st.floats(0.05, 0.9), gap=st.floats(0.01, 0.09))
def test_ci_nesting(seed, l1, gap):
    psi = simulate_psi(normal_parts(1.0, 0.5, 1.3), n=40, kappa=500, seed=seed, theta_hat=[0.3])
    lo1, hi1 = confidence_interval([0.3], psi, l1)
    lo2, hi2 = confidence_interval([0.3], psi, l1 + gap)
    assert lo2[0] <= lo1[0] <= hi1[0] <= hi2[0]


# ---------------------------------------------------------------- asymptotic_variance / debias


def test_variance_constant_draws():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    V = np.array([[1.0, 0.3], [0.3, 2.0]])
    got = asymptotic_variance(const_parts(A, V, [0.3, -0.2]), n=50, kappa=20, seed=0)
    Ai = np.linalg.inv(A)
    np.testing.assert_allclose(got, Ai @ V @ Ai / 50, rtol=1e-12, atol=1e-15)


def test_variance_sample_variance_oracle():
    got = asymptotic_variance(normal_parts(1.0, 0.0, 2.0), n=1, kappa=100_000, seed=4)
    assert abs(got[0, 0] - 4) < 0.1


def test_variance_direct_arithmetic():
    got = asymptotic_variance(const_parts(2.0, 1.0, 0.0), n=100, kappa=10, seed=0)
    assert got[0, 0] == pytest.approx(0.0025, abs=1e-15)


def test_debias_zero():
    assert np.array_equal(debias([1.2, 3.0], const_parts(np.eye(2), np.eye(2), [0, 0]), 100, 10, 0), [1.2, 3.0])


def test_debias_direct_arithmetic():
    got = debias([1.0], const_parts(2.0, 0.0, 0.4), n=100, kappa=10, seed=0)
    assert got[0] == pytest.approx(0.98, abs=1e-14)


def test_debias_median_robust_to_outlier():
    vals = [-1.0, 0.0, 100.0]
    parts = InfluenceParts(1.0, 0.0, lambda stream, s: np.array([vals[s]]))
    assert debias([2.0], parts, 1, 3, 0, mode="median")[0] == 2.0
    assert debias([2.0], parts, 1, 3, 0, mode="mean")[0] == pytest.approx(2.0 - 33.0)


def test_lower_median_even():
    vals = [4.0, 1.0, 3.0, 2.0]
    parts = InfluenceParts(1.0, 0.0, lambda stream, s: np.array([vals[s]]))
    assert debias([0.0], parts, 1, 4, 0, mode="median")[0] == -2.0


def test_zero_first_stage_noise_reduction():
    A = np.array([[1.5, 0.1], [0.1, 0.9]])
    V = np.array([[0.7, 0.2], [0.2, 0.6]])
    parts = const_parts(A, V, [0.0, 0.0])
    Ai = np.linalg.inv(A)
    np.testing.assert_allclose(asymptotic_variance(parts, 30, 100, 7), Ai @ V @ Ai / 30, rtol=1e-12)
    assert np.array_equal(debias([0.5, -0.5], parts, 30, 100, 7), [0.5, -0.5])


def test_determinism():
    A = np.array([[1.5, 0.1], [0.1, 0.9]])
    out = []
    for _ in range(2):
        parts = normal_parts(A, np.eye(2), 0.5, dim=2)
        out.append((simulate_psi(parts, 10, 100, 3).draws, asymptotic_variance(parts, 10, 100, 3),
                    debias([0, 0], parts, 10, 100, 3)))
    for a, b in zip(*out):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------- debiased_psi


def test_debiased_psi_constant_draws_is_pure_normal():
    A, V = 2.0, 4.0
    star = debiased_psi(const_parts(A, V, 3.0), n=10, kappa=200, seed=5)
    plain = simulate_psi(const_parts(A, V, 0.0), n=10, kappa=200, seed=5)
    np.testing.assert_allclose(star.draws, plain.draws, atol=1e-14)
    assert star.debiased


def test_debiased_psi_two_point_symmetric():
    c = 0.8
    parts = InfluenceParts(1.0, 0.0, lambda stream, s: np.array([c if s % 2 else -c]))
    star = debiased_psi(parts, n=1, kappa=1000, seed=0)
    assert abs(star.draws.mean()) < 1e-12


def test_debiased_psi_mean_mode_exactly_centered():
    parts = normal_parts(np.array([[2.0, 0.4], [0.4, 1.0]]), np.zeros((2, 2)), 1.7, dim=2)
    star = debiased_psi(parts, n=4, kappa=333, seed=9)
    np.testing.assert_allclose(star.draws.mean(axis=0), 0.0, atol=1e-13)


# ---------------------------------------------------------------- wasserstein_l1


def test_wasserstein_identical():
    x = np.random.default_rng(0).standard_normal(100)
    assert wasserstein_l1(x, x[::-1]) == 0.0


def test_wasserstein_point_masses():
    assert wasserstein_l1(np.zeros(7), np.ones(7)) == 1.0


def test_wasserstein_matches_cdf_integral():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(1000)
    b = rng.standard_normal(1000) * 1.3 + 0.2
    Fa, Fb = EmpiricalCDF(a), EmpiricalCDF(b)
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    grid = np.linspace(lo, hi, 400_001)
    oracle = integrate.trapezoid(np.abs(Fa(grid) - Fb(grid)), grid)
    assert abs(wasserstein_l1(a, b) - oracle) < 1e-3


def test_wasserstein_errors():
    with pytest.raises(SizeMismatch):
        wasserstein_l1([1.0, 2.0], [1.0])
    with pytest.raises(EmptySample):
        wasserstein_l1([], [])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 50))
def test_wasserstein_pseudometric(seed, m):
    rng = np.random.default_rng(seed)
    a, b, c = rng.standard_normal((3, m)) * rng.uniform(0.1, 3, size=(3, 1))
    dab, dba = wasserstein_l1(a, b), wasserstein_l1(b, a)
    assert dab == dba >= 0
    assert wasserstein_l1(a, c) <= dab + wasserstein_l1(b, c) + 1e-12
    assert wasserstein_l1(a, rng.permutation(a)) == 0


# ---------------------------------------------------------------- report


def test_build_report_consistency():
    parts = normal_parts(np.array([[2.0, 0.0], [0.0, 1.0]]), np.eye(2), 0.5, dim=2)
    rep = build_report([1.0, 2.0], parts, n=100, kappa=500, seed=1)
    for (lo, hi, lev), th in zip(rep.intervals, rep.theta_hat):
        assert lo <= hi and lev == 0.95
    assert np.allclose(rep.variance, rep.variance.T)
    assert np.all(np.linalg.eigvalsh(rep.variance) >= 0)
    assert len(rep.cdf_grid) == 2
    ts = [t for t, _ in rep.cdf_grid[0]]
    fs = [f for _, f in rep.cdf_grid[0]]
    assert ts == sorted(ts) and fs == sorted(fs) and fs[-1] == 1.0
    assert math.isfinite(rep.to_dict()["std_errors"][0])
