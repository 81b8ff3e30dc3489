"""Simulation-based inference for plug-in (two-stage) extremum estimators.

Given an estimate of the Hessian ``A``, of the conditional variance ``V`` of
the influence function, and a generator of draws ``E_s`` approximating the
law of its conditional mean, the sample

    psi_s = A^{-1} (V^{1/2} zeta_s + E_s),   zeta_s ~ N(0, I)

approximates the law of ``sqrt(n) (theta_hat - theta_0)``.  This module turns
that sample into CDFs, confidence intervals, variance estimates and debiased
point estimates.

Reductions (means, covariances, sorts) run over arrays whose row order is the
draw index, so results do not depend on how draws were scheduled.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy import integrate, stats

from .errors import EmptySample, NotPSD, NotSymmetric, SingularHessian, SizeMismatch
from .rng import EDRAW, ZETA, Stream, as_stream

DebiasMode = Literal["mean", "median"]

DEFAULT_KAPPA = 1000
_SYM_TOL = 1e-10
_PSD_TOL = 1e-10
_MAX_COND = 1e12


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    return a


def _as_vector(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def cholesky_sqrt(M, tol: float = _SYM_TOL) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == M`` for symmetric PSD ``M``.

    ``M`` is symmetrized as ``(M + M.T) / 2`` first.  Semi-definite inputs are
    handled by zeroing columns whose pivot falls below ``tol * ||M||``.
    """
    M = _as_matrix(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {M.shape}")
    scale = np.linalg.norm(M) if M.size else 0.0
    if M.size and np.max(np.abs(M - M.T)) > tol * (1.0 + scale):
        raise NotSymmetric("matrix is not symmetric")
    if not np.all(np.isfinite(M)):
        raise NotPSD("matrix has non-finite entries")
    M = 0.5 * (M + M.T)
    if scale == 0.0:
        return np.zeros_like(M)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    min_eig = np.linalg.eigvalsh(M)[0]
    if min_eig < -_PSD_TOL * scale:
        raise NotPSD(f"smallest eigenvalue {min_eig:.3e} is below -{_PSD_TOL:g}*||M||")
    # Cholesky–Crout with zeroed columns for (numerically) null pivots.
    k = M.shape[0]
    L = np.zeros_like(M)
    zero_tol = _PSD_TOL * scale
    for j in range(k):
        d = M[j, j] - L[j, :j] @ L[j, :j]
        if d <= zero_tol:
            continue
        L[j, j] = math.sqrt(d)
        L[j + 1 :, j] = (M[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def _check_hessian(A: np.ndarray) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SingularHessian(f"Hessian must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise SingularHessian("Hessian has non-finite entries")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > _MAX_COND:
        raise SingularHessian(f"Hessian is singular (condition number {cond:.3e})")


@dataclass
class InfluenceParts:
    """Model-specific inputs of the simulation: ``A``, ``V`` and a draw generator for ``E``.

    ``e_draw(stream, s)`` must be a pure function of its arguments.  ``e_batch``
    is an optional vectorized equivalent returning the ``(kappa, K)`` matrix
    whose row ``s`` equals ``e_draw(stream, s)``.

    ``cond_variance=None`` marks models where the conditional variance is not
    tractable; only the normal path (variance computed elsewhere) is then
    available and :func:`simulate_psi` refuses to run.
    """

    hessian: np.ndarray
    cond_variance: np.ndarray | None
    e_draw: Callable[[Stream, int], np.ndarray]
    e_batch: Callable[[Stream, int], np.ndarray] | None = None
    diagnostics: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.hessian = _as_matrix(self.hessian)
        _check_hessian(self.hessian)
        if self.cond_variance is not None:
            self.cond_variance = _as_matrix(self.cond_variance)
            if self.cond_variance.shape != self.hessian.shape:
                raise SizeMismatch("cond_variance and hessian shapes differ")
            self._sqrt_v = cholesky_sqrt(self.cond_variance)

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    @property
    def sqrt_variance(self) -> np.ndarray:
        if self.cond_variance is None:
            raise NotPSD("conditional variance is unavailable for this model")
        return self._sqrt_v

    def e_matrix(self, stream: Stream, kappa: int) -> np.ndarray:
        """The ``(kappa, K)`` matrix of draws ``E_1 .. E_kappa`` (cached)."""
        key = (stream, kappa)
        if key not in self._cache:
            if self.e_batch is not None:
                E = np.asarray(self.e_batch(stream, kappa), dtype=float).reshape(kappa, self.dim)
            else:
                E = np.stack([_as_vector(self.e_draw(stream, s)) for s in range(kappa)])
            if not np.all(np.isfinite(E)):
                raise ValueError("non-finite conditional-mean draw")
            self._cache.clear()
            self._cache[key] = E
        return self._cache[key]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """``A^{-1} rhs`` applied row-wise to a ``(m, K)`` array."""
        return np.linalg.solve(self.hessian, rhs.T).T


@dataclass
class PsiSample:
    """Simulated sample of ``psi`` (``debiased=True`` for the centered sample)."""

    draws: np.ndarray
    n: int
    kappa: int
    theta_hat: np.ndarray
    debiased: bool = False

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim == 1:
            self.draws = self.draws[:, None]
        self.theta_hat = _as_vector(self.theta_hat)
        if self.draws.shape[0] != self.kappa:
            raise SizeMismatch("number of draws differs from kappa")
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("psi sample has non-finite draws")

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    def theta_sample(self) -> np.ndarray:
        """``theta_hat - psi_s / sqrt(n)`` for every draw."""
        return self.theta_hat - self.draws / math.sqrt(self.n)


@functools.lru_cache(maxsize=4)
def _zeta_cached(stream: Stream, kappa: int, dim: int) -> np.ndarray:
    z = stream.child(ZETA).normal_rows(kappa, dim)
    z.flags.writeable = False
    return z


def _zeta(stream: Stream, kappa: int, dim: int) -> np.ndarray:
    return _zeta_cached(stream, kappa, dim)


def _e_stream(stream: Stream) -> Stream:
    return stream.child(EDRAW)


def _check_kappa(kappa: int) -> None:
    if kappa < 2:
        raise ValueError("kappa must be at least 2")


def simulate_psi(parts: InfluenceParts, n: int, kappa: int, seed, theta_hat=None) -> PsiSample:
    """Draw ``psi_s = A^{-1}(V^{1/2} zeta_s + E_s)`` for ``s = 0 .. kappa-1``."""
    _check_kappa(kappa)
    stream = as_stream(seed)
    L = parts.sqrt_variance
    zeta = _zeta(stream, kappa, parts.dim)
    E = parts.e_matrix(_e_stream(stream), kappa)
    draws = parts.solve(zeta @ L.T + E)
    if theta_hat is None:
        theta_hat = np.zeros(parts.dim)
    return PsiSample(draws, n, kappa, theta_hat)


class EmpiricalCDF:
    """Right-continuous step function ``F(t) = #{x <= t} / m``."""

    def __init__(self, sample):
        x = np.asarray(sample, dtype=float).ravel()
        if x.size == 0:
            raise EmptySample("empirical CDF of an empty sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("sample has non-finite values")
        self.sorted = np.sort(x)

    @property
    def size(self) -> int:
        return self.sorted.size

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.searchsorted(self.sorted, t, side="right") / self.size


def empirical_cdf(sample) -> EmpiricalCDF:
    return EmpiricalCDF(sample)


def quantile(sample, alpha: float) -> float:
    """Lower empirical quantile: the ``ceil(alpha * m)``-th order statistic."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("quantile of an empty sample")
    # round away representation noise in alpha * m (0.975 * 1000 = 975.0000000000001)
    k = max(1, math.ceil(round(alpha * x.size, 9)))
    return float(np.partition(x, k - 1)[k - 1])


def _quantiles(columns: np.ndarray, alpha: float) -> np.ndarray:
    return np.array([quantile(columns[:, j], alpha) for j in range(columns.shape[1])])


def confidence_interval(theta_hat, psi: PsiSample, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate bounds ``(T_{a/2}, T_{1-a/2})`` of ``{theta_hat - psi_s / sqrt(n)}``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    theta_hat = _as_vector(theta_hat)
    if theta_hat.shape != psi.theta_hat.shape or not np.allclose(theta_hat, psi.theta_hat):
        raise ValueError("theta_hat differs from the one the psi sample was built around")
    a = 1.0 - level
    sample = psi.theta_sample()
    return _quantiles(sample, a / 2), _quantiles(sample, 1 - a / 2)


def one_sided_bounds(psi: PsiSample, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """``(T_{1-level}, T_{level})``: bounds of ``[T, inf)`` and ``(-inf, T]`` intervals."""
    sample = psi.theta_sample()
    return _quantiles(sample, 1 - level), _quantiles(sample, level)


def _sample_cov(E: np.ndarray) -> np.ndarray:
    centered = E - E.mean(axis=0)
    return centered.T @ centered / (E.shape[0] - 1)


def asymptotic_variance(parts: InfluenceParts, n: int, kappa: int, seed) -> np.ndarray:
    """Variance of ``theta_hat``: ``A^{-1}(V + SampleCov(E)) A^{-1} / n``."""
    _check_kappa(kappa)
    E = parts.e_matrix(_e_stream(as_stream(seed)), kappa)
    V = parts.cond_variance if parts.cond_variance is not None else np.zeros((parts.dim, parts.dim))
    sigma = V + _sample_cov(E)
    Ainv = np.linalg.inv(parts.hessian)
    out = Ainv @ sigma @ Ainv.T / n
    return 0.5 * (out + out.T)


def center_of_draws(E: np.ndarray, mode: DebiasMode = "mean") -> np.ndarray:
    """Mean, or coordinate-wise lower median, of the conditional-mean draws."""
    if mode == "mean":
        return E.mean(axis=0)
    if mode == "median":
        k = (E.shape[0] - 1) // 2
        return np.partition(E, k, axis=0)[k]
    raise ValueError(f"unknown debias mode {mode!r}")


def bias_shift(parts: InfluenceParts, kappa: int, seed, mode: DebiasMode = "mean") -> np.ndarray:
    """Estimated mean of ``sqrt(n)(theta_hat - theta_0)``: ``A^{-1} Omega``."""
    _check_kappa(kappa)
    E = parts.e_matrix(_e_stream(as_stream(seed)), kappa)
    return np.linalg.solve(parts.hessian, center_of_draws(E, mode))


def debias(theta_hat, parts: InfluenceParts, n: int, kappa: int, seed, mode: DebiasMode = "mean") -> np.ndarray:
    """``theta* = theta_hat - A^{-1} Omega / sqrt(n)``."""
    return _as_vector(theta_hat) - bias_shift(parts, kappa, seed, mode) / math.sqrt(n)


def debiased_psi(parts_star: InfluenceParts, n: int, kappa: int, seed, theta_star=None,
                 mode: DebiasMode = "mean") -> PsiSample:
    """Centered sample ``A*^{-1} V*^{1/2} zeta_s + A*^{-1}(E*_s - Omega*)``.

    ``parts_star`` must be rebuilt at the debiased estimate.
    """
    _check_kappa(kappa)
    stream = as_stream(seed)
    L = parts_star.sqrt_variance
    zeta = _zeta(stream, kappa, parts_star.dim)
    E = parts_star.e_matrix(_e_stream(stream), kappa)
    draws = parts_star.solve(zeta @ L.T + (E - center_of_draws(E, mode)))
    if theta_star is None:
        theta_star = np.zeros(parts_star.dim)
    return PsiSample(draws, n, kappa, theta_star, debiased=True)


def normal_path_psi(parts: InfluenceParts, n: int, kappa: int, seed, variance,
                    theta_hat=None, mode: DebiasMode = "mean", centered: bool = False) -> PsiSample:
    """Normal sample for models without a tractable conditional variance.

    ``psi_s = A^{-1} Omega + (n variance)^{1/2} zeta_s``, where ``variance`` is the
    asymptotic variance of ``theta_hat`` obtained elsewhere (for instance from a
    sequential M-estimator sandwich).  With ``centered=True`` the mean is zero,
    which is the law used for a debiased estimate.
    """
    _check_kappa(kappa)
    stream = as_stream(seed)
    L = cholesky_sqrt(n * _as_matrix(variance))
    zeta = _zeta(stream, kappa, parts.dim)
    shift = np.zeros(parts.dim) if centered else bias_shift(parts, kappa, stream, mode)
    if theta_hat is None:
        theta_hat = np.zeros(parts.dim)
    return PsiSample(shift + zeta @ L.T, n, kappa, theta_hat, debiased=centered)


def wasserstein_l1(F, G) -> float:
    """L1-Wasserstein distance between two empirical samples of equal size."""
    a = np.sort(np.asarray(F, dtype=float).ravel())
    b = np.sort(np.asarray(G, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise EmptySample("Wasserstein distance of an empty sample")
    if a.size != b.size:
        raise SizeMismatch(f"samples differ in size ({a.size} vs {b.size})")
    return float(np.mean(np.abs(a - b)))


def cdf_l1_distance(grid: np.ndarray, F: np.ndarray, G: np.ndarray) -> float:
    """``int |F(t) - G(t)| dt`` of two CDFs tabulated on a common grid (trapezoid rule)."""
    return float(integrate.trapezoid(np.abs(np.asarray(F) - np.asarray(G)), grid))


def normal_cdf(t, mean: float, var: float) -> np.ndarray:
    """CDF of ``N(mean, var)``; the normal baseline when ``E`` is Gaussian."""
    sd = math.sqrt(max(var, 0.0))
    t = np.asarray(t, dtype=float)
    if sd == 0.0:
        return (t >= mean).astype(float)
    return stats.norm.cdf(t, loc=mean, scale=sd)


@dataclass
class EstimationReport:
    theta_hat: np.ndarray
    theta_star: np.ndarray
    variance: np.ndarray
    intervals: list[tuple[float, float, float]]
    cdf_grid: list[list[tuple[float, float]]]
    debias_mode: str = "mean"
    n: int = 0
    kappa: int = 0

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.variance), 0, None))

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "theta_star": self.theta_star.tolist(),
            "std_errors": self.std_errors.tolist(),
            "variance": self.variance.tolist(),
            "intervals": [list(iv) for iv in self.intervals],
            "debias_mode": self.debias_mode,
            "n": self.n,
            "kappa": self.kappa,
        }


def build_report(theta_hat, parts: InfluenceParts, n: int, kappa: int = DEFAULT_KAPPA, seed=0,
                 level: float = 0.95, mode: DebiasMode = "mean", grid_size: int = 101) -> EstimationReport:
    """Point estimate, debiased estimate, variance, CIs and a tabulated CDF of ``theta``."""
    theta_hat = _as_vector(theta_hat)
    psi = simulate_psi(parts, n, kappa, seed, theta_hat=theta_hat)
    lo, hi = confidence_interval(theta_hat, psi, level)
    var = asymptotic_variance(parts, n, kappa, seed)
    theta_star = debias(theta_hat, parts, n, kappa, seed, mode)
    grids = []
    for j in range(parts.dim):
        ecdf = EmpiricalCDF(psi.draws[:, j])
        ts = np.linspace(ecdf.sorted[0], ecdf.sorted[-1], grid_size)
        grids.append(list(zip(ts.tolist(), ecdf(ts).tolist())))
    intervals = [(float(lo[j]), float(hi[j]), level) for j in range(parts.dim)]
    return EstimationReport(theta_hat, theta_star, var, intervals, grids, mode, n, kappa)
