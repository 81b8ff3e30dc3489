"""OLS first stages with a drawable normal approximation of the estimator's law."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import RankDeficient
from ..inference import cholesky_sqrt
from ..rng import Stream


@dataclass
class FirstStageFit:
    """Fitted first-stage parameters and the estimated law ``N(gamma_hat, cov_gamma)``.

    For stacked fits (several responses on the same regressors) ``gamma_hat``
    is the concatenation ``(gamma_1, ..., gamma_m)`` and ``n_eq`` is ``m``.
    """

    gamma_hat: np.ndarray
    cov_gamma: np.ndarray
    predict: Callable[[np.ndarray], np.ndarray]
    residuals: np.ndarray
    n_eq: int = 1
    _sqrt: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.gamma_hat = np.asarray(self.gamma_hat, dtype=float)
        self.cov_gamma = np.asarray(self.cov_gamma, dtype=float)
        p = self.gamma_hat.size
        if self.cov_gamma.shape != (p, p):
            raise ValueError(f"cov_gamma must be {p}x{p}, got {self.cov_gamma.shape}")

    @property
    def dim(self) -> int:
        return self.gamma_hat.size

    @property
    def sqrt_cov(self) -> np.ndarray:
        if self._sqrt is None:
            self._sqrt = cholesky_sqrt(self.cov_gamma)
        return self._sqrt

    def coefficients(self, gamma: np.ndarray | None = None) -> np.ndarray:
        """Per-equation coefficient matrix ``(p, n_eq)`` (``gamma_hat`` by default)."""
        g = self.gamma_hat if gamma is None else np.asarray(gamma)
        return g.reshape(self.n_eq, -1).T


def draw_fs(fit: FirstStageFit, stream: Stream, s: int) -> np.ndarray:
    """``gamma_hat + cov^{1/2} zeta`` with ``zeta`` taken from draw ``s`` of ``stream``."""
    zeta = stream.generator(s).standard_normal(fit.dim)
    return fit.gamma_hat + fit.sqrt_cov @ zeta


def draw_fs_batch(fit: FirstStageFit, stream: Stream, kappa: int) -> np.ndarray:
    """Rows ``0 .. kappa-1`` of :func:`draw_fs`, as a ``(kappa, p)`` array."""
    zeta = stream.normal_rows(kappa, fit.dim)
    return fit.gamma_hat + zeta @ fit.sqrt_cov.T


def check_rank(Z: np.ndarray, what: str = "design") -> None:
    if Z.shape[0] <= Z.shape[1]:
        raise RankDeficient(f"{what} has {Z.shape[0]} rows for {Z.shape[1]} columns", Z.shape[1] - Z.shape[0] + 1)
    sv = np.linalg.svd(Z, compute_uv=False)
    tol = sv[0] * max(Z.shape) * np.finfo(float).eps
    null_dim = int(np.sum(sv <= tol))
    if null_dim:
        raise RankDeficient(f"{what} is rank deficient (null space of dimension {null_dim})", null_dim)


def _as_design(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    return Z[:, None] if Z.ndim == 1 else Z


def _sandwich(bread: np.ndarray, Z: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """HC0 covariance of stacked coefficients, cross-equation blocks included.

    Block ``(a, b)`` is ``bread (sum_i nu_ia nu_ib z_i z_i') bread``, the
    ``(a, b)`` block of the sandwich built on ``z_i^(nu) = (nu_i1 z_i', ..., nu_im z_i')'``.
    """
    p = Z.shape[1]
    m = resid.shape[1]
    half = [bread @ (Z * resid[:, [a]]).T for a in range(m)]
    cov = np.empty((m * p, m * p))
    for a in range(m):
        for b in range(a, m):
            blk = half[a] @ half[b].T
            if a == b:
                blk = 0.5 * (blk + blk.T)
            cov[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
            cov[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
    return cov


def joint_ols_fit(Z, *responses) -> FirstStageFit:
    """OLS of each response on ``Z`` with the joint HC0 covariance of the stacked estimator.

    ``cov = (1/n) H^{-1} J H^{-1}`` with ``H = diag(Z'Z/n, ..., Z'Z/n)`` and
    ``J = (1/n) sum_i z_i^(nu) z_i^(nu)'``; the off-diagonal blocks carry the
    correlation between the equations' residuals.
    """
    Z = _as_design(Z)
    cols = []
    for r in responses:
        r = np.asarray(r, dtype=float)
        cols.extend([r] if r.ndim == 1 else list(r.T))
    Y = np.column_stack(cols)
    if Y.shape[0] != Z.shape[0]:
        raise ValueError("responses and design have different numbers of rows")
    check_rank(Z)
    ZtZ = Z.T @ Z
    bread = np.linalg.inv(ZtZ)
    # column by column so each equation matches its single-equation fit bit for bit
    coef = np.column_stack([np.linalg.solve(ZtZ, Z.T @ np.ascontiguousarray(Y[:, j])) for j in range(Y.shape[1])])
    resid = np.column_stack([Y[:, j] - Z @ coef[:, j] for j in range(Y.shape[1])])
    cov = _sandwich(bread, Z, resid)
    m = Y.shape[1]

    def predict(z, gamma=None):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        c = coef if gamma is None else np.asarray(gamma).reshape(m, -1).T
        out = z @ c
        return out[:, 0] if m == 1 else out

    return FirstStageFit(coef.T.ravel(), cov, predict, resid[:, 0] if m == 1 else resid, n_eq=m)


def ols_fit(Z, y) -> FirstStageFit:
    """OLS of ``y`` on ``Z`` with the HC0 sandwich ``(Z'Z)^{-1}(sum nu_i^2 z_i z_i')(Z'Z)^{-1}``."""
    return joint_ols_fit(Z, y)
