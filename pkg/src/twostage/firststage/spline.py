"""Cubic regression splines fitted by OLS on a B-spline basis."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.interpolate import BSpline

from ..errors import ClampWarning
from .ols import FirstStageFit, check_rank

DEGREE = 3


class CubicSplineBasis:
    """C2 piecewise-cubic basis on the breakpoints ``knots`` (first and last are the boundary)."""

    def __init__(self, knots):
        knots = np.asarray(knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be a strictly increasing sequence of at least two points")
        self.knots = knots
        self.t = np.r_[[knots[0]] * DEGREE, knots, [knots[-1]] * DEGREE]

    @property
    def dim(self) -> int:
        return self.knots.size + DEGREE - 1

    def clamp(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        lo, hi = self.knots[0], self.knots[-1]
        if np.any((z < lo) | (z > hi)):
            warnings.warn(f"evaluation points outside [{lo}, {hi}] were clamped", ClampWarning, stacklevel=3)
            z = np.clip(z, lo, hi)
        return z

    def __call__(self, z) -> np.ndarray:
        z = self.clamp(np.atleast_1d(z))
        return BSpline.design_matrix(z, self.t, DEGREE).toarray()

    def function(self, coef) -> BSpline:
        return BSpline(self.t, np.asarray(coef, dtype=float), DEGREE, extrapolate=False)


def spline_gam_fit(z, d, knots, cov: str = "hc0") -> FirstStageFit:
    """Regress ``d`` on the cubic spline basis of ``z``.

    Parameters
    ----------
    cov : {"hc0", "classical"}
        ``"hc0"`` is the heteroskedasticity-robust sandwich
        ``(B'B)^{-1}(sum r_i^2 b_i b_i')(B'B)^{-1}``; ``"classical"`` is
        ``s^2 (B'B)^{-1}`` with ``s^2 = RSS / (n - p)``.  A binary ``d`` is
        heteroskedastic by construction, which is why the sandwich is the default.

    ``predict`` clamps points beyond the knot span (with a warning).
    """
    z = np.asarray(z, dtype=float)
    d = np.asarray(d, dtype=float)
    basis = CubicSplineBasis(knots)
    B = basis(z)
    n, p = B.shape
    check_rank(B, "spline basis")
    BtB = B.T @ B
    gamma = np.linalg.solve(BtB, B.T @ d)
    resid = d - B @ gamma
    bread = np.linalg.inv(BtB)
    if cov == "hc0":
        half = bread @ (B * resid[:, None]).T
        cov_gamma = half @ half.T
    elif cov == "classical":
        cov_gamma = resid @ resid / (n - p) * bread
    else:
        raise ValueError(f"unknown covariance type {cov!r}")
    cov_gamma = 0.5 * (cov_gamma + cov_gamma.T)

    def predict(znew, g=None):
        return basis(znew) @ (gamma if g is None else g)

    fit = FirstStageFit(gamma, cov_gamma, predict, resid)
    fit.basis = basis
    return fit
