"""AR(1)-GARCH(1,1) with standardized Student-t innovations.

Parameters are ``(phi0, phi1, beta0, beta1, beta2, nu)``:

    y_i = phi0 + phi1 y_{i-1} + sigma_i eps_i
    sigma_i^2 = beta0 + beta1 (sigma_{i-1} eps_{i-1})^2 + beta2 sigma_{i-1}^2

The likelihood conditions on the first observation; the first conditional
variance is the sample variance of the demeaned series.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal, special

from ..errors import BoundaryOptimum, NonConvergence
from .hac import hac_covariance

PARAM_NAMES = ("phi0", "phi1", "beta0", "beta1", "beta2", "nu")
N_PARAMS = 6
BOUNDARY_TOL = 1e-4


def is_valid(params) -> np.ndarray:
    """Stationarity/positivity constraints, row-wise for a ``(m, 6)`` array."""
    P = np.atleast_2d(params)
    phi1, b0, b1, b2, nu = P[:, 1], P[:, 2], P[:, 3], P[:, 4], P[:, 5]
    ok = (b0 > 0) & (b1 >= 0) & (b2 >= 0) & (b1 + b2 < 1) & (np.abs(phi1) < 1) & (nu > 2)
    return ok if np.ndim(params) > 1 else bool(ok[0])


def clamp_params(params, margin: float = 1e-6) -> np.ndarray:
    """Project parameters onto the constraint set (componentwise, with a small margin)."""
    P = np.array(params, dtype=float, copy=True)
    one = P.ndim == 1
    P = np.atleast_2d(P)
    P[:, 1] = np.clip(P[:, 1], -1 + margin, 1 - margin)
    P[:, 2] = np.maximum(P[:, 2], margin)
    P[:, 3] = np.maximum(P[:, 3], 0.0)
    P[:, 4] = np.maximum(P[:, 4], 0.0)
    s = P[:, 3] + P[:, 4]
    over = s >= 1 - margin
    if np.any(over):
        P[over, 3:5] *= ((1 - margin) / s[over])[:, None]
    P[:, 5] = np.maximum(P[:, 5], 2 + 1e-3)
    return P[0] if one else P


def _t_consts(nu):
    return special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2) - 0.5 * np.log(np.pi * (nu - 2))


def filter_path(params, y, sigma2_init: float) -> tuple[np.ndarray, np.ndarray]:
    """Residuals ``e_i`` and conditional variances ``sigma_i^2`` for ``i = 2 .. n``."""
    phi0, phi1, b0, b1, b2, _ = params
    e = y[1:] - phi0 - phi1 * y[:-1]
    x = np.empty_like(e)
    x[0] = sigma2_init
    x[1:] = b0 + b1 * e[:-1] ** 2
    sigma2 = signal.lfilter([1.0], [1.0, -b2], x)
    return e, sigma2


def loglik_obs(params, y, sigma2_init: float) -> np.ndarray:
    e, s2 = filter_path(params, y, sigma2_init)
    nu = params[5]
    if np.any(s2 <= 0) or nu <= 2:
        return np.full(e.shape, -np.inf)
    return _t_consts(nu) - 0.5 * np.log(s2) - (nu + 1) / 2 * np.log1p(e**2 / ((nu - 2) * s2))


def pit(params, y, sigma2_init: float) -> np.ndarray:
    """Conditional CDF values ``G_i`` of the observations ``i = 2 .. n``."""
    e, s2 = filter_path(params, y, sigma2_init)
    nu = params[5]
    return special.stdtr(nu, e / np.sqrt(s2) * np.sqrt(nu / (nu - 2)))


def pit_batch(P: np.ndarray, y, sigma2_init: float) -> np.ndarray:
    """:func:`pit` for every row of ``P`` (``(m, 6)``), as an ``(m, n-1)`` array."""
    P = np.atleast_2d(P)
    phi0, phi1, b0, b1, b2, nu = (P[:, [j]] for j in range(N_PARAMS))
    e = y[None, 1:] - phi0 - phi1 * y[None, :-1]
    m, T = e.shape
    s2 = np.empty((m, T))
    s2[:, 0] = sigma2_init
    drive = b0[:, 0, None] + b1[:, 0, None] * e[:, :-1] ** 2
    b2v = b2[:, 0]
    for t in range(1, T):
        s2[:, t] = drive[:, t - 1] + b2v * s2[:, t - 1]
    return special.stdtr(nu, e / np.sqrt(s2) * np.sqrt(nu / (nu - 2)))


def _to_natural(u):
    phi0, a, lb0, ls, lw, lnu = u
    s = special.expit(ls)
    w = special.expit(lw)
    return np.array([phi0, np.tanh(a), np.exp(lb0), s * w, s * (1 - w), 2 + np.exp(lnu)])


def _to_unconstrained(p):
    phi0, phi1, b0, b1, b2, nu = clamp_params(p, 1e-4)
    s = b1 + b2
    return np.array([phi0, np.arctanh(phi1), np.log(b0), special.logit(s), special.logit(b1 / s), np.log(nu - 2)])


def _steps(p) -> np.ndarray:
    return 1e-5 * (1 + np.abs(p))


def numeric_scores(params, y, sigma2_init: float) -> np.ndarray:
    """Per-observation gradients of the log-likelihood, ``(n-1, 6)``, by central differences."""
    p = np.asarray(params, dtype=float)
    h = _steps(p)
    cols = []
    for j in range(N_PARAMS):
        up, dn = p.copy(), p.copy()
        up[j] += h[j]
        dn[j] -= h[j]
        cols.append((loglik_obs(up, y, sigma2_init) - loglik_obs(dn, y, sigma2_init)) / (2 * h[j]))
    return np.column_stack(cols)


def numeric_hessian(params, y, sigma2_init: float) -> np.ndarray:
    """Hessian of the mean log-likelihood by central differences of the mean score."""
    p = np.asarray(params, dtype=float)
    h = _steps(p)
    H = np.empty((N_PARAMS, N_PARAMS))
    for j in range(N_PARAMS):
        up, dn = p.copy(), p.copy()
        up[j] += h[j]
        dn[j] -= h[j]
        H[:, j] = (numeric_scores(up, y, sigma2_init).mean(0) - numeric_scores(dn, y, sigma2_init).mean(0)) / (2 * h[j])
    return 0.5 * (H + H.T)


@dataclass
class GarchFit:
    params: np.ndarray
    sigma2_path: np.ndarray
    loglik: float
    score_path: np.ndarray
    hessian: np.ndarray
    y: np.ndarray = field(repr=False)
    sigma2_init: float = 1.0
    grad_norm: float = 0.0
    iterations: int = 0
    at_boundary: bool = False

    @property
    def n_obs(self) -> int:
        return self.score_path.shape[0]

    def pit(self, params=None) -> np.ndarray:
        return pit(self.params if params is None else params, self.y, self.sigma2_init)

    def pit_batch(self, P) -> np.ndarray:
        return pit_batch(P, self.y, self.sigma2_init)

    def as_dict(self) -> dict:
        return dict(zip(PARAM_NAMES, self.params.tolist()))


def _start(y) -> np.ndarray:
    x, z = y[:-1], y[1:]
    xc = x - x.mean()
    phi1 = float(np.clip(xc @ (z - z.mean()) / (xc @ xc), -0.9, 0.9))
    phi0 = z.mean() - phi1 * x.mean()
    v = np.var(z - phi0 - phi1 * x)
    return np.array([phi0, phi1, 0.05 * v, 0.05, 0.9, 8.0])


def ar_garch_fit(y, start=None, tol: float = 1e-3, on_boundary: str = "raise") -> GarchFit:
    """Maximum likelihood fit with standardized Student-t innovations.

    ``on_boundary="flag"`` returns a fit whose ``beta1 + beta2`` is within
    ``1e-4`` of one with ``at_boundary=True`` instead of raising.

    Raises
    ------
    NonConvergence
        If the optimizer stops with a gradient norm above ``tol`` or the series
        is degenerate.
    BoundaryOptimum
        If ``beta1 + beta2`` ends within ``1e-4`` of one.
    """
    y = np.asarray(y, dtype=float)
    if y.size < 100:
        raise ValueError("AR-GARCH fit needs at least 100 observations")
    if not np.all(np.isfinite(y)):
        raise ValueError("series has non-finite values")
    s0 = float(np.var(y))
    if s0 <= 1e-12 * max(1.0, float(np.mean(y**2))):
        raise NonConvergence("degenerate (constant) series", grad_norm=float("nan"))

    def objective(u):
        ll = loglik_obs(_to_natural(u), y, s0)
        val = -float(np.mean(ll))
        return val if np.isfinite(val) else 1e10

    u0 = _to_unconstrained(_start(y) if start is None else start)
    res = optimize.minimize(objective, u0, method="BFGS", options={"gtol": 1e-7, "maxiter": 2000})
    best = res
    # a second start guards against flat regions in nu
    if not res.success or np.linalg.norm(res.jac) > tol:
        alt = u0.copy()
        alt[5] = np.log(20.0)
        res2 = optimize.minimize(objective, alt, method="BFGS", options={"gtol": 1e-7, "maxiter": 2000})
        if res2.fun < best.fun:
            best = res2
    grad_norm = float(np.linalg.norm(best.jac))
    params = _to_natural(best.x)
    if grad_norm > tol or not np.isfinite(best.fun):
        raise NonConvergence(f"GARCH optimizer stopped with gradient norm {grad_norm:.3e}", grad_norm=grad_norm)
    if on_boundary not in ("raise", "flag"):
        raise ValueError("on_boundary must be 'raise' or 'flag'")
    at_boundary = bool(params[3] + params[4] > 1 - BOUNDARY_TOL)
    if at_boundary and on_boundary == "raise":
        raise BoundaryOptimum(f"beta1 + beta2 = {params[3] + params[4]:.6f} is at the stationarity boundary")
    _, s2 = filter_path(params, y, s0)
    ll = loglik_obs(params, y, s0)
    scores = numeric_scores(params, y, s0)
    H = numeric_hessian(params, y, s0)
    return GarchFit(params, s2, float(ll.sum()), scores, H, y, s0, grad_norm, int(best.nit), at_boundary)


def stacked_covariance(fits: list[GarchFit], bandwidth: float | None = None) -> np.ndarray:
    """``(1/n) H^{-1} J H^{-1}`` for the stacked parameters of several fits.

    ``H`` is block diagonal with each fit's mean Hessian and ``J`` the QS-kernel
    HAC covariance of the stacked per-observation scores.
    """
    n = fits[0].n_obs
    k = len(fits)
    H = np.zeros((k * N_PARAMS, k * N_PARAMS))
    for j, f in enumerate(fits):
        H[j * N_PARAMS:(j + 1) * N_PARAMS, j * N_PARAMS:(j + 1) * N_PARAMS] = f.hessian
    S = np.hstack([f.score_path for f in fits])
    J = hac_covariance(S, bandwidth)
    Hi = np.linalg.inv(H)
    cov = Hi @ J @ Hi.T / n
    return 0.5 * (cov + cov.T)
