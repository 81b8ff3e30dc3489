"""Clayton copula second stage on GARCH probability-integral transforms.

Log-density of the ``k``-dimensional Clayton copula with ``S = sum u_p^{-theta} - k + 1``:

    log c(u; theta) = sum_{p<k} log(p theta + 1) - (theta + 1) sum log u_p - (k + 1/theta) log S

Powers ``u^{-theta}`` overflow for small ``u`` and large ``theta``, so every
quantity is computed from ``a_p = -theta log u_p`` scaled by ``exp(-max a_p)``;
``log S`` switches to ``log1p(sum expm1(a_p))`` near independence.

The copula parameter is estimated after plugging in the GARCH estimates.  The
conditional variance of the influence function is not tractable here, so
inference uses the normal path: the mean shift comes from the draws ``E_s`` and
the variance from the sequential two-step M-estimator sandwich.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, NonConvergence
from ..firststage.garch import N_PARAMS, GarchFit, clamp_params, is_valid, stacked_covariance
from ..firststage.hac import hac_covariance
from ..inference import InfluenceParts, cholesky_sqrt
from ..rng import Stream

U_EPS = 1e-10
BRACKET = (1e-3, 50.0)
MAX_REDRAWS = 100
EXHAUSTED_SHARE = 0.5
PIT_CACHE_LIMIT = 20_000_000


def _prep(u, theta):
    if not np.isfinite(theta) or theta <= 0:
        raise DomainError(f"Clayton parameter must be positive, got {theta}")
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] < 2:
        raise DomainError("copula needs at least two margins")
    if np.any(~np.isfinite(u)) or np.any((u < 0) | (u > 1)):
        raise DomainError("copula arguments must lie in [0, 1]")
    return np.clip(u, U_EPS, 1 - U_EPS)


def _pieces(u, theta):
    """``log S``, ``r1 = sum u^{-t} log u / S`` and ``r2 = sum u^{-t} (log u)^2 / S`` on the last axis."""
    k = u.shape[-1]
    lu = np.log(u)
    a = -theta * lu
    m = a.max(axis=-1, keepdims=True)
    w = np.exp(a - m)
    W = w.sum(-1) - (k - 1) * np.exp(-m[..., 0])
    m = m[..., 0]
    log_s = np.where(m > 1.0, m + np.log(W), np.log1p(np.expm1(np.minimum(a, 1.0)).sum(-1)))
    r1 = (w * lu).sum(-1) / W
    r2 = (w * lu**2).sum(-1) / W
    return lu, log_s, r1, r2


def _p_terms(k, theta):
    p = np.arange(1, k)
    return p / (p * theta + 1), np.log1p(p * theta)


def clayton_logpdf(u, theta: float):
    """Log-density at ``u`` (last axis = margins); scalar for a single point."""
    u = _prep(u, theta)
    k = u.shape[-1]
    lu, log_s, _, _ = _pieces(u, theta)
    _, logs = _p_terms(k, theta)
    out = logs.sum() - (theta + 1) * lu.sum(-1) - (k + 1 / theta) * log_s
    return float(out) if np.ndim(out) == 0 else out


def clayton_dlogpdf(u, theta: float):
    """First and second derivatives of :func:`clayton_logpdf` in ``theta``."""
    u = _prep(u, theta)
    k = u.shape[-1]
    lu, log_s, r1, r2 = _pieces(u, theta)
    ratio, _ = _p_terms(k, theta)
    c = k + 1 / theta
    first = ratio.sum() - lu.sum(-1) + log_s / theta**2 + c * r1
    second = c * r1**2 - c * r2 - (ratio**2).sum() - 2 * r1 / theta**2 - 2 * log_s / theta**3
    if np.ndim(first) == 0:
        return float(first), float(second)
    return first, second


def clayton_mle(U, bracket=BRACKET, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Maximize ``sum_i log c(U_i; theta)`` by Newton safeguarded with bisection."""
    U = _prep(U, 1.0)

    def score(t):
        f, s = clayton_dlogpdf(U, t)
        return float(np.mean(f)), float(np.mean(s))

    lo, hi = bracket
    g_lo, _ = score(lo)
    g_hi, _ = score(hi)
    if g_lo <= 0:
        raise NonConvergence(f"copula likelihood decreasing at the lower bound {lo}", grad_norm=abs(g_lo))
    if g_hi >= 0:
        raise NonConvergence(f"copula likelihood increasing at the upper bound {hi}", grad_norm=abs(g_hi))
    x = min(max(1.0, lo * 2), hi / 2)
    for _ in range(max_iter):
        g, h = score(x)
        if abs(g) <= tol:
            return x
        if g > 0:
            lo = x
        else:
            hi = x
        step = -g / h if h < 0 else np.inf
        nxt = x + step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= tol * (1 + x):
            return nxt
        x = nxt
    g, _ = score(x)
    if abs(g) > 1e-6:
        raise NonConvergence(f"copula Newton stopped with score {g:.3e}", grad_norm=abs(g))
    return x


@dataclass
class ClaytonCopulaModel:
    """PIT values ``U`` (``n x k``) from fitted GARCH margins, with the fits for redraws."""

    fits: list[GarchFit]
    U: np.ndarray = field(init=False)
    cov_beta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.fits) < 2:
            raise ValueError("need at least two margins")
        self.U = np.clip(np.column_stack([f.pit() for f in self.fits]), U_EPS, 1 - U_EPS)
        self.cov_beta = stacked_covariance(self.fits)
        self._sqrt = cholesky_sqrt(self.cov_beta)
        self.beta_hat = np.concatenate([f.params for f in self.fits])
        self._draws_key = None

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def hessian(self, theta) -> np.ndarray:
        _, second = clayton_dlogpdf(self.U, theta)
        return np.array([[-float(np.mean(second))]])

    def _valid(self, B: np.ndarray) -> np.ndarray:
        ok = np.ones(B.shape[0], dtype=bool)
        for p in range(self.k):
            ok &= is_valid(B[:, p * N_PARAMS:(p + 1) * N_PARAMS])
        return ok

    def beta_draws(self, stream: Stream, kappa: int) -> tuple[np.ndarray, dict]:
        """``kappa`` draws of the stacked GARCH parameters with constraint handling.

        Draw ``s`` uses row ``s`` of ``stream``; an invalid draw is replaced by row
        ``s`` of ``stream.child(r)`` for ``r = 1 .. 100`` and finally projected onto
        the constraint set.
        """
        B = self.beta_hat + stream.normal_rows(kappa, self.beta_hat.size) @ self._sqrt.T
        ok = self._valid(B)
        first_hits = int(np.sum(~ok))
        redraws = 0
        for s in np.flatnonzero(~ok):
            for r in range(1, MAX_REDRAWS + 1):
                cand = self.beta_hat + self._sqrt @ stream.child(r).generator(s).standard_normal(self.beta_hat.size)
                redraws += 1
                if self._valid(cand[None])[0]:
                    B[s] = cand
                    ok[s] = True
                    break
        clamped = int(np.sum(~ok))
        for s in np.flatnonzero(~ok):
            for p in range(self.k):
                sl = slice(p * N_PARAMS, (p + 1) * N_PARAMS)
                B[s, sl] = clamp_params(B[s, sl])
        diag = {
            "draws": kappa,
            "first_hit_share": first_hits / kappa,
            "redraws": redraws,
            "clamped": clamped,
            "constraint_exhausted": first_hits / kappa > EXHAUSTED_SHARE,
        }
        return B, diag

    def pit_draws(self, B: np.ndarray) -> np.ndarray:
        """PIT values for every parameter draw, shape ``(kappa, n, k)``."""
        out = np.empty((B.shape[0], self.n, self.k))
        for p, f in enumerate(self.fits):
            out[:, :, p] = f.pit_batch(B[:, p * N_PARAMS:(p + 1) * N_PARAMS])
        return np.clip(out, U_EPS, 1 - U_EPS)

    def _cached_draws(self, stream: Stream, kappa: int):
        key = (stream, kappa)
        if self._draws_key != key:
            B, diag = self.beta_draws(stream, kappa)
            U = self.pit_draws(B) if kappa * self.n * self.k <= PIT_CACHE_LIMIT else None
            self._draws = (B, diag, U)
            self._draws_key = key
        return self._draws

    def e_batch(self, stream: Stream, kappa: int, theta: float, diagnostics: dict | None = None) -> np.ndarray:
        B, diag, U = self._cached_draws(stream, kappa)
        if diagnostics is not None:
            diagnostics.update(diag)
        E = np.empty(kappa)
        chunk = max(1, 2_000_000 // (self.n * self.k))
        for a in range(0, kappa, chunk):
            Ua = U[a:a + chunk] if U is not None else self.pit_draws(B[a:a + chunk])
            first, _ = clayton_dlogpdf(Ua, theta)
            E[a:a + chunk] = first.sum(-1) / math.sqrt(self.n)
        return E[:, None]

    def parts(self, theta: float) -> InfluenceParts:
        theta = float(np.ravel(theta)[0])
        diagnostics: dict = {}
        return InfluenceParts(
            hessian=self.hessian(theta),
            cond_variance=None,
            e_draw=lambda stream, s: self.e_batch(stream, s + 1, theta)[s],
            e_batch=lambda stream, kappa: self.e_batch(stream, kappa, theta, diagnostics),
            diagnostics=diagnostics,
        )

    def copula_score_mean(self, beta: np.ndarray, theta: float) -> float:
        U = np.column_stack([f.pit(beta[p * N_PARAMS:(p + 1) * N_PARAMS]) for p, f in enumerate(self.fits)])
        first, _ = clayton_dlogpdf(np.clip(U, U_EPS, 1 - U_EPS), theta)
        return float(np.mean(first))

    def sequential_variance(self, theta: float) -> np.ndarray:
        """Variance of ``theta_hat`` accounting for the estimated margins.

        Influence of observation ``i``: ``phi_i = s_theta,i - G H^{-1} s_beta,i`` with
        ``G`` the derivative of the mean copula score in the GARCH parameters and
        ``H`` the block-diagonal GARCH Hessian; the variance is
        ``A^{-1} HAC(phi) A^{-1} / n``.
        """
        first, _ = clayton_dlogpdf(self.U, theta)
        A = self.hessian(theta)[0, 0]
        beta = self.beta_hat
        G = np.empty(beta.size)
        for j in range(beta.size):
            h = 1e-5 * (1 + abs(beta[j]))
            up, dn = beta.copy(), beta.copy()
            up[j] += h
            dn[j] -= h
            G[j] = (self.copula_score_mean(up, theta) - self.copula_score_mean(dn, theta)) / (2 * h)
        S = np.hstack([f.score_path for f in self.fits])
        H = np.zeros((beta.size, beta.size))
        for p, f in enumerate(self.fits):
            H[p * N_PARAMS:(p + 1) * N_PARAMS, p * N_PARAMS:(p + 1) * N_PARAMS] = f.hessian
        phi = first - S @ np.linalg.solve(H, G)
        omega = hac_covariance(phi[:, None])[0, 0]
        return np.array([[omega / A**2 / self.n]])


def copula_estimate(fits: list[GarchFit]) -> tuple[np.ndarray, InfluenceParts]:
    """Clayton MLE on the fitted margins and its influence parts (normal path only)."""
    model = ClaytonCopulaModel(fits)
    theta = clayton_mle(model.U)
    return np.array([theta]), model.parts(theta)
