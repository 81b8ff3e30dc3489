"""Linear IV second stage: regress the projected outcome on the projected regressors.

With ``y_hat = Z gamma_y`` and ``X_hat = Z Gamma_x`` from first-stage OLS fits,
the second stage maximizes ``-(1/n) sum (y_hat_i - X_hat_i theta)^2``.  Given the
first stage the influence function is nonstochastic, so ``V = 0`` and

    A = (2/n) X_hat' X_hat
    E_s = (2/sqrt(n)) sum X_bar_i^s (y_bar_i^s - X_bar_i^s theta)

where ``(y_bar^s, X_bar^s)`` are predictions at a redrawn first stage.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import RankDeficient, WeakInstrumentWarning
from ..firststage.ols import FirstStageFit, draw_fs, draw_fs_batch, joint_ols_fit
from ..inference import InfluenceParts
from ..rng import Stream

WEAK_TOL = 1e-8


@dataclass
class LinearIvModel:
    """Outcome ``y``, regressors ``X`` (``n x k``) and instruments ``Z`` (``n x p``).

    Columns of ``X`` listed in ``endog_idx`` are replaced by their projection on
    ``Z``; the others enter as observed.  The outcome is always projected.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    endog_idx: tuple[int, ...] | None = None
    fit: FirstStageFit = field(init=False, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        self.X = X[:, None] if X.ndim == 1 else X
        Z = np.asarray(self.Z, dtype=float)
        self.Z = Z[:, None] if Z.ndim == 1 else Z
        n = self.y.size
        if self.X.shape[0] != n or self.Z.shape[0] != n:
            raise ValueError("y, X and Z must have the same number of rows")
        k = self.X.shape[1]
        self.endog_idx = tuple(range(k)) if self.endog_idx is None else tuple(int(j) for j in self.endog_idx)
        if len(self.endog_idx) > self.Z.shape[1]:
            raise RankDeficient("fewer instruments than endogenous regressors",
                                len(self.endog_idx) - self.Z.shape[1])
        self.fit = joint_ols_fit(self.Z, self.y, *[self.X[:, j] for j in self.endog_idx])
        self._ZtZ = self.Z.T @ self.Z
        self._draws_key = None

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def predictions(self, gamma=None) -> tuple[np.ndarray, np.ndarray]:
        """``(y_hat, X_hat)`` at first-stage coefficients ``gamma`` (the estimate by default)."""
        P = self.Z @ self.fit.coefficients(gamma)
        Xh = self.X.copy()
        Xh[:, list(self.endog_idx)] = P[:, 1:]
        return P[:, 0], Xh

    @property
    def y_hat(self) -> np.ndarray:
        return self.predictions()[0]

    @property
    def X_hat(self) -> np.ndarray:
        return self.predictions()[1]

    def hessian(self) -> np.ndarray:
        Xh = self.X_hat
        return 2.0 * Xh.T @ Xh / self.n

    def e_value(self, gamma, theta) -> np.ndarray:
        yb, Xb = self.predictions(gamma)
        return 2.0 / math.sqrt(self.n) * Xb.T @ (yb - Xb @ theta)

    def fs_draws(self, stream: Stream, kappa: int) -> np.ndarray:
        """First-stage draws, cached for the last stream so several ``theta`` reuse them."""
        key = (stream, kappa)
        if self._draws_key != key:
            self._draws = draw_fs_batch(self.fit, stream, kappa)
            self._draws_key = key
        return self._draws

    def e_batch(self, stream: Stream, kappa: int, theta) -> np.ndarray:
        # all sums over i are quadratic forms in Z'Z, Z'X_exo and X_exo'X_exo
        G = self.fs_draws(stream, kappa)
        p = self.Z.shape[1]
        endog = list(self.endog_idx)
        exo = [j for j in range(self.k) if j not in self.endog_idx]
        Gx = {j: G[:, (e + 1) * p:(e + 2) * p] for e, j in enumerate(endog)}
        rg = G[:, :p] - sum(theta[j] * Gx[j] for j in endog)
        x_exo = self.X[:, exo] @ theta[exo] if exo else np.zeros(self.n)
        c = self.Z.T @ x_exo
        Mr = rg @ self._ZtZ - c
        out = np.empty((kappa, self.k))
        for j in endog:
            out[:, j] = np.einsum("ij,ij->i", Gx[j], Mr)
        for j in exo:
            out[:, j] = rg @ (self.Z.T @ self.X[:, j]) - self.X[:, j] @ x_exo
        return 2.0 / math.sqrt(self.n) * out

    def parts(self, theta) -> InfluenceParts:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return InfluenceParts(
            hessian=self.hessian(),
            cond_variance=np.zeros((self.k, self.k)),
            e_draw=lambda stream, s: self.e_value(draw_fs(self.fit, stream, s), theta),
            e_batch=lambda stream, kappa: self.e_batch(stream, kappa, theta),
        )


def iv_estimate(model: LinearIvModel) -> tuple[np.ndarray, InfluenceParts]:
    """OLS of ``y_hat`` on ``X_hat`` and the matching influence parts."""
    Xh, yh = model.X_hat, model.y_hat
    G = Xh.T @ Xh / model.n
    sv = np.linalg.svd(G, compute_uv=False)
    if sv[-1] < WEAK_TOL:
        warnings.warn(f"projected design is nearly singular (min singular value {sv[-1]:.2e})",
                      WeakInstrumentWarning, stacklevel=2)
    if sv[-1] <= sv[0] * 1e-13:
        raise RankDeficient("projected regressors are collinear", int(np.sum(sv <= sv[0] * 1e-13)))
    theta = np.linalg.solve(Xh.T @ Xh, Xh.T @ yh)
    return theta, model.parts(theta)
