"""Poisson regression on a generated regressor ``p_hat = h(z, gamma_hat)``.

The second stage maximizes ``(1/n) sum (y_i b_i'theta - exp(b_i'theta))`` with
``b_i = (1, p_hat_i)``.  Influence parts:

    A = V = (1/n) sum exp(b_i'theta) b_i b_i'
    E_s = (1/sqrt(n)) sum (exp(b_i'theta) - exp(b_i^s'theta)) b_i^s

where ``b_i^s`` uses a redrawn first stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, NonConvergence
from ..firststage.ols import FirstStageFit, check_rank, draw_fs, draw_fs_batch
from ..inference import InfluenceParts
from ..rng import Stream

EXP_CLIP = 50.0
PROB_EPS = 1e-10


def _design(p: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(p.size), p])


@dataclass
class PoissonPluginModel:
    """Counts ``y`` with latent regressor predicted from ``z`` by a first-stage fit.

    ``clamp=True`` keeps predicted probabilities in ``[1e-10, 1 - 1e-10]``.  It is
    off by default: the linear index needs no domain guard, and truncating the
    first-stage noise at the bounds removes most of the bias being studied.
    """

    y: np.ndarray
    z: np.ndarray
    fs: FirstStageFit
    clamp: bool = False
    beta_hat_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.z = np.asarray(self.z, dtype=float).ravel()
        if self.y.size != self.z.size:
            raise ValueError("y and z must have the same length")
        if np.any(self.y < 0) or np.any(self.y != np.round(self.y)):
            raise DomainError("Poisson outcomes must be nonnegative integers")
        self._basis = self._features(self.z)
        self.beta_hat_rows = _design(self._prob(self._basis @ self.fs.gamma_hat))
        self._draws_key = None

    def _features(self, z):
        basis = getattr(self.fs, "basis", None)
        if basis is not None:
            return basis(z)
        # linear first stage: column j is the prediction at the j-th unit vector
        return np.column_stack([self.fs.predict(z, e) for e in np.eye(self.fs.dim)])

    def _prob(self, p):
        return np.clip(p, PROB_EPS, 1 - PROB_EPS) if self.clamp else p

    @property
    def n(self) -> int:
        return self.y.size

    def hessian(self, theta) -> np.ndarray:
        B = self.beta_hat_rows
        mu = np.exp(np.minimum(B @ theta, EXP_CLIP))
        return (B * mu[:, None]).T @ B / self.n

    def e_value(self, gamma, theta) -> np.ndarray:
        B = self.beta_hat_rows
        Bs = _design(self._prob(self._basis @ gamma))
        diff = np.exp(np.minimum(B @ theta, EXP_CLIP)) - np.exp(np.minimum(Bs @ theta, EXP_CLIP))
        return Bs.T @ diff / math.sqrt(self.n)

    def prob_draws(self, stream: Stream, kappa: int) -> np.ndarray:
        """Predicted probabilities at redrawn first stages, ``(n, kappa)``, cached per stream."""
        key = (stream, kappa)
        if self._draws_key != key:
            G = draw_fs_batch(self.fs, stream, kappa)
            self._draws = self._prob(self._basis @ G.T)
            self._draws_key = key
        return self._draws

    def e_batch(self, stream: Stream, kappa: int, theta) -> np.ndarray:
        P = self.prob_draws(stream, kappa)
        mu = np.exp(np.minimum(self.beta_hat_rows @ theta, EXP_CLIP))
        diff = mu[:, None] - np.exp(np.minimum(theta[0] + theta[1] * P, EXP_CLIP))
        return np.column_stack([diff.sum(0), (diff * P).sum(0)]) / math.sqrt(self.n)

    def parts(self, theta) -> InfluenceParts:
        theta = np.asarray(theta, dtype=float)
        H = self.hessian(theta)
        return InfluenceParts(
            hessian=H,
            cond_variance=H,
            e_draw=lambda stream, s: self.e_value(draw_fs(self.fs, stream, s), theta),
            e_batch=lambda stream, kappa: self.e_batch(stream, kappa, theta),
        )


def poisson_newton(y, B, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Maximize ``(1/n) sum (y b'theta - exp(b'theta))`` by Newton with step halving."""
    n = y.size
    check_rank(B, "Poisson design")

    def objective(t):
        eta = B @ t
        return float(np.mean(y * eta - np.exp(np.minimum(eta, EXP_CLIP))))

    theta = np.zeros(B.shape[1])
    theta[0] = math.log(max(y.mean(), 1e-8))
    f = objective(theta)
    for _ in range(max_iter):
        mu = np.exp(np.minimum(B @ theta, EXP_CLIP))
        grad = B.T @ (y - mu) / n
        if np.linalg.norm(grad) <= tol:
            break
        H = (B * mu[:, None]).T @ B / n
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            cand = theta + t * step
            fc = objective(cand)
            if fc >= f or t < 1e-12:
                break
            t *= 0.5
        theta, f = cand, fc
    mu = np.exp(np.minimum(B @ theta, EXP_CLIP))
    gnorm = float(np.linalg.norm(B.T @ (y - mu) / n))
    if gnorm > max(tol, 1e-8):
        raise NonConvergence(f"Poisson Newton stopped with gradient norm {gnorm:.3e}", grad_norm=gnorm)
    if np.any(B @ theta >= EXP_CLIP):
        raise NonConvergence("linear index hits the exp overflow guard at the optimum", grad_norm=gnorm)
    return theta


def poisson_estimate(y, fs: FirstStageFit, z, clamp: bool = False) -> tuple[np.ndarray, InfluenceParts]:
    model = PoissonPluginModel(y, z, fs, clamp=clamp)
    theta = poisson_newton(model.y, model.beta_hat_rows)
    return theta, model.parts(theta)


def poisson_model_estimate(model: PoissonPluginModel) -> tuple[np.ndarray, InfluenceParts]:
    theta = poisson_newton(model.y, model.beta_hat_rows)
    return theta, model.parts(theta)
