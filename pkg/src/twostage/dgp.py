"""Data generating processes A-D of the Monte Carlo study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .rng import DATA, as_stream

TABLE_SIZES = (250, 500, 1000, 2000)
C_ALPHA = {250: 1.0, 500: 0.985, 1000: 0.945, 2000: 0.91}
D_SERIES = {250: 2, 500: 3, 1000: 5, 2000: 8}
B_MULTIPLIERS = (2, 4)

GARCH_TRUTH = np.array([0.0, 0.4, 0.05, 0.05, 0.9, 6.0])
CLAYTON_TRUTH = 4.0
BURN_IN = 500


def round_half_even(x: float) -> int:
    return int(np.rint(x))


@dataclass(frozen=True)
class DgpSpec:
    """One cell of the simulation design.

    ``multiplier`` is the instrument multiplier ``m`` of DGP B (``k = round(m sqrt(n))``),
    ``alpha`` the subsample exponent of DGP C and ``k`` the number of return series
    of DGP D.  Missing extras are filled from the tabulated design when ``n`` is
    one of the tabulated sizes.
    """

    id: str
    n: int
    multiplier: int | None = None
    alpha: float | None = None
    k: int | None = None

    def __post_init__(self):
        dgp = self.id.upper()
        object.__setattr__(self, "id", dgp)
        if dgp not in "ABCD" or len(dgp) != 1:
            raise ValueError(f"unknown DGP {self.id!r}")
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if dgp == "B":
            m = 2 if self.multiplier is None else self.multiplier
            if m not in B_MULTIPLIERS:
                raise ValueError("DGP B multiplier must be 2 or 4")
            object.__setattr__(self, "multiplier", m)
        if dgp == "C":
            a = C_ALPHA.get(self.n) if self.alpha is None else self.alpha
            if a is None or not 0 < a <= 1:
                raise ValueError("DGP C needs alpha in (0, 1]")
            object.__setattr__(self, "alpha", float(a))
        if dgp == "D":
            k = D_SERIES.get(self.n) if self.k is None else self.k
            if k is None or k < 2:
                raise ValueError("DGP D needs k >= 2 return series")
            object.__setattr__(self, "k", int(k))

    @property
    def theta0(self) -> np.ndarray:
        return {
            "A": np.array([1.0]),
            "B": np.array([1.0]),
            "C": np.array([-0.8, 2.0]),
            "D": np.array([CLAYTON_TRUTH]),
        }[self.id]

    @property
    def n_instruments(self) -> int:
        if self.id == "A":
            return 1
        if self.id == "B":
            return round_half_even(self.multiplier * np.sqrt(self.n))
        raise AttributeError("only DGPs A and B have instruments")

    @property
    def n_star(self) -> int:
        if self.id != "C":
            raise AttributeError("only DGP C has a subsample size")
        return min(self.n, round_half_even(self.n**self.alpha))

    def label(self) -> str:
        extra = {"A": "", "B": f"_m{self.multiplier}", "C": f"_a{self.alpha}", "D": f"_k{self.k}"}[self.id]
        return f"{self.id}_n{self.n}{extra}"


@dataclass
class IvData:
    y: np.ndarray
    d: np.ndarray
    Z: np.ndarray  # first-stage regressors, constant first


@dataclass
class PoissonData:
    y: np.ndarray
    z: np.ndarray
    d_obs: np.ndarray  # treatment observed for the first n_star units
    p: np.ndarray  # latent probabilities, for diagnostics only


@dataclass
class ReturnsData:
    Y: np.ndarray  # (n, k)
    U: np.ndarray  # copula draws that generated the innovations


def clayton_sample(rng: np.random.Generator, size: int, k: int, theta: float) -> np.ndarray:
    """Marshall-Olkin sampler: ``V ~ Gamma(1/theta)``, ``U_p = (1 + E_p / V)^(-1/theta)``."""
    V = rng.gamma(1.0 / theta, 1.0, size=(size, 1))
    E = rng.standard_exponential((size, k))
    return (1.0 + E / V) ** (-1.0 / theta)


def _iv(rng, n, k, relevant):
    eps = rng.uniform(-1, 1, n)
    z = rng.uniform(0, 1, n) if k == 1 else rng.uniform(0, 0.2, (n, k))
    index = z if k == 1 else 0.2 + z[:, :relevant].sum(1)
    d = (index > 0.5 * (eps + 1.2)).astype(float)
    y = d + eps
    Z = np.column_stack([np.ones(n), z])
    return IvData(y, d, Z)


def _poisson(rng, n, n_star, theta0):
    z = rng.uniform(0, 10, n)
    p = np.sin(np.pi * z) ** 2
    y = rng.poisson(np.exp(theta0[0] + theta0[1] * p)).astype(float)
    d = rng.binomial(1, p).astype(float)
    return PoissonData(y, z, d[:n_star], p)


def _returns(rng, n, k):
    phi0, phi1, b0, b1, b2, nu = GARCH_TRUTH
    T = n + BURN_IN
    U = clayton_sample(rng, T, k, CLAYTON_TRUTH)
    eps = stats.t.ppf(U, nu) * np.sqrt((nu - 2) / nu)
    Y = np.empty((T, k))
    s2 = np.full(k, b0 / (1 - b1 - b2))
    y_prev = np.zeros(k)
    e_prev = np.zeros(k)
    for t in range(T):
        s2 = b0 + b1 * e_prev**2 + b2 * s2
        e_prev = np.sqrt(s2) * eps[t]
        y_prev = phi0 + phi1 * y_prev + e_prev
        Y[t] = y_prev
    return ReturnsData(Y[BURN_IN:], U[BURN_IN:])


def generate(spec: DgpSpec, seed):
    """Draw one dataset for ``spec``; ``seed`` is an int or a :class:`~twostage.rng.Stream`."""
    rng = as_stream(seed).child(DATA).generator(0)
    if spec.id == "A":
        return _iv(rng, spec.n, 1, 1)
    if spec.id == "B":
        return _iv(rng, spec.n, spec.n_instruments, 4)
    if spec.id == "C":
        return _poisson(rng, spec.n, spec.n_star, spec.theta0)
    return _returns(rng, spec.n, spec.k)
