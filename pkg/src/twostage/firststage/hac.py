"""HAC long-run covariance with the quadratic spectral kernel."""

from __future__ import annotations

import numpy as np
from scipy import fft


def qs_kernel(x) -> np.ndarray:
    """Quadratic spectral kernel, ``k(0) = 1``."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    a = 6 * np.pi * x[nz] / 5
    out[nz] = 25 / (12 * np.pi**2 * x[nz] ** 2) * (np.sin(a) / a - np.cos(a))
    return out


def default_bandwidth(n: int) -> float:
    return 0.75 * n ** (1 / 3)


def autocovariances(scores: np.ndarray) -> np.ndarray:
    """``Gamma_j = (1/n) sum_{i>j} s_i s_{i-j}'`` for ``j = 0 .. n-1``, shape ``(n, p, p)``."""
    n, p = scores.shape
    m = fft.next_fast_len(2 * n)
    F = fft.rfft(scores, m, axis=0)
    cross = fft.irfft(F[:, :, None] * np.conj(F[:, None, :]), m, axis=0)[:n]
    return cross / n


def hac_covariance(scores, bandwidth: float | None = None, demean: bool = False) -> np.ndarray:
    """Long-run covariance of ``(1/sqrt(n)) sum_i s_i`` with QS weights ``k(j / b)``.

    ``b`` defaults to ``(3/4) n^{1/3}``; ``bandwidth=0`` gives the outer-product
    covariance ``(1/n) sum s_i s_i'``.  The result is symmetrized and negative
    eigenvalues are clipped to zero.
    """
    S = np.asarray(scores, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    n, p = S.shape
    if n < 2:
        raise ValueError("need at least two score observations")
    if demean:
        S = S - S.mean(axis=0)
    b = default_bandwidth(n) if bandwidth is None else float(bandwidth)
    if b <= 0:
        return S.T @ S / n
    gam = autocovariances(S)
    w = qs_kernel(np.arange(1, n) / b)
    lagged = np.tensordot(w, gam[1:], axes=1)
    V = gam[0] + lagged + lagged.T
    V = 0.5 * (V + V.T)
    vals, vecs = np.linalg.eigh(V)
    if vals[0] < 0:
        V = (vecs * np.clip(vals, 0, None)) @ vecs.T
    return V
