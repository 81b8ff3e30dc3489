"""Linear-in-means peer-effect estimators.

The outcome model is

    y_r = alpha_r + theta1 Gn_r y_r + X_r theta2 + Gn_r X_r theta3 + eps_r

with ``Gn_r`` the row-normalized adjacency of group ``r``.  The peer average
``Gn y`` is endogenous; powers ``Gn^{2+p} X`` are valid excluded instruments.

* ``ols``: least squares ignoring endogeneity.
* ``civ``: 2SLS with ``Gn^2 X`` as excluded instruments.
* ``oiv``: 2SLS with the plug-in conditional mean of ``Gn y`` as the instrument.
* ``ivmi``: 2SLS with ``Gn^2 X, ..., Gn^{2+k_max} X``; intervals from the
  simulated law of the estimator given the estimated first stage.
* ``divmi``: ``ivmi`` corrected for its first-stage bias.

Fixed effects are removed by within-group demeaning of every variable, which
gives the same slopes as group dummies.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, stats

from ..errors import NonInvertible, OutOfRange, RankDeficient, WeakInstrumentWarning
from ..inference import (PsiSample, asymptotic_variance, confidence_interval, debias, debiased_psi,
                         simulate_psi)
from ..rng import as_stream
from ..secondstage.iv import LinearIvModel, iv_estimate
from .graph import SchoolNetwork

PRUNE_TOL = 1e-10
WEAK_F = 10.0
METHODS = ("ols", "civ", "oiv", "ivmi", "divmi")


@dataclass
class Instruments:
    """Excluded instruments kept after pruning, their names and the dropped names."""

    matrix: np.ndarray
    names: list[str]
    pruned: list[str]


@dataclass
class PeerEstimate:
    """Coefficients ordered as (peer, own covariates, peer covariates[, const])."""

    method: str
    coef: np.ndarray
    cov: np.ndarray
    names: list[str]
    n_covariates: int
    ci_theta1: tuple[float, float]
    level: float = 0.95
    alpha: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def theta1(self) -> float:
        return float(self.coef[0])

    @property
    def theta2(self) -> np.ndarray:
        return self.coef[1:1 + self.n_covariates]

    @property
    def theta3(self) -> np.ndarray:
        q = self.n_covariates
        return self.coef[1 + q:1 + 2 * q]

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    @property
    def multiplier(self) -> float | None:
        """``1 / (1 - theta1)``, or ``None`` when ``|theta1| >= 1`` (no unique equilibrium)."""
        return social_multiplier(self.theta1) if abs(self.theta1) < 1 else None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "theta1": self.theta1,
            "theta1_sd": float(self.sd[0]),
            "theta1_ci": list(self.ci_theta1),
            "level": self.level,
            "multiplier": self.multiplier,
            "multiplier_defined": self.multiplier is not None,
            "coefficients": dict(zip(self.names, self.coef.tolist())),
            "sd": dict(zip(self.names, self.sd.tolist())),
            "diagnostics": self.diagnostics,
        }


def social_multiplier(est) -> float:
    """``1 / (1 - theta1)`` for a :class:`PeerEstimate` or a number."""
    t = est.theta1 if isinstance(est, PeerEstimate) else float(est)
    if not abs(t) < 1:
        raise OutOfRange(f"multiplier needs |theta1| < 1, got {t}")
    return 1.0 / (1.0 - t)


# Design construction ---------------------------------------------------------


def _per_group(net: SchoolNetwork, fn) -> np.ndarray:
    return np.concatenate([fn(g) for g in net.groups], axis=0)


def _demean(net: SchoolNetwork, M: np.ndarray) -> np.ndarray:
    idx = net.group_index
    M = np.asarray(M, dtype=float)
    counts = np.bincount(idx)
    means = np.zeros((counts.size,) + M.shape[1:])
    np.add.at(means, idx, M)
    means /= counts.reshape((-1,) + (1,) * (M.ndim - 1))
    return M - means[idx]


def instrument_blocks(net: SchoolNetwork, k_max: int) -> tuple[np.ndarray, list[str]]:
    """Unpruned ``[Gn^2 X, Gn^3 X, ..., Gn^{2+k_max} X]`` and column names."""
    if k_max < 0:
        raise ValueError("k_max must be nonnegative")

    def blocks(g):
        cur = g.Gn @ (g.Gn @ g.X)
        out = [cur]
        for _ in range(k_max):
            cur = g.Gn @ cur
            out.append(cur)
        return np.hstack(out)

    names = [f"G{2 + p}_{c}" for p in range(k_max + 1) for c in net.covariate_names]
    return _per_group(net, blocks), names


def prune_columns(M: np.ndarray, base: np.ndarray | None = None, tol: float = PRUNE_TOL) -> np.ndarray:
    """Indices of columns of ``M`` kept by a pivoted QR after partialling out ``base``.

    Column ``j`` is dropped when its pivoted ``|R_jj|`` falls below ``tol`` times
    its own norm, so zero columns and exact combinations are removed.
    """
    norms = np.linalg.norm(M, axis=0)
    R_in = M
    if base is not None and base.shape[1]:
        Q, _ = np.linalg.qr(base)
        R_in = M - Q @ (Q.T @ M)
    if M.shape[1] == 0:
        return np.arange(0)
    _, R, piv = linalg.qr(R_in, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    keep = [piv[j] for j in range(diag.size) if diag[j] > tol * max(norms[piv[j]], np.finfo(float).tiny)]
    return np.sort(np.array(keep, dtype=int))


def build_instruments(net: SchoolNetwork, k_max: int, exog: np.ndarray | None = None,
                      fixed_effects: bool = False) -> Instruments:
    """Excluded instruments ``Gn^{2+p} X`` for ``p = 0 .. k_max`` with collinear columns removed."""
    M, names = instrument_blocks(net, k_max)
    if fixed_effects:
        M = _demean(net, M)
    keep = prune_columns(M, exog)
    kept = set(keep.tolist())
    return Instruments(M[:, keep], [names[j] for j in keep], [names[j] for j in range(len(names)) if j not in kept])


@dataclass
class PeerDesignMatrices:
    y: np.ndarray
    W: np.ndarray
    names: list[str]
    n_covariates: int

    @property
    def exog(self) -> np.ndarray:
        return self.W[:, 1:]


def design_matrices(net: SchoolNetwork, fixed_effects: bool, fe_method: str = "demean") -> PeerDesignMatrices:
    """Outcome and regressors ``[Gn y, X, Gn X]`` (demeaned, with dummies, or with a constant)."""
    X = net.X
    GX = _per_group(net, lambda g: g.Gn @ g.X)
    Gy = _per_group(net, lambda g: g.Gn @ g.y)
    y = net.y
    names = ["peer", *net.covariate_names, *(f"peer_{c}" for c in net.covariate_names)]
    W = np.column_stack([Gy, X, GX])
    if fixed_effects and fe_method == "demean":
        y, W = _demean(net, y), _demean(net, W)
    elif fixed_effects and fe_method == "dummies":
        D = np.eye(len(net.groups))[net.group_index]
        W = np.column_stack([W, D])
        names += [f"fe_{g.group_id}" for g in net.groups]
    elif fixed_effects:
        raise ValueError(f"unknown fixed-effect method {fe_method!r}")
    else:
        W = np.column_stack([W, np.ones(net.n)])
        names.append("const")
    return PeerDesignMatrices(y, W, names, net.n_covariates)


# Estimation ------------------------------------------------------------------


def _tsls(y, W, Z):
    """2SLS with HC0 covariance, computed through an orthonormal basis of ``Z``."""
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise RankDeficient("instrument matrix is rank deficient", Z.shape[1] - np.linalg.matrix_rank(Z))
    Q, _ = np.linalg.qr(Z)
    Wh = Q @ (Q.T @ W)
    sv = np.linalg.svd(Wh, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-12:
        raise RankDeficient("projected regressors are collinear", int(np.sum(sv <= sv[0] * 1e-12)))
    coef = np.linalg.lstsq(Wh, y, rcond=None)[0]
    resid = y - W @ coef
    bread = np.linalg.inv(Wh.T @ Wh)
    S = Wh * resid[:, None]
    cov = bread @ (S.T @ S) @ bread
    return coef, 0.5 * (cov + cov.T), resid


def first_stage_f(endog: np.ndarray, exog: np.ndarray, excluded: np.ndarray) -> float:
    """Homoskedastic F statistic of the excluded instruments in the first stage."""
    def rss(M):
        b = np.linalg.lstsq(M, endog, rcond=None)[0]
        r = endog - M @ b
        return float(r @ r)

    n = endog.size
    full = np.column_stack([exog, excluded])
    q = excluded.shape[1]
    rss_u = rss(full)
    rss_r = rss(exog) if exog.shape[1] else float(endog @ endog)
    return ((rss_r - rss_u) / q) / (rss_u / (n - full.shape[1]))


def _normal_ci(coef, cov, level):
    z = stats.norm.ppf(0.5 + level / 2)
    sd = math.sqrt(max(cov[0, 0], 0.0))
    return (float(coef[0] - z * sd), float(coef[0] + z * sd))


def _base_diagnostics(net, fixed_effects):
    return {"n": net.n, "groups": len(net.groups), "isolates": net.isolates, "fixed_effects": fixed_effects}


def ols_estimate(net: SchoolNetwork, fixed_effects: bool = True, level: float = 0.95) -> PeerEstimate:
    d = design_matrices(net, fixed_effects)
    coef, cov, _ = _tsls(d.y, d.W, d.W)
    return PeerEstimate("ols", coef, cov, d.names, d.n_covariates, _normal_ci(coef, cov, level), level,
                        diagnostics=_base_diagnostics(net, fixed_effects))


def _iv_with(net, d: PeerDesignMatrices, excluded: np.ndarray, method: str, level: float, diag: dict) -> PeerEstimate:
    Z = np.column_stack([d.exog, excluded])
    coef, cov, _ = _tsls(d.y, d.W, Z)
    F = first_stage_f(d.W[:, 0], d.exog, excluded)
    diag = {**diag, "first_stage_F": F, "excluded_instruments": int(excluded.shape[1])}
    if F < WEAK_F:
        warnings.warn(f"{method}: first-stage F = {F:.2f} suggests weak instruments", WeakInstrumentWarning,
                      stacklevel=3)
    return PeerEstimate(method, coef, cov, d.names, d.n_covariates, _normal_ci(coef, cov, level), level,
                        diagnostics=diag)


def civ_estimate(net: SchoolNetwork, fixed_effects: bool = True, level: float = 0.95,
                 fe_method: str = "demean") -> PeerEstimate:
    """2SLS of ``y`` on ``(Gn y, X, Gn X)`` instrumenting ``Gn y`` with ``Gn^2 X``."""
    d = design_matrices(net, fixed_effects, fe_method)
    inst = build_instruments(net, 0, d.exog, fixed_effects and fe_method == "demean")
    diag = {**_base_diagnostics(net, fixed_effects), "pruned_instruments": inst.pruned}
    return _iv_with(net, d, inst.matrix, "civ", level, diag)


def group_effects(net: SchoolNetwork, est: PeerEstimate) -> np.ndarray:
    """Group intercepts implied by slope estimates: group means of the structural residual."""
    q = net.n_covariates
    t1, t2, t3 = est.theta1, est.coef[1:1 + q], est.coef[1 + q:1 + 2 * q]
    out = []
    for g in net.groups:
        r = g.y - t1 * g.Gn @ g.y - g.X @ t2 - g.Gn @ g.X @ t3
        out.append(r.mean())
    return np.array(out)


def optimal_instrument(net: SchoolNetwork, theta1: float, theta2, theta3, alpha) -> np.ndarray:
    """``Gn (I - theta1 Gn)^{-1} (alpha_r 1 + X theta2 + Gn X theta3)`` stacked over groups."""
    if not abs(theta1) < 1:
        raise NonInvertible(f"|theta1| = {abs(theta1):.3f} >= 1: the reduced form is not defined")
    out = []
    for r, g in enumerate(net.groups):
        rhs = alpha[r] + g.X @ theta2 + g.Gn @ g.X @ theta3
        out.append(g.Gn @ np.linalg.solve(np.eye(g.size) - theta1 * g.Gn, rhs))
    return np.concatenate(out)


def oiv_estimate(net: SchoolNetwork, civ: PeerEstimate, fixed_effects: bool = True,
                 level: float = 0.95) -> PeerEstimate:
    """2SLS with the conditional mean of ``Gn y`` evaluated at the ``civ`` estimates."""
    if not abs(civ.theta1) < 1:
        raise NonInvertible(f"|theta1| = {abs(civ.theta1):.3f} >= 1: the reduced form is not defined")
    alpha = group_effects(net, civ)
    inst = optimal_instrument(net, civ.theta1, civ.theta2, civ.theta3, alpha)[:, None]
    d = design_matrices(net, fixed_effects)
    if fixed_effects:
        inst = _demean(net, inst)
    est = _iv_with(net, d, inst, "oiv", level, _base_diagnostics(net, fixed_effects))
    est.alpha = alpha
    return est


@dataclass
class IvmiResult:
    """Classical many-instrument estimate, its simulated law and the debiased estimate."""

    ivmi: PeerEstimate
    psi: PsiSample
    divmi: PeerEstimate
    psi_star: PsiSample


def ivmi_estimate(net: SchoolNetwork, k_max: int = 9, fixed_effects: bool = True, kappa: int = 1000,
                  seed=0, level: float = 0.95, mode: str = "mean", intervals: bool = True) -> IvmiResult:
    """Many-instrument 2SLS with simulated intervals and its debiased version.

    The first stage regresses ``y`` and ``Gn y`` jointly on the exogenous
    regressors and the pruned instruments; the second stage regresses the
    fitted outcome on the fitted regressors.  ``intervals=False`` skips the
    simulated laws (point estimates only), which is what Monte Carlo loops need.
    """
    d = design_matrices(net, fixed_effects)
    inst = build_instruments(net, k_max, d.exog, fixed_effects)
    Z = np.column_stack([d.exog, inst.matrix])
    model = LinearIvModel(d.y, d.W, Z, endog_idx=(0,))
    theta, parts = iv_estimate(model)
    stream = as_stream(seed)
    n = net.n
    theta_star = debias(theta, parts, n, kappa, stream, mode)
    diag = {**_base_diagnostics(net, fixed_effects), "k_max": k_max, "excluded_instruments": len(inst.names),
            "pruned_instruments": inst.pruned, "kappa": kappa, "debias_mode": mode,
            "first_stage_F": first_stage_f(d.W[:, 0], d.exog, inst.matrix)}
    nan = (float("nan"), float("nan"))
    if intervals:
        psi = simulate_psi(parts, n, kappa, stream, theta_hat=theta)
        lo, hi = confidence_interval(theta, psi, level)
        cov = asymptotic_variance(parts, n, kappa, stream)
        parts_star = model.parts(theta_star)
        psi_star = debiased_psi(parts_star, n, kappa, stream, theta_star=theta_star, mode=mode)
        lo_s, hi_s = confidence_interval(theta_star, psi_star, level)
        cov_star = asymptotic_variance(parts_star, n, kappa, stream)
        ci, ci_star = (float(lo[0]), float(hi[0])), (float(lo_s[0]), float(hi_s[0]))
    else:
        psi = psi_star = None
        cov = cov_star = np.full((theta.size, theta.size), np.nan)
        ci = ci_star = nan
    q = d.n_covariates
    ivmi = PeerEstimate("ivmi", theta, cov, d.names, q, ci, level, diagnostics=diag)
    divmi = PeerEstimate("divmi", theta_star, cov_star, d.names, q, ci_star, level, diagnostics=dict(diag))
    return IvmiResult(ivmi, psi, divmi, psi_star)


def estimate(net: SchoolNetwork, methods=METHODS, k_max: int = 9, fixed_effects: bool = True,
             kappa: int = 1000, seed=0, level: float = 0.95, mode: str = "mean") -> dict[str, PeerEstimate]:
    """Run the requested methods; ``oiv`` reuses ``civ`` and ``divmi`` reuses ``ivmi``."""
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    out: dict[str, PeerEstimate] = {}
    if "ols" in methods:
        out["ols"] = ols_estimate(net, fixed_effects, level)
    if "civ" in methods or "oiv" in methods:
        civ = civ_estimate(net, fixed_effects, level)
        if "civ" in methods:
            out["civ"] = civ
        if "oiv" in methods:
            out["oiv"] = oiv_estimate(net, civ, fixed_effects, level)
    if "ivmi" in methods or "divmi" in methods:
        res = ivmi_estimate(net, k_max, fixed_effects, kappa, seed, level, mode)
        if "ivmi" in methods:
            out["ivmi"] = res.ivmi
        if "divmi" in methods:
            out["divmi"] = res.divmi
    return {m: out[m] for m in METHODS if m in out}


# Reports ---------------------------------------------------------------------


def write_peer_json(path, estimates: dict[str, PeerEstimate]) -> None:
    with open(path, "w") as fh:
        json.dump({m: e.to_dict() for m, e in estimates.items()}, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_coef_table(path, estimates: dict[str, PeerEstimate]) -> None:
    """One row per coefficient, an estimate and a standard-error column per method."""
    methods = list(estimates)
    names: list[str] = []
    for e in estimates.values():
        names.extend(n for n in e.names if n not in names)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["term", *(f"{m}_{s}" for m in methods for s in ("est", "sd"))])
        for name in names:
            row = [name]
            for m in methods:
                e = estimates[m]
                if name in e.names:
                    j = e.names.index(name)
                    row += [repr(float(e.coef[j])), repr(float(e.sd[j]))]
                else:
                    row += ["", ""]
            w.writerow(row)
        w.writerow(["multiplier", *(v for m in methods for v in (
            "" if estimates[m].multiplier is None else repr(estimates[m].multiplier), ""))])


def peer_monte_carlo(net: SchoolNetwork, design, reps: int, k_max: int = 9, fixed_effects: bool = True,
                     kappa: int = 1000, seed=0, mode: str = "mean") -> dict[str, np.ndarray]:
    """Redraw outcomes on a fixed network and collect ``theta1`` from CIV, IV-MI and DIV-MI.

    Replication ``r`` draws its shocks from ``seed`` / ``r`` and uses the same
    stream for the first-stage draws, so results do not depend on run order.
    """
    from .graph import simulate_outcome

    root = as_stream(seed).child("peer")
    out = {"civ": np.empty(reps), "ivmi": np.empty(reps), "divmi": np.empty(reps)}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakInstrumentWarning)
        for r in range(reps):
            stream = root.child(r)
            nr = net.with_outcome(simulate_outcome(net, design, stream.generator(0)))
            out["civ"][r] = civ_estimate(nr, fixed_effects).theta1
            res = ivmi_estimate(nr, k_max, fixed_effects, kappa, stream, mode=mode, intervals=False)
            out["ivmi"][r] = res.ivmi.theta1
            out["divmi"][r] = res.divmi.theta1
    return out
