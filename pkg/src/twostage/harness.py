"""Monte Carlo driver for DGPs A-D and the evaluation artifacts.

Every replication draws its data and its simulation noise from its own
sub-stream, so results are identical whatever the number of workers.
Replications are collected and sorted by index before any aggregation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .dgp import DgpSpec, generate
from .errors import LevelMismatch, ReplicationBudgetExceeded, TwoStageError
from .firststage.garch import ar_garch_fit
from .firststage.spline import spline_gam_fit
from .inference import (
    DEFAULT_KAPPA,
    EmpiricalCDF,
    InfluenceParts,
    asymptotic_variance,
    bias_shift,
    cdf_l1_distance,
    confidence_interval,
    debiased_psi,
    normal_path_psi,
    one_sided_bounds,
    simulate_psi,
)
from .rng import Stream, as_stream
from .secondstage.copula import ClaytonCopulaModel, clayton_mle
from .secondstage.iv import LinearIvModel, iv_estimate
from .secondstage.poisson import PoissonPluginModel, poisson_model_estimate

log = logging.getLogger(__name__)

SPLINE_KNOTS = np.arange(0, 10.0 + 1e-9, 0.5)
GRID_SIZE = 512
MAX_FAILURE_SHARE = 0.01
METHODS = ("nor", "sim", "dsim_mean", "dsim_median")
ESTIMATORS = ("classical", "debiased_mean", "debiased_median")


@dataclass
class ModelFit:
    """Second-stage estimate with everything the inference step needs.

    ``normal_variance`` is set for models without a tractable conditional
    variance; inference then follows the normal path.
    """

    theta_hat: np.ndarray
    parts: InfluenceParts
    n: int
    rebuild: Callable[[np.ndarray], InfluenceParts]
    normal_variance: np.ndarray | None = None


def fit_model(spec: DgpSpec, data, first_stage_noise: bool = True) -> ModelFit:
    """First and second stage for one dataset drawn from ``spec``."""
    if spec.id in ("A", "B"):
        model = LinearIvModel(data.y, data.d, data.Z)
        if not first_stage_noise:
            _silence(model.fit)
        theta, parts = iv_estimate(model)
        return ModelFit(theta, parts, model.n, model.parts)
    if spec.id == "C":
        fs = spline_gam_fit(data.z[: data.d_obs.size], data.d_obs, SPLINE_KNOTS)
        if not first_stage_noise:
            _silence(fs)
        model = PoissonPluginModel(data.y, data.z, fs)
        theta, parts = poisson_model_estimate(model)
        return ModelFit(theta, parts, model.n, model.parts)
    # boundary optima are kept and counted; their draws are what the redraw logic handles
    fits = [ar_garch_fit(data.Y[:, p], on_boundary="flag") for p in range(data.Y.shape[1])]
    model = ClaytonCopulaModel(fits)
    if not first_stage_noise:
        model._sqrt = np.zeros_like(model._sqrt)
    theta = clayton_mle(model.U)
    parts = model.parts(theta)
    parts.diagnostics["boundary_fits"] = sum(f.at_boundary for f in fits)
    return ModelFit(np.array([theta]), parts, model.n, model.parts,
                    normal_variance=model.sequential_variance(theta))


def _silence(fit) -> None:
    fit.cov_gamma = np.zeros_like(fit.cov_gamma)
    fit._sqrt = None


@dataclass
class Replication:
    rep: int
    theta_hat: np.ndarray
    theta_star: dict[str, np.ndarray]
    variance: np.ndarray  # asymptotic variance of theta_hat
    bounds: dict[str, dict[str, np.ndarray]]  # method -> {lo, hi, lower, upper}
    psi: np.ndarray  # sorted simulated sample of sqrt(n)(theta_hat - theta0), (kappa, K)
    psi_star: np.ndarray  # sorted centered sample for the mean-debiased estimate
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "psi_mean": self.psi.mean(0).tolist(),
            "psi_sd": self.psi.std(0, ddof=1).tolist(),
        }


def run_replication(spec: DgpSpec, rep: int, root: Stream, kappa: int, level: float,
                    first_stage_noise: bool = True) -> Replication:
    stream = root.child(rep)
    data = generate(spec, stream)
    mf = fit_model(spec, data, first_stage_noise)
    n, parts, theta = mf.n, mf.parts, mf.theta_hat
    shifts = {m: bias_shift(parts, kappa, stream, m) for m in ("mean", "median")}
    star = {m: theta - shifts[m] / math.sqrt(n) for m in ("mean", "median")}
    if mf.normal_variance is None:
        var = asymptotic_variance(parts, n, kappa, stream)
        psi = simulate_psi(parts, n, kappa, stream, theta_hat=theta)
        psi_star = {m: debiased_psi(mf.rebuild(star[m]), n, kappa, stream, star[m], m) for m in ("mean", "median")}
    else:
        var = mf.normal_variance
        psi = normal_path_psi(parts, n, kappa, stream, var, theta)
        psi_star = {m: normal_path_psi(parts, n, kappa, stream, var, star[m], centered=True) for m in ("mean", "median")}
    bounds = {"nor": _normal_bounds(theta, var, level), "sim": _sim_bounds(theta, psi, level)}
    for m in ("mean", "median"):
        bounds[f"dsim_{m}"] = _sim_bounds(star[m], psi_star[m], level)
    return Replication(
        rep=rep,
        theta_hat=theta,
        theta_star={"debiased_mean": star["mean"], "debiased_median": star["median"]},
        variance=var,
        bounds=bounds,
        psi=np.sort(psi.draws, axis=0),
        psi_star=np.sort(psi_star["mean"].draws, axis=0),
        diagnostics=dict(parts.diagnostics),
    )


def _normal_bounds(theta, var, level):
    sd = np.sqrt(np.clip(np.diag(var), 0, None))
    z2 = stats.norm.ppf(0.5 + level / 2)
    z1 = stats.norm.ppf(level)
    return {"lo": theta - z2 * sd, "hi": theta + z2 * sd, "lower": theta + z1 * sd, "upper": theta - z1 * sd}


def _sim_bounds(theta, psi, level):
    lo, hi = confidence_interval(theta, psi, level)
    t_low, t_high = one_sided_bounds(psi, level)
    # "lower" one-sided interval (-inf, T_level]; "upper" one-sided [T_{1-level}, inf)
    return {"lo": lo, "hi": hi, "lower": t_high, "upper": t_low}


@dataclass
class McResult:
    spec: DgpSpec
    reps: int
    kappa: int
    seed: int
    level: float
    replications: list[Replication]
    failures: list[dict]
    aggregates: dict
    coverage_rates: dict
    cdf: list[dict]
    wasserstein: list[dict]
    diagnostics: dict
    elapsed: float = 0.0

    @property
    def theta0(self) -> np.ndarray:
        return self.spec.theta0

    def estimates(self, which: str = "classical") -> np.ndarray:
        if which == "classical":
            return np.array([r.theta_hat for r in self.replications])
        return np.array([r.theta_star[which] for r in self.replications])

    def to_dict(self, timing: bool = True) -> dict:
        """JSON-ready aggregates; ``timing=False`` leaves out the wall-clock time."""
        out = {
            "spec": {"id": self.spec.id, "n": self.spec.n, "multiplier": self.spec.multiplier,
                     "alpha": self.spec.alpha, "k": self.spec.k, "theta0": self.theta0.tolist()},
            "reps": self.reps,
            "completed": len(self.replications),
            "kappa": self.kappa,
            "seed": self.seed,
            "level": self.level,
            "failures": self.failures,
            "aggregates": self.aggregates,
            "coverage": self.coverage_rates,
            "wasserstein": self.wasserstein,
            "diagnostics": self.diagnostics,
        }
        if timing:
            out["elapsed_seconds"] = round(self.elapsed, 3)
        return out


def summarize(est: np.ndarray, theta0: np.ndarray) -> dict:
    """Mean, bias, sd (divisor m, so RMSE^2 = bias^2 + sd^2), RMSE and MAE per coordinate."""
    err = est - theta0
    return {
        "mean": est.mean(0).tolist(),
        "bias": err.mean(0).tolist(),
        "sd": est.std(0).tolist(),
        "rmse": np.sqrt((err**2).mean(0)).tolist(),
        "mae": np.abs(err).mean(0).tolist(),
    }


def _coverage_table(reps: list[Replication], theta0: np.ndarray) -> dict:
    out = {}
    for m in METHODS:
        b = {k: np.array([r.bounds[m][k] for r in reps]) for k in ("lo", "hi", "lower", "upper")}
        out[m] = {
            "two_sided": ((b["lo"] <= theta0) & (theta0 <= b["hi"])).mean(0).tolist(),
            "lower": (theta0 <= b["lower"]).mean(0).tolist(),
            "upper": (theta0 >= b["upper"]).mean(0).tolist(),
        }
    return out


def _cdf_curves(reps: list[Replication], theta0: np.ndarray, n: int, grid_size: int) -> tuple[list, list]:
    f0 = math.sqrt(n) * (np.array([r.theta_hat for r in reps]) - theta0)
    f0s = math.sqrt(n) * (np.array([r.theta_star["debiased_mean"] for r in reps]) - theta0)
    var = np.array([np.diag(r.variance) for r in reps]) * n
    curves, dists = [], []
    for j in range(theta0.size):
        pooled = np.r_[f0[:, j], f0s[:, j]]
        lo, hi = pooled.min(), pooled.max()
        pad = 0.05 * (hi - lo if hi > lo else 1.0)
        grid = np.linspace(lo - pad, hi + pad, grid_size)
        F0 = EmpiricalCDF(f0[:, j])(grid)
        F0s = EmpiricalCDF(f0s[:, j])(grid)
        sd = np.sqrt(np.clip(var[:, j], 0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            H = np.where(sd[:, None] > 0, stats.norm.cdf(grid[None, :] / sd[:, None]), (grid[None, :] >= 0) * 1.0)
        Hn = H.mean(0)
        Fn = np.mean([np.searchsorted(r.psi[:, j], grid, side="right") / r.psi.shape[0] for r in reps], axis=0)
        Fns = np.mean([np.searchsorted(r.psi_star[:, j], grid, side="right") / r.psi_star.shape[0] for r in reps], axis=0)
        curves.append({"t": grid, "F0": F0, "Hn": Hn, "Fn": Fn, "F0_star": F0s, "Fn_star": Fns})
        dists.append({
            "Fn_F0": cdf_l1_distance(grid, Fn, F0),
            "Hn_F0": cdf_l1_distance(grid, Hn, F0),
            "Fn_star_F0_star": cdf_l1_distance(grid, Fns, F0s),
            "Hn_F0_star": cdf_l1_distance(grid, Hn, F0s),
        })
    return curves, dists


def _diagnostic_summary(reps: list[Replication]) -> dict:
    flags = [r.diagnostics.get("constraint_exhausted") for r in reps if "constraint_exhausted" in r.diagnostics]
    if not flags:
        return {}
    return {
        "constraint_exhausted_reps": int(sum(flags)),
        "mean_first_hit_share": float(np.mean([r.diagnostics["first_hit_share"] for r in reps])),
        "clamped_draws": int(sum(r.diagnostics.get("clamped", 0) for r in reps)),
        "reps_with_boundary_fit": int(sum(r.diagnostics.get("boundary_fits", 0) > 0 for r in reps)),
    }


def _one(args):
    spec, rep, root, kappa, level, noise = args
    try:
        return run_replication(spec, rep, root, kappa, level, noise)
    except (TwoStageError, np.linalg.LinAlgError) as exc:
        code = getattr(exc, "code", "linalg_error")
        return {"rep": rep, "error": code, "message": str(exc)}


def run_mc(spec: DgpSpec, reps: int, kappa: int = DEFAULT_KAPPA, seed: int = 0, level: float = 0.95,
           n_jobs: int = 1, first_stage_noise: bool = True, grid_size: int = GRID_SIZE,
           progress: bool = False) -> McResult:
    """Run ``reps`` replications of ``spec`` and aggregate them."""
    if reps < 2:
        raise ValueError("reps must be at least 2")
    if kappa < 2:
        raise ValueError("kappa must be at least 2")
    start = time.perf_counter()
    root = as_stream(seed).child(spec.label())
    tasks = [(spec, r, root, kappa, level, first_stage_noise) for r in range(reps)]
    if n_jobs == 1:
        out = []
        for i, t in enumerate(tasks):
            out.append(_one(t))
            if progress and (i + 1) % max(1, reps // 20) == 0:
                print(f"[{spec.label()}] {i + 1}/{reps} replications", file=sys.stderr, flush=True)
    else:
        from joblib import Parallel, delayed
        out = Parallel(n_jobs=n_jobs, verbose=5 if progress else 0)(delayed(_one)(t) for t in tasks)
    done = sorted((o for o in out if isinstance(o, Replication)), key=lambda r: r.rep)
    failures = sorted((o for o in out if isinstance(o, dict)), key=lambda f: f["rep"])
    if len(failures) >= MAX_FAILURE_SHARE * reps and failures:
        raise ReplicationBudgetExceeded(
            f"{len(failures)} of {reps} replications failed (limit {MAX_FAILURE_SHARE:.0%}); first: {failures[0]}")
    theta0 = spec.theta0
    aggregates = {}
    for e in ESTIMATORS:
        est = np.array([r.theta_hat if e == "classical" else r.theta_star[e] for r in done])
        aggregates[e] = summarize(est, theta0)
    curves, dists = _cdf_curves(done, theta0, _n_of(spec), grid_size)
    result = McResult(spec, reps, kappa, as_stream(seed).seed, level,
                      done, failures, aggregates, _coverage_table(done, theta0), curves, dists,
                      _diagnostic_summary(done), time.perf_counter() - start)
    log.info("%s: %d/%d replications in %.1fs", spec.label(), len(done), reps, result.elapsed)
    return result


def _n_of(spec: DgpSpec) -> int:
    # the copula stage conditions on the first observation
    return spec.n - 1 if spec.id == "D" else spec.n


def coverage(result: McResult, level: float, method: str = "sim") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(two_sided, lower, upper)`` coverage rates of ``method`` per coordinate."""
    if not math.isclose(level, result.level):
        raise LevelMismatch(f"intervals were recorded at level {result.level}, not {level}")
    if method not in result.coverage_rates:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(result.coverage_rates)}")
    c = result.coverage_rates[method]
    return np.array(c["two_sided"]), np.array(c["lower"]), np.array(c["upper"])


# --- output -----------------------------------------------------------------------

def write_replications_csv(result: McResult, path) -> None:
    K = result.theta0.size
    header = ["rep"]
    for j in range(K):
        header += [f"theta_hat_{j}", f"theta_star_mean_{j}", f"theta_star_median_{j}", f"se_{j}",
                   f"psi_mean_{j}", f"psi_sd_{j}"]
        for m in METHODS:
            header += [f"{m}_lo_{j}", f"{m}_hi_{j}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in result.replications:
            row = [r.rep]
            s = r.summary()
            se = np.sqrt(np.clip(np.diag(r.variance), 0, None))
            for j in range(K):
                row += [r.theta_hat[j], r.theta_star["debiased_mean"][j], r.theta_star["debiased_median"][j], se[j],
                        s["psi_mean"][j], s["psi_sd"][j]]
                for m in METHODS:
                    row += [r.bounds[m]["lo"][j], r.bounds[m]["hi"][j]]
            w.writerow(row)


def write_summary_csv(result: McResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dgp", "n", "estimator", "coord", "mean", "bias", "sd", "rmse", "mae"])
        for e, agg in result.aggregates.items():
            for j in range(result.theta0.size):
                w.writerow([result.spec.label(), result.spec.n, e, j] + [agg[k][j] for k in ("mean", "bias", "sd", "rmse", "mae")])


def write_coverage_csv(result: McResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dgp", "n", "level", "method", "coord", "two_sided", "lower", "upper"])
        for m, c in result.coverage_rates.items():
            for j in range(result.theta0.size):
                w.writerow([result.spec.label(), result.spec.n, result.level, m, j,
                            c["two_sided"][j], c["lower"][j], c["upper"][j]])


def write_cdf_csv(result: McResult, path, coord: int = 0) -> None:
    c = result.cdf[coord]
    cols = ("t", "F0", "Hn", "Fn", "Fn_star", "F0_star")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in zip(*(c[k] for k in cols)):
            w.writerow([f"{v:.10g}" for v in row])


def write_json(result: McResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(timing=False), indent=2))


def write_all(result: McResult, outdir) -> list[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    stem = result.spec.label()
    paths = [out / f"{stem}_replications.csv", out / f"{stem}_summary.csv", out / f"{stem}_coverage.csv",
             out / f"{stem}.json"]
    write_replications_csv(result, paths[0])
    write_summary_csv(result, paths[1])
    write_coverage_csv(result, paths[2])
    write_json(result, paths[3])
    for j in range(result.theta0.size):
        p = out / f"{stem}_cdf_{j}.csv"
        write_cdf_csv(result, p, j)
        paths.append(p)
    return paths
