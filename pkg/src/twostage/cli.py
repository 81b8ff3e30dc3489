"""Command-line interface.

Subcommands:

* ``mc``: Monte Carlo experiment for one design cell; writes replication,
  summary, coverage and CDF-grid files.
* ``estimate``: fit a two-step model on a CSV file and report simulated
  intervals and the debiased estimate.
* ``peer``: peer-effect estimation on an edge list and an attribute table
  (the bundled synthetic network when no files are given).
* ``synthetic-network``: write the bundled synthetic network as CSV files.

Settings can also come from a JSON or YAML file passed with ``--config``;
flags given on the command line take precedence.  Standard output carries one
JSON document (the run summary or an error); progress goes to standard error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SchemaError, TwoStageError

log = logging.getLogger("twostage")

COMMANDS = ("mc", "estimate", "peer", "synthetic-network")
DEBIAS = ("mean", "median", "off")
MODELS = ("iv", "poisson", "copula")


@dataclass
class RunConfig:
    """Validated settings for one invocation."""

    command: str
    dgp: str | None = None
    kn_mult: int = 2
    n: int | None = None
    reps: int = 200
    kappa: int = 1000
    seed: int = 0
    level: float = 0.95
    debias: str = "mean"
    out: str = "out"
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    progress: bool = True
    # estimate
    model: str | None = None
    data: str | None = None
    outcome: str = "outcome"
    endog: list[str] = field(default_factory=list)
    exog: list[str] = field(default_factory=list)
    instruments: list[str] = field(default_factory=list)
    regressor: str | None = None
    treatment: str | None = None
    columns: list[str] = field(default_factory=list)
    # peer
    edges: str | None = None
    attrs: str | None = None
    kmax: int = 9
    fixed_effects: bool = False
    method: list[str] = field(default_factory=lambda: ["ivmi", "divmi"])

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.debias not in DEBIAS:
            raise ConfigError(f"debias must be one of {DEBIAS}")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.kappa < 2:
            raise ConfigError("kappa must be at least 2")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.command == "mc":
            if self.dgp is None or self.dgp.upper() not in ("A", "B", "C", "D"):
                raise ConfigError("mc needs --dgp A, B, C or D")
            if self.n is None or self.n < 10:
                raise ConfigError("mc needs --n of at least 10")
            if self.reps < 2:
                raise ConfigError("reps must be at least 2")
            if self.kn_mult not in (2, 4):
                raise ConfigError("kn-mult must be 2 or 4")
        if self.command == "estimate":
            if self.model not in MODELS:
                raise ConfigError(f"estimate needs --model in {MODELS}")
            if not self.data:
                raise ConfigError("estimate needs --data")
            if self.model == "iv" and not (self.endog and self.instruments):
                raise ConfigError("iv needs --endog and --instruments")
            if self.model == "poisson" and not (self.regressor and self.treatment):
                raise ConfigError("poisson needs --regressor and --treatment")
            if self.model == "copula" and len(self.columns) < 2:
                raise ConfigError("copula needs at least two --columns")
        if self.command == "peer":
            if (self.edges is None) != (self.attrs is None):
                raise ConfigError("give both --edges and --attrs, or neither for the synthetic network")
            if self.kmax < 0:
                raise ConfigError("kmax must be nonnegative")
            from .network.peer import METHODS

            bad = set(self.method) - set(METHODS)
            if bad or not self.method:
                raise ConfigError(f"methods must be chosen from {METHODS}")
        return self


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_LISTS = {"endog", "exog", "instruments", "columns", "method"}


def _split(v):
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    return list(v)


def load_config_file(path) -> dict:
    """Read a JSON or YAML mapping; keys use the flag names (dashes or underscores)."""
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def build_config(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    merged.pop("command", None)
    unknown = set(merged) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown settings {sorted(unknown)}")
    for k in _LISTS & set(merged):
        merged[k] = _split(merged[k])
    types = {"kn_mult": int, "n": int, "reps": int, "kappa": int, "seed": int, "threads": int, "kmax": int,
             "level": float}
    try:
        for k, t in types.items():
            if k in merged:
                merged[k] = t(merged[k])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value: {exc}") from None
    return RunConfig(command=command, **merged).validate()


# Parsers ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="twostage",
        description="Simulation-based inference and debiasing for two-step estimators.",
        epilog="Settings may also be given in a JSON/YAML file via --config; command-line flags win.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON or YAML file with settings (flag names as keys)")
        sp.add_argument("--kappa", type=int, help="number of simulation draws (default 1000)")
        sp.add_argument("--seed", type=int, help="root random seed (default 0)")
        sp.add_argument("--level", type=float, help="confidence level (default 0.95)")
        sp.add_argument("--debias", choices=DEBIAS, help="bias correction centre (default mean)")
        sp.add_argument("--out", help="output directory (default ./out)")
        sp.add_argument("--quiet", dest="progress", action="store_const", const=False,
                        help="no progress messages on standard error")

    mc = sub.add_parser("mc", help="run a Monte Carlo experiment")
    common(mc)
    mc.add_argument("--dgp", choices=["A", "B", "C", "D"])
    mc.add_argument("--kn-mult", dest="kn_mult", type=int, choices=[2, 4], help="DGP B instrument multiplier")
    mc.add_argument("--n", type=int, help="sample size")
    mc.add_argument("--reps", type=int, help="replications (default 200)")
    mc.add_argument("--threads", type=int, help="parallel workers (default: all cores)")

    est = sub.add_parser("estimate", help="estimate a two-step model on a CSV file")
    common(est)
    est.add_argument("--model", choices=MODELS)
    est.add_argument("--data", help="CSV file with a header row")
    est.add_argument("--outcome", help="outcome column (iv, poisson)")
    est.add_argument("--endog", help="comma-separated endogenous regressors (iv)")
    est.add_argument("--exog", help="comma-separated exogenous regressors (iv)")
    est.add_argument("--instruments", help="comma-separated excluded instruments (iv)")
    est.add_argument("--regressor", help="first-stage regressor (poisson)")
    est.add_argument("--treatment", help="binary treatment, blank where unobserved (poisson)")
    est.add_argument("--columns", help="comma-separated return series (copula)")

    peer = sub.add_parser("peer", help="peer-effect estimation on a network")
    common(peer)
    peer.add_argument("--edges", help="edge list CSV (group_id, src, dst)")
    peer.add_argument("--attrs", help="attribute CSV (group_id, node_id, outcome, covariates...)")
    peer.add_argument("--outcome", help="outcome column (default 'outcome')")
    peer.add_argument("--kmax", type=int, help="highest extra network power in the instruments (default 9)")
    peer.add_argument("--fixed-effects", dest="fixed_effects", action="store_const", const=True,
                      help="remove group fixed effects")
    peer.add_argument("--method", help="comma-separated subset of ols,civ,oiv,ivmi,divmi")

    syn = sub.add_parser("synthetic-network", help="write the bundled synthetic network as CSV")
    syn.add_argument("--out", default="out")
    syn.add_argument("--seed", type=int, default=None)
    return p


# Commands --------------------------------------------------------------------------


def _progress(cfg: RunConfig, msg: str) -> None:
    if cfg.progress:
        print(msg, file=sys.stderr, flush=True)


def cmd_mc(cfg: RunConfig) -> dict:
    from . import harness
    from .dgp import DgpSpec

    spec = DgpSpec(cfg.dgp, cfg.n, multiplier=cfg.kn_mult if cfg.dgp.upper() == "B" else None)
    _progress(cfg, f"running {cfg.reps} replications of {spec.label()}")
    res = harness.run_mc(spec, cfg.reps, cfg.kappa, cfg.seed, cfg.level, n_jobs=cfg.threads,
                         progress=cfg.progress)
    if cfg.debias == "off":
        res.aggregates = {"classical": res.aggregates["classical"]}
    paths = harness.write_all(res, cfg.out)
    out = res.to_dict(timing=False)
    out.pop("failures")
    out["failed_replications"] = len(res.failures)
    out["debias"] = cfg.debias
    out["files"] = [str(p) for p in paths]
    return out


def _read_columns(path, names: list[str], allow_blank: set[str] = frozenset()) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for c in names:
            if c not in header:
                raise SchemaError(f"{path} lacks the column {c!r}", line=1, column=c)
        cols = {c: [] for c in names}
        for lineno, row in enumerate(reader, start=2):
            for c in names:
                v = (row.get(c) or "").strip()
                if v == "" and c in allow_blank:
                    cols[c].append(math.nan)
                    continue
                try:
                    x = float(v)
                except ValueError:
                    raise SchemaError(f"{path}: {v!r} is not a number", line=lineno, column=c) from None
                if not math.isfinite(x):
                    raise SchemaError(f"{path}: non-finite value", line=lineno, column=c)
                cols[c].append(x)
    return {c: np.array(v) for c, v in cols.items()}


def cmd_estimate(cfg: RunConfig) -> dict:
    from .inference import (asymptotic_variance, confidence_interval, debias, debiased_psi,
                            normal_path_psi, simulate_psi)
    from .rng import as_stream

    stream = as_stream(cfg.seed)
    mode = "mean" if cfg.debias == "off" else cfg.debias
    normal_var = None
    if cfg.model == "iv":
        from .secondstage.iv import LinearIvModel, iv_estimate

        cols = _read_columns(cfg.data, [cfg.outcome, *cfg.endog, *cfg.exog, *cfg.instruments])
        n = cols[cfg.outcome].size
        X = np.column_stack([cols[c] for c in cfg.endog] + [cols[c] for c in cfg.exog] + [np.ones(n)])
        Z = np.column_stack([np.ones(n)] + [cols[c] for c in cfg.exog] + [cols[c] for c in cfg.instruments])
        model = LinearIvModel(cols[cfg.outcome], X, Z, endog_idx=tuple(range(len(cfg.endog))))
        theta, parts = iv_estimate(model)
        names = [*cfg.endog, *cfg.exog, "const"]
        rebuild = model.parts
    elif cfg.model == "poisson":
        from .firststage.spline import spline_gam_fit
        from .secondstage.poisson import PoissonPluginModel, poisson_model_estimate

        cols = _read_columns(cfg.data, [cfg.outcome, cfg.regressor, cfg.treatment], {cfg.treatment})
        z, d = cols[cfg.regressor], cols[cfg.treatment]
        seen = ~np.isnan(d)
        knots = np.linspace(z.min(), z.max(), 21)
        fs = spline_gam_fit(z[seen], d[seen], knots)
        model = PoissonPluginModel(cols[cfg.outcome], z, fs)
        theta, parts = poisson_model_estimate(model)
        names = ["const", f"p({cfg.regressor})"]
        rebuild = model.parts
    else:
        from .firststage.garch import ar_garch_fit
        from .secondstage.copula import ClaytonCopulaModel, clayton_mle

        cols = _read_columns(cfg.data, cfg.columns)
        fits = [ar_garch_fit(cols[c]) for c in cfg.columns]
        model = ClaytonCopulaModel(fits)
        theta = np.array([clayton_mle(model.U)])
        parts = model.parts(theta[0])
        normal_var = model.sequential_variance(theta[0])
        names = ["clayton_theta"]
        rebuild = None
    n = model.n
    _progress(cfg, f"simulating {cfg.kappa} draws")
    theta_star = debias(theta, parts, n, cfg.kappa, stream, mode)
    if normal_var is None:
        var = asymptotic_variance(parts, n, cfg.kappa, stream)
        psi = simulate_psi(parts, n, cfg.kappa, stream, theta_hat=theta)
        psi_star = debiased_psi(rebuild(theta_star), n, cfg.kappa, stream, theta_star, mode)
    else:
        var = normal_var
        psi = normal_path_psi(parts, n, cfg.kappa, stream, var, theta, mode)
        psi_star = normal_path_psi(parts, n, cfg.kappa, stream, var, theta_star, centered=True)
    lo, hi = confidence_interval(theta, psi, cfg.level)
    lo_s, hi_s = confidence_interval(theta_star, psi_star, cfg.level)
    se = np.sqrt(np.clip(np.diag(var), 0, None))
    rows = []
    for j, name in enumerate(names):
        row = {"term": name, "estimate": float(theta[j]), "se": float(se[j]), "ci_lo": float(lo[j]),
               "ci_hi": float(hi[j])}
        if cfg.debias != "off":
            row.update(debiased=float(theta_star[j]), debiased_ci_lo=float(lo_s[j]), debiased_ci_hi=float(hi_s[j]))
        rows.append(row)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"estimate_{cfg.model}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    diag = {k: v for k, v in parts.diagnostics.items()} if parts.diagnostics else {}
    return {"model": cfg.model, "n": n, "kappa": cfg.kappa, "level": cfg.level, "debias": cfg.debias,
            "coefficients": rows, "diagnostics": diag, "files": [str(path)]}


def cmd_peer(cfg: RunConfig) -> dict:
    from .network.graph import read_network, synthetic_network
    from .network.peer import estimate, write_coef_table, write_peer_json

    if cfg.edges is None:
        net, _ = synthetic_network()
        source = "synthetic"
    else:
        net = read_network(cfg.edges, cfg.attrs, outcome=cfg.outcome)
        source = str(cfg.edges)
    _progress(cfg, f"peer estimation on {net.n} nodes in {len(net.groups)} groups")
    mode = "mean" if cfg.debias == "off" else cfg.debias
    est = estimate(net, cfg.method, cfg.kmax, cfg.fixed_effects, cfg.kappa, cfg.seed, cfg.level, mode)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [outdir / "peer.json", outdir / "peer_coefficients.csv"]
    write_peer_json(paths[0], est)
    write_coef_table(paths[1], est)
    summary = {m: {k: e.to_dict()[k] for k in ("theta1", "theta1_sd", "theta1_ci", "multiplier")}
               for m, e in est.items()}
    return {"source": source, "n": net.n, "groups": len(net.groups), "isolates": net.isolates,
            "kmax": cfg.kmax, "fixed_effects": cfg.fixed_effects, "estimates": summary,
            "files": [str(p) for p in paths]}


def cmd_synthetic(args) -> dict:
    from .network.graph import SYNTHETIC_SEED, synthetic_network, write_network

    net, design = synthetic_network(SYNTHETIC_SEED if args.seed is None else args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "edges.csv", out / "attributes.csv"]
    write_network(net, *paths)
    return {"n": net.n, "groups": len(net.groups), "theta1": design.theta1, "files": [str(p) for p in paths]}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        if args.command == "synthetic-network":
            result = cmd_synthetic(args)
        else:
            flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
            file_values = load_config_file(args.config) if args.config else {}
            cfg = build_config(args.command, file_values, flags)
            if not cfg.progress:
                logging.getLogger().setLevel(logging.ERROR)
            result = {"mc": cmd_mc, "estimate": cmd_estimate, "peer": cmd_peer}[cfg.command](cfg)
    except TwoStageError as exc:
        print(json.dumps(exc.to_dict()), flush=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), flush=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", **result}, default=_json_default), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
