"""Command-line interface.

Three subcommands tie the library together:

* ``weakiv estimate`` — run the full pipeline (cross-fit, residualize,
  estimate, inference) on a user-supplied CSV,
* ``weakiv simulate`` — run Monte Carlo cells over an (n, m, cp) grid and
  render the aggregate table plus per-replication audit files,
* ``weakiv selftest`` — run the built-in property suite.

Every output file embeds the fully resolved configuration and seed.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 property-test failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import __version__
from .data import ColumnSchema, load_csv, make_folds, residualize
from .errors import ConfigError, DataError, NumericalError, WeakIVError
from .estimators import (
    SearchInterval,
    default_search_interval,
    estimate_cue,
    estimate_gmm_identity,
    estimate_tsls,
)
from .inference import (
    cue_inference,
    first_stage_f,
    identity_gmm_variance,
    tsls_variance,
)
from .learners import LearnerSpec, cross_fit
from .moments import MomentSystem
from .selftest import run_all
from .simulate import (
    ScenarioConfig,
    aggregate,
    render_raw_csv,
    render_table,
    run_replications,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_PROPERTY = 5

LEARNER_ALIASES = {
    "linear": "linear",
    "ridge": "ridge",
    "lasso": "lasso",
    "spline": "spline-additive",
    "spline-additive": "spline-additive",
}


def _split_list(values) -> list[str]:
    """Flatten ['a,b', 'c'] -> ['a', 'b', 'c']."""
    out: list[str] = []
    for v in values or []:
        out.extend(s for s in str(v).split(",") if s)
    return out


def _default_workers() -> int:
    env = os.environ.get("WEAKIV_WORKERS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _load_config_file(path: str | None, section: str) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    sec = doc.get(section, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {section!r} must be a JSON object")
    return sec


def _merged(args: argparse.Namespace, section: str, keys: dict) -> dict:
    """File values first, then any flag explicitly set on the command line."""
    cfg = dict(_load_config_file(args.config, section))
    for key, default in keys.items():
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
        elif key not in cfg:
            cfg[key] = default
    return cfg


def _learner_from_name(name: str, seed: int) -> LearnerSpec:
    if name not in LEARNER_ALIASES:
        raise ConfigError(
            f"unknown learner {name!r}; expected one of {sorted(LEARNER_ALIASES)}"
        )
    kind = LEARNER_ALIASES[name]
    # the CLI's lasso refits OLS on the selected support: shrinkage-free
    # predictions are what the debiased estimators need (see README)
    return LearnerSpec(kind=kind, seed=seed, post_ols=(kind == "lasso"))


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = _merged(args, "estimate", {
        "data": None, "outcome": None, "treatment": None,
        "instruments": None, "covariates": None, "learner": "spline",
        "folds": 4, "method": None, "seed": 0, "out": None, "workers": None,
        "search_lo": None, "search_hi": None,
    })
    for required in ("data", "outcome", "treatment", "instruments"):
        if not cfg.get(required):
            raise ConfigError(f"estimate needs --{required}")
    methods = _split_list(cfg["method"] if cfg["method"] else ["cue"])
    known = {"cue", "tsls", "gmm", "gmm2"}
    unknown = set(methods) - known
    if unknown:
        raise ConfigError(f"unknown method(s) {sorted(unknown)}; expected subset of {sorted(known)}")

    schema = ColumnSchema(
        outcome=cfg["outcome"],
        treatment=cfg["treatment"],
        instruments=tuple(_split_list(cfg["instruments"])),
        covariates=tuple(_split_list(cfg["covariates"])),
    )
    ds = load_csv(cfg["data"], schema)
    seed = int(cfg["seed"])
    folds = make_folds(ds.n, int(cfg["folds"]), seed)
    spec = _learner_from_name(str(cfg["learner"]), seed)
    fits = cross_fit(ds, folds, spec)
    rd = residualize(ds, fits, folds)
    ms = MomentSystem(rd)

    if cfg["search_lo"] is not None and cfg["search_hi"] is not None:
        interval = SearchInterval(float(cfg["search_lo"]), float(cfg["search_hi"]))
    else:
        interval = default_search_interval(rd)

    results = {}
    lines = [
        f"weakiv {__version__} | n={ds.n} m={ds.m} p={ds.p} | learner={spec.kind} "
        f"K={folds.K} seed={seed}",
        f"first-stage F (partialled out): {first_stage_f(rd):.4f}",
    ]
    for method in methods:
        if method == "cue":
            rep = estimate_cue(ms, interval)
            inf = cue_inference(ms, rep.beta_hat, beta_star=0.0, rd=rd)
            se = inf.se
            entry = {
                "estimate": _report_dict(rep),
                "inference": _inference_dict(inf),
            }
            ci = (rep.beta_hat - 1.96 * se, rep.beta_hat + 1.96 * se)
            if ds.m == 1:
                jtxt = "J omitted (just-identified, m=1)"
            else:
                jtxt = f"J={inf.j_stat:.3f} on {inf.j_df} df (p={inf.j_p:.4f})"
            lines.append(
                f"cue:  estimate={rep.beta_hat:.6f}  95% CI=({ci[0]:.6f}, {ci[1]:.6f})  "
                f"se={se:.6f}  {jtxt}"
            )
        else:
            if method == "tsls":
                rep = estimate_tsls(rd)
                _, se = tsls_variance(rd, rep.beta_hat)
            else:
                rep = estimate_gmm_identity(ms, two_step=(method == "gmm2"))
                _, se = identity_gmm_variance(ms, rep.beta_hat)
            entry = {"estimate": _report_dict(rep), "inference": {"se": se}}
            ci = (rep.beta_hat - 1.96 * se, rep.beta_hat + 1.96 * se)
            lines.append(
                f"{method}: estimate={rep.beta_hat:.6f}  95% CI=({ci[0]:.6f}, {ci[1]:.6f})  "
                f"se={se:.6f}"
            )
        results[method] = entry

    resolved = {k: v for k, v in cfg.items() if k != "workers"}
    resolved["schema"] = {
        "outcome": schema.outcome, "treatment": schema.treatment,
        "instruments": list(schema.instruments), "covariates": list(schema.covariates),
    }
    report = {
        "tool": {"name": "weakiv", "version": __version__, "command": "estimate"},
        "config": resolved,
        "n": ds.n, "m": ds.m, "p": ds.p,
        "results": results,
        "nuisance_summaries": list(fits.summaries),
    }
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if cfg["out"]:
        _write(f"{cfg['out']}.json", json.dumps(report, indent=2, default=_json_default))
        _write(f"{cfg['out']}.txt", f"# config: {json.dumps(resolved, default=_json_default)}\n" + text)
    return EXIT_OK


def _report_dict(rep) -> dict:
    return {
        "beta_hat": rep.beta_hat,
        "method": rep.method,
        "objective_at_min": rep.objective_at_min,
        "stationarity": rep.stationarity,
        "boundary_flag": rep.boundary_flag,
        "multi_min_flag": rep.multi_min_flag,
        "skipped_grid_points": rep.skipped_grid_points,
    }


def _inference_dict(inf) -> dict:
    d = asdict(inf) if not isinstance(inf, dict) else dict(inf)
    return d


def _json_default(o):
    import numpy as np

    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _merged(args, "simulate", {
        "scenario": "s1_lowdim", "n": "1000", "m": "15", "cp": "30",
        "reps": 10, "seed": 0, "rho": 0.3, "beta0": 0.0, "folds": 4,
        "method": None, "learner": None, "out": None, "format": "markdown",
        "workers": None, "search_lo": -8.0, "search_hi": 8.0,
        "z_noise_corr": 0.0, "gamma_scale": 1.0,
    })
    scenario = str(cfg["scenario"])
    if scenario not in ("s1_lowdim", "s2_highdim", "local_to_zero"):
        raise ConfigError(f"unknown scenario {scenario!r}")
    estimators = tuple(_split_list(cfg["method"] if cfg["method"] else ["cue", "tsls", "gmm"]))
    learner_name = cfg["learner"]
    if learner_name is None:
        learner_name = "lasso" if scenario == "s2_highdim" else "spline"
    seed = int(cfg["seed"])
    workers = int(cfg["workers"]) if cfg["workers"] is not None else _default_workers()

    ns = [int(v) for v in _split_list([cfg["n"]])]
    ms_ = [int(v) for v in _split_list([cfg["m"]])]
    cps = [float(v) for v in _split_list([cfg["cp"]])]
    if not ns or not ms_ or not cps:
        raise ConfigError("simulate needs non-empty --n, --m and --cp lists")

    search = SearchInterval(float(cfg["search_lo"]), float(cfg["search_hi"]))
    cells = []
    raw_files = {}
    for n in ns:
        for m in ms_:
            for cp in cps:
                sc = ScenarioConfig(
                    scenario=scenario, n=n, m=m, cp=cp, rho=float(cfg["rho"]),
                    beta0=float(cfg["beta0"]), K=int(cfg["folds"]), reps=int(cfg["reps"]),
                    base_seed=seed, estimators=estimators,
                    learner=_learner_from_name(learner_name, seed),
                    search=search, z_noise_corr=float(cfg["z_noise_corr"]),
                    gamma_scale=float(cfg["gamma_scale"]),
                )
                outcomes = run_replications(sc, workers=workers)
                cells.append(aggregate(sc, outcomes))
                raw_files[(n, m, cp)] = render_raw_csv(outcomes)

    fmt = str(cfg["format"])
    # the reproducibility header carries the statistical configuration only:
    # output location and worker count do not affect results
    resolved = {k: v for k, v in cfg.items() if k not in ("out", "workers")}
    resolved["estimators"] = list(estimators)
    resolved["learner"] = learner_name
    header = json.dumps(resolved, sort_keys=True, default=_json_default)
    if fmt == "json":
        text = json.dumps(
            {"config": resolved, "cells": [c.to_dict() for c in cells]},
            indent=2, sort_keys=True, default=_json_default,
        )
    elif fmt == "csv":
        text = f"# config: {header}\n" + render_table(cells, "csv")
    else:
        text = f"<!-- config: {header} -->\n" + render_table(cells, "markdown")
    sys.stdout.write(text if text.endswith("\n") else text + "\n")

    if cfg["out"]:
        ext = {"json": "json", "csv": "csv", "markdown": "md"}[fmt]
        _write(f"{cfg['out']}.{ext}", text)
        for (n, m, cp), raw in raw_files.items():
            _write(f"{cfg['out']}_raw_n{n}_m{m}_cp{cp:g}.csv",
                   f"# config: {header}\n" + raw)
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest(args: argparse.Namespace) -> int:
    cfg = _merged(args, "selftest", {"seed": 0})
    corrupt = bool(getattr(args, "corrupt_gradient", False))
    results = run_all(seed=int(cfg["seed"]), corrupt_gradient=corrupt)
    all_ok = True
    for res in results:
        tag = "pass" if res.passed else "FAIL"
        sys.stdout.write(f"[{tag}] {res.name}: {res.detail}\n")
        all_ok = all_ok and res.passed
    return EXIT_OK if all_ok else EXIT_PROPERTY


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakiv",
        description="Debiased continuously-updated GMM for partially linear IV "
                    "models with many weak instruments.",
    )
    parser.add_argument("--version", action="version", version=f"weakiv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate a treatment effect from a CSV file")
    est.add_argument("--data", help="path to the CSV data file")
    est.add_argument("--outcome", help="outcome column name")
    est.add_argument("--treatment", help="treatment column name")
    est.add_argument("--instruments", nargs="+", help="instrument column names")
    est.add_argument("--covariates", nargs="*", help="covariate column names")
    est.add_argument("--learner", choices=sorted(LEARNER_ALIASES), help="first-step learner")
    est.add_argument("--folds", type=int, help="number of cross-fitting folds (default 4)")
    est.add_argument("--method", nargs="+", help="estimators to run: cue tsls gmm gmm2")
    est.add_argument("--seed", type=int, help="random seed (default 0)")
    est.add_argument("--out", help="output path prefix (writes .json and .txt)")
    est.add_argument("--config", help="JSON config file with an 'estimate' section")
    est.add_argument("--workers", type=int, help=argparse.SUPPRESS)
    est.set_defaults(func=cmd_estimate)

    sim = sub.add_parser("simulate", help="run Monte Carlo cells and render tables")
    sim.add_argument("--scenario", choices=["s1_lowdim", "s2_highdim", "local_to_zero"])
    sim.add_argument("--n", help="sample size(s), comma separated")
    sim.add_argument("--m", help="instrument count(s), comma separated")
    sim.add_argument("--cp", help="concentration parameter(s), comma separated")
    sim.add_argument("--reps", type=int, help="replications per cell (default 10)")
    sim.add_argument("--rho", type=float, help="error correlation (default 0.3)")
    sim.add_argument("--beta0", type=float, help="true effect (default 0)")
    sim.add_argument("--folds", type=int, help="cross-fitting folds (default 4)")
    sim.add_argument("--method", nargs="+",
                     help="estimators: cue tsls gmm oracle_cue oracle_gmm")
    sim.add_argument("--learner", choices=sorted(LEARNER_ALIASES))
    sim.add_argument("--seed", type=int, help="base seed (default 0)")
    sim.add_argument("--out", help="output path prefix")
    sim.add_argument("--format", choices=["markdown", "csv", "json"])
    sim.add_argument("--workers", type=int,
                     help="process workers (default: WEAKIV_WORKERS or 1)")
    sim.add_argument("--config", help="JSON config file with a 'simulate' section")
    sim.set_defaults(func=cmd_simulate)

    st = sub.add_parser("selftest", help="run the built-in property suite")
    st.add_argument("--seed", type=int, help="instance seed (default 0)")
    st.add_argument("--config", help="JSON config file with a 'selftest' section")
    st.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        _emit_error("config_error", e)
        return EXIT_CONFIG
    except DataError as e:
        _emit_error("data_error", e)
        return EXIT_DATA
    except NumericalError as e:
        _emit_error("numerical_error", e)
        return EXIT_NUMERICAL
    except WeakIVError as e:
        _emit_error("error", e)
        return EXIT_NUMERICAL


def _emit_error(kind: str, exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": str(exc)}}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
