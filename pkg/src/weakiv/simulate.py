"""Monte Carlo harness: data-generating processes, replication loops,
metric aggregation and table rendering.

Two simulation designs are provided, plus a stripped-down pure-noise
preset:

* ``s1_lowdim`` — three covariates entering the instrument, treatment and
  outcome equations through smooth nonlinear functions; instrument count m
  and a concentration parameter control identification strength,
* ``s2_highdim`` — one hundred covariates entering linearly with sparse
  coefficient vectors (five active entries),
* ``local_to_zero`` — no covariates, Gaussian instruments, reduced-form
  coefficients shrinking at the root-n rate.

Replications are independent tasks keyed by ``base_seed + rep`` and can run
serially or across processes with bit-identical results; aggregation is an
order-insensitive reduction over the per-replication records.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, make_folds, residualize
from .errors import ConfigError, EstimationError, WeakIVError
from .estimators import (
    SearchInterval,
    estimate_cue,
    estimate_gmm_identity,
    estimate_tsls,
    residualize_with_truth,
)
from .inference import (
    first_stage_f,
    identity_gmm_variance,
    j_statistic,
    tsls_variance,
    variance_hat,
)
from .learners import LearnerSpec, cross_fit, linear_partial_out
from .moments import MomentSystem

__all__ = [
    "ScenarioConfig",
    "CellMetrics",
    "EstimatorMetrics",
    "RepOutcome",
    "generate_s1",
    "generate_s2",
    "generate_dataset",
    "run_replications",
    "run_cell",
    "render_table",
    "render_raw_csv",
]

SCENARIOS = ("s1_lowdim", "s2_highdim", "local_to_zero")
ESTIMATOR_NAMES = ("cue", "tsls", "gmm", "oracle_cue", "oracle_gmm")
DISPLAY_NAMES = {
    "cue": "debiased-CUE",
    "tsls": "TSLS",
    "gmm": "debiased-GMM",
    "oracle_cue": "oracle-CUE",
    "oracle_gmm": "oracle-GMM",
}


# ---------------------------------------------------------------------------
# true regression functions (kept as plain picklable classes)


def _s1_alpha_base(x: np.ndarray) -> np.ndarray:
    return (1.0 + x[:, 0] - 0.5 * x[:, 1] + 0.1 * np.sin(x[:, 1])
            + 0.5 * x[:, 2] + np.exp(0.3 * x[:, 2]))


def _s1_f(x: np.ndarray) -> np.ndarray:
    return (1.5 + 2.0 * x[:, 0] - 0.5 * x[:, 1] + 0.3 * x[:, 1] ** 2
            - 0.5 * x[:, 2] + 0.3 / (1.0 + np.exp(x[:, 2])))


def _s1_h(x: np.ndarray) -> np.ndarray:
    return (2.0 + 1.5 * x[:, 0] + 0.5 * x[:, 1] + 0.2 * x[:, 1] ** 2
            + 0.5 * x[:, 2] + 0.2 * np.exp(-x[:, 2]))


@dataclass(frozen=True)
class S1Truth:
    """True covariate regressions of the low-dimensional design."""

    pi: np.ndarray
    beta0: float
    rho: float

    @property
    def m(self) -> int:
        return self.pi.shape[0]

    def alpha0(self, x: np.ndarray) -> np.ndarray:
        base = _s1_alpha_base(x)
        return np.repeat(base[:, None], self.m, axis=1)

    def r0(self, x: np.ndarray) -> np.ndarray:
        return _s1_alpha_base(x) * float(self.pi.sum()) + _s1_f(x)

    def ell0(self, x: np.ndarray) -> np.ndarray:
        return self.r0(x) * self.beta0 + _s1_h(x)


@dataclass(frozen=True)
class S2Truth:
    """True covariate regressions of the high-dimensional sparse design."""

    pi: np.ndarray
    gamma: np.ndarray
    lam_d: np.ndarray
    lam_y: np.ndarray
    beta0: float
    rho: float

    @property
    def m(self) -> int:
        return self.pi.shape[0]

    def alpha0(self, x: np.ndarray) -> np.ndarray:
        base = x @ self.gamma
        return np.repeat(base[:, None], self.m, axis=1)

    def r0(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.gamma) * float(self.pi.sum()) + x @ self.lam_d

    def ell0(self, x: np.ndarray) -> np.ndarray:
        return self.r0(x) * self.beta0 + x @ self.lam_y


@dataclass(frozen=True)
class PureNoiseTruth:
    """Covariate-free design: all regressions are identically zero."""

    pi: np.ndarray
    beta0: float
    rho: float

    @property
    def m(self) -> int:
        return self.pi.shape[0]

    def alpha0(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((x.shape[0], self.m))

    def r0(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(x.shape[0])

    def ell0(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(x.shape[0])


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioConfig:
    """Full description of one Monte Carlo cell.

    ``z_noise_corr`` sets the correlation of the idiosyncratic instrument
    noise across instrument columns (0 = independent noise per column;
    1 = one shared shock for all columns). ``gamma_scale`` rescales the
    instrument-equation covariate coefficients of the high-dimensional
    design (0 makes the instruments pure noise).
    """

    scenario: str = "s1_lowdim"
    n: int = 1000
    m: int = 15
    cp: float = 30.0
    rho: float = 0.3
    beta0: float = 0.0
    K: int = 4
    reps: int = 1
    base_seed: int = 0
    estimators: tuple[str, ...] = ("cue",)
    learner: LearnerSpec = field(default_factory=lambda: LearnerSpec(kind="spline-additive"))
    search: SearchInterval = field(default_factory=lambda: SearchInterval(-8.0, 8.0))
    z_noise_corr: float = 0.0
    gamma_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n < 2 * self.K:
            raise ConfigError(f"need n >= 2K, got n={self.n}, K={self.K}")
        if self.m < 1:
            raise ConfigError("need m >= 1")
        if not (self.cp > 0):
            raise ConfigError("concentration parameter must be positive")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not (-1.0 <= self.rho <= 1.0):
            raise ConfigError("rho must lie in [-1, 1]")
        if not (0.0 <= self.z_noise_corr <= 1.0):
            raise ConfigError("z_noise_corr must lie in [0, 1]")
        if not self.estimators:
            raise ConfigError("estimator set must be non-empty")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise ConfigError(f"unknown estimator(s) {sorted(unknown)}; expected {ESTIMATOR_NAMES}")


def _instrument_noise(rng: np.random.Generator, n: int, m: int, corr: float) -> np.ndarray:
    eps = rng.standard_normal((n, m))
    if corr > 0.0:
        shared = rng.standard_normal((n, 1))
        eps = math.sqrt(corr) * shared + math.sqrt(1.0 - corr) * eps
    return eps


def generate_s1(config: ScenarioConfig, seed) -> tuple[Dataset, S1Truth]:
    """Low-dimensional design: p = 3 covariates, nonlinear regressions.

    Instrument strength is calibrated through ``pi_j = sqrt(cp / (n m))``;
    the structural and reduced-form errors are correlated with coefficient
    ``rho``. Draw order: covariates, instrument noise, treatment shock,
    outcome shock.
    """
    n, m = config.n, config.m
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    eps = _instrument_noise(rng, n, m, config.z_noise_corr)
    nu = rng.standard_normal(n)
    eps_out = rng.standard_normal(n)

    z = _s1_alpha_base(x)[:, None] + eps
    pi = np.full(m, math.sqrt(config.cp / (n * m)))
    d = z @ pi + _s1_f(x) + nu
    y = (d * config.beta0 + _s1_h(x) + config.rho * nu
         + math.sqrt(1.0 - config.rho**2) * eps_out)
    ds = Dataset(y=y, d=d, z=z, x=x)
    return ds, S1Truth(pi=pi, beta0=config.beta0, rho=config.rho)


def generate_s2(config: ScenarioConfig, seed) -> tuple[Dataset, S2Truth]:
    """High-dimensional sparse design: p = 100 covariates entering linearly
    with coefficient vectors whose first five entries are one (scaled by
    ``gamma_scale`` in the instrument equation)."""
    n, m, p = config.n, config.m, 100
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    eps = _instrument_noise(rng, n, m, config.z_noise_corr)
    nu = rng.standard_normal(n)
    eps_out = rng.standard_normal(n)

    gamma = np.zeros(p)
    gamma[:5] = config.gamma_scale
    lam_d = np.zeros(p)
    lam_d[:5] = 1.0
    lam_y = np.zeros(p)
    lam_y[:5] = 1.0

    z = (x @ gamma)[:, None] + eps
    pi = np.full(m, math.sqrt(config.cp / (n * m)))
    d = z @ pi + x @ lam_d + nu
    y = (d * config.beta0 + x @ lam_y + config.rho * nu
         + math.sqrt(1.0 - config.rho**2) * eps_out)
    ds = Dataset(y=y, d=d, z=z, x=x)
    return ds, S2Truth(pi=pi, gamma=gamma, lam_d=lam_d, lam_y=lam_y,
                       beta0=config.beta0, rho=config.rho)


def generate_local_to_zero(config: ScenarioConfig, seed) -> tuple[Dataset, PureNoiseTruth]:
    """Covariate-free design with Gaussian instruments and per-instrument
    strength shrinking like ``sqrt(cp / (n m))``."""
    n, m = config.n, config.m
    rng = np.random.default_rng(seed)
    z = _instrument_noise(rng, n, m, config.z_noise_corr)
    nu = rng.standard_normal(n)
    eps_out = rng.standard_normal(n)
    pi = np.full(m, math.sqrt(config.cp / (n * m)))
    d = z @ pi + nu
    y = (d * config.beta0 + config.rho * nu
         + math.sqrt(1.0 - config.rho**2) * eps_out)
    ds = Dataset(y=y, d=d, z=z, x=np.empty((n, 0)))
    return ds, PureNoiseTruth(pi=pi, beta0=config.beta0, rho=config.rho)


def generate_dataset(config: ScenarioConfig, seed):
    """Dispatch to the configured scenario's generator."""
    if config.scenario == "s1_lowdim":
        return generate_s1(config, seed)
    if config.scenario == "s2_highdim":
        return generate_s2(config, seed)
    return generate_local_to_zero(config, seed)


# ---------------------------------------------------------------------------
# replication engine


@dataclass
class RepOutcome:
    """Raw result of one estimator on one replication."""

    rep: int
    seed: int
    method: str
    ok: bool
    beta_hat: float = math.nan
    se: float = math.nan
    j_stat: float = math.nan
    j_p: float = math.nan
    f_stat: float = math.nan
    boundary: bool = False
    runtime: float = 0.0
    error: str = ""


def _run_rep(config: ScenarioConfig, rep: int) -> list[RepOutcome]:
    """Run every requested estimator on replication ``rep``.

    Runtime per estimator includes the first-step fits it depends on (the
    cross-fit is shared between the debiased estimators and billed to each).
    """
    seed = config.base_seed + rep
    ds, truth = generate_dataset(config, seed)
    wanted = config.estimators
    outcomes: list[RepOutcome] = []

    rd_fit = None
    ms_fit = None
    crossfit_err = None
    t_crossfit = 0.0
    if {"cue", "gmm"} & set(wanted):
        t0 = time.perf_counter()
        try:
            folds = make_folds(ds.n, config.K, (seed, 1))
            fits = cross_fit(ds, folds, config.learner, seed=(seed, 2))
            rd_fit = residualize(ds, fits, folds)
            ms_fit = MomentSystem(rd_fit)
        except WeakIVError as e:
            crossfit_err = f"{type(e).__name__}: {e}"
        t_crossfit = time.perf_counter() - t0

    rd_oracle = None
    ms_oracle = None
    if {"oracle_cue", "oracle_gmm"} & set(wanted):
        rd_oracle = residualize_with_truth(ds, truth)
        ms_oracle = MomentSystem(rd_oracle)

    for method in wanted:
        out = RepOutcome(rep=rep, seed=seed, method=method, ok=False)
        t0 = time.perf_counter()
        try:
            if method in ("cue", "gmm"):
                if crossfit_err is not None:
                    raise EstimationError(f"first-step failure: {crossfit_err}")
                if method == "cue":
                    rep_est = estimate_cue(ms_fit, config.search)
                    _, out.se = variance_hat(ms_fit, rep_est.beta_hat)
                    out.j_stat, _, out.j_p = j_statistic(ms_fit, rep_est.beta_hat)
                else:
                    rep_est = estimate_gmm_identity(ms_fit)
                    _, out.se = identity_gmm_variance(ms_fit, rep_est.beta_hat)
                out.f_stat = first_stage_f(rd_fit)
            elif method == "tsls":
                rd_lin = linear_partial_out(ds)
                rep_est = estimate_tsls(rd_lin)
                _, out.se = tsls_variance(rd_lin, rep_est.beta_hat)
                out.f_stat = first_stage_f(rd_lin)
            elif method == "oracle_cue":
                rep_est = estimate_cue(ms_oracle, config.search)
                _, out.se = variance_hat(ms_oracle, rep_est.beta_hat)
                out.j_stat, _, out.j_p = j_statistic(ms_oracle, rep_est.beta_hat)
                out.f_stat = first_stage_f(rd_oracle)
            else:  # oracle_gmm
                rep_est = estimate_gmm_identity(ms_oracle)
                _, out.se = identity_gmm_variance(ms_oracle, rep_est.beta_hat)
                out.f_stat = first_stage_f(rd_oracle)
            out.beta_hat = rep_est.beta_hat
            out.boundary = rep_est.boundary_flag
            out.ok = True
        except WeakIVError as e:
            out.error = f"{type(e).__name__}: {e}"
        out.runtime = time.perf_counter() - t0
        if method in ("cue", "gmm"):
            out.runtime += t_crossfit
        outcomes.append(out)
    return outcomes


def _run_rep_star(args) -> list[RepOutcome]:
    return _run_rep(*args)


def run_replications(config: ScenarioConfig, workers: int = 1) -> list[RepOutcome]:
    """Run all replications and return the flat list of raw outcomes.

    Results are identical whether run serially or with process workers:
    every replication derives its randomness from ``base_seed + rep`` alone
    and outcomes are collected in replication order.
    """
    tasks = [(config, r) for r in range(1, config.reps + 1)]
    if workers <= 1 or config.reps == 1:
        nested = [_run_rep(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(_run_rep_star, tasks, chunksize=max(1, config.reps // (8 * workers))))
    return [o for group in nested for o in group]


@dataclass
class EstimatorMetrics:
    """Aggregated Monte Carlo metrics for one estimator in one cell."""

    abs_mean_bias: float
    abs_median_bias: float
    sd: float
    root_mean_evar: float
    cov95: float
    failure_count: int
    successes: int
    mean_runtime: float


@dataclass
class CellMetrics:
    """All aggregated metrics of one (scenario, n, m, cp) cell."""

    scenario: str
    n: int
    m: int
    cp: float
    reps: int
    base_seed: int
    per_estimator: dict[str, EstimatorMetrics]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CellMetrics":
        per = {k: EstimatorMetrics(**v) for k, v in d["per_estimator"].items()}
        rest = {k: v for k, v in d.items() if k != "per_estimator"}
        return cls(per_estimator=per, **rest)


def aggregate(config: ScenarioConfig, outcomes: list[RepOutcome]) -> CellMetrics:
    """Reduce raw replication outcomes to cell metrics.

    Failed replications are excluded from an estimator's aggregates but
    counted in ``failure_count``. Raises if every replication failed for
    some requested estimator.
    """
    per: dict[str, EstimatorMetrics] = {}
    for method in config.estimators:
        rows = sorted((o for o in outcomes if o.method == method), key=lambda o: o.rep)
        good = [o for o in rows if o.ok]
        failures = len(rows) - len(good)
        if not good:
            raise EstimationError(
                f"all {len(rows)} replications failed for estimator {method!r}"
            )
        beta = np.array([o.beta_hat for o in good])
        se = np.array([o.se for o in good])
        covered = np.abs(beta - config.beta0) <= 1.96 * se
        per[method] = EstimatorMetrics(
            abs_mean_bias=float(abs(beta.mean() - config.beta0)),
            abs_median_bias=float(abs(np.median(beta) - config.beta0)),
            sd=float(beta.std(ddof=1)) if len(beta) > 1 else math.nan,
            root_mean_evar=float(np.sqrt(np.mean(se**2))),
            cov95=float(covered.mean()),
            failure_count=failures,
            successes=len(good),
            mean_runtime=float(np.mean([o.runtime for o in good])),
        )
    return CellMetrics(
        scenario=config.scenario, n=config.n, m=config.m, cp=config.cp,
        reps=config.reps, base_seed=config.base_seed, per_estimator=per,
    )


def run_cell(config: ScenarioConfig, workers: int = 1) -> CellMetrics:
    """Run one Monte Carlo cell end to end and aggregate its metrics."""
    return aggregate(config, run_replications(config, workers=workers))


# ---------------------------------------------------------------------------
# rendering


_MD_COLUMNS = ["Method", "CP", "m", "n", "\\|mean bias\\|", "\\|median bias\\|",
               "√Var", "√EVar", "Cov95"]
_CSV_COLUMNS = ["scenario", "n", "m", "cp", "reps", "base_seed", "method",
                "abs_mean_bias", "abs_median_bias", "sd", "root_mean_evar",
                "cov95", "failure_count", "successes"]


def render_table(metrics: list[CellMetrics], fmt: str = "markdown") -> str:
    """Render cell metrics as a markdown table, JSON document, or CSV.

    Column order is fixed. The csv and markdown formats contain only the
    statistical columns and are byte-identical across repeated runs of the
    same configuration; json carries the full metrics including wall-clock
    runtimes.
    """
    if not metrics:
        raise ConfigError("no cells to render")
    for cell in metrics:
        if not cell.per_estimator:
            raise ConfigError("cell has an empty estimator set")

    if fmt == "json":
        return json.dumps({"cells": [c.to_dict() for c in metrics]}, indent=2, sort_keys=True)

    if fmt == "csv":
        lines = [",".join(_CSV_COLUMNS)]
        for cell in metrics:
            for method in sorted(cell.per_estimator):
                em = cell.per_estimator[method]
                lines.append(",".join(map(str, [
                    cell.scenario, cell.n, cell.m, cell.cp, cell.reps, cell.base_seed,
                    method, em.abs_mean_bias, em.abs_median_bias, em.sd,
                    em.root_mean_evar, em.cov95, em.failure_count, em.successes,
                ])))
        return "\n".join(lines) + "\n"

    if fmt == "markdown":
        lines = ["| " + " | ".join(_MD_COLUMNS) + " |",
                 "|" + "---|" * len(_MD_COLUMNS)]
        for cell in metrics:
            for method in sorted(cell.per_estimator):
                em = cell.per_estimator[method]
                row = [DISPLAY_NAMES.get(method, method), f"{cell.cp:g}", str(cell.m),
                       str(cell.n), f"{em.abs_mean_bias:.3f}", f"{em.abs_median_bias:.3f}",
                       f"{em.sd:.3f}", f"{em.root_mean_evar:.3f}", f"{em.cov95:.3f}"]
                lines.append("| " + " | ".join(row) + " |")
        return "\n".join(lines) + "\n"

    raise ConfigError(f"unknown table format {fmt!r}; expected markdown, json or csv")


def render_raw_csv(outcomes: list[RepOutcome]) -> str:
    """Per-replication estimates as CSV (for audit and re-aggregation)."""
    cols = ["rep", "seed", "method", "ok", "beta_hat", "se", "j_stat", "j_p",
            "f_stat", "boundary", "runtime", "error"]
    lines = [",".join(cols)]
    for o in outcomes:
        lines.append(",".join([
            str(o.rep), str(o.seed), o.method, str(int(o.ok)), repr(o.beta_hat),
            repr(o.se), repr(o.j_stat), repr(o.j_p), repr(o.f_stat),
            str(int(o.boundary)), f"{o.runtime:.6f}",
            '"%s"' % o.error.replace('"', "'"),
        ]))
    return "\n".join(lines) + "\n"
