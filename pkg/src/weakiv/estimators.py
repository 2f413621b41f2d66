"""Point estimators on residualized data.

Four estimation routes share the same residualized inputs:

* :func:`estimate_cue` — grid-scan plus local refinement of the
  continuously-updated objective over a compact search interval,
* :func:`estimate_tsls` — two-stage least squares,
* :func:`estimate_gmm_identity` — identity-weighted GMM (closed form),
  optionally followed by an efficient second step,
* :func:`estimate_oracle` — residualizes with user-supplied true
  regression functions and delegates to one of the above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import Dataset, ResidualData
from .errors import ConfigError, EstimationError, SingularWeightingError
from .moments import MomentSystem, dq_dbeta, omega_hat, q_hat

__all__ = [
    "SearchInterval",
    "EstimateReport",
    "estimate_cue",
    "estimate_tsls",
    "estimate_gmm_identity",
    "estimate_oracle",
    "default_search_interval",
]

HARD_CAP = 50.0  # the default search interval never extends beyond +-50


@dataclass(frozen=True)
class SearchInterval:
    """Compact parameter interval searched by the CUE minimizer."""

    lo: float
    hi: float
    grid_points: int = 201
    refine_tol: float = 1e-9

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise ConfigError(f"search interval needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.grid_points < 3:
            raise ConfigError(f"need at least 3 grid points, got {self.grid_points}")
        if self.refine_tol <= 0:
            raise ConfigError("refine_tol must be positive")


@dataclass
class EstimateReport:
    """Outcome of a point-estimation run.

    ``boundary_flag`` is set when the minimizer lands within
    ``10 * refine_tol`` of either end of the search interval;
    ``multi_min_flag`` when a second grid-local minimum comes within 1e-3
    of the best objective value at a distinctly different parameter value.
    """

    beta_hat: float
    method: str
    objective_at_min: float = math.nan
    stationarity: float = math.nan
    boundary_flag: bool = False
    multi_min_flag: bool = False
    skipped_grid_points: int = 0
    nuisance_summaries: list = field(default_factory=list)


def default_search_interval(
    rd: ResidualData, grid_points: int = 201, refine_tol: float = 1e-9
) -> SearchInterval:
    """TSLS-anchored default interval: estimate +- 10 naive standard errors,
    clipped to [-50, 50]. Falls back to the full cap when TSLS itself fails."""
    try:
        rep = estimate_tsls(rd)
        from .inference import tsls_variance  # local import to avoid a cycle

        _, se = tsls_variance(rd, rep.beta_hat)
        lo = max(-HARD_CAP, rep.beta_hat - 10.0 * se)
        hi = min(HARD_CAP, rep.beta_hat + 10.0 * se)
        if not (lo < hi):
            lo, hi = -HARD_CAP, HARD_CAP
    except Exception:
        lo, hi = -HARD_CAP, HARD_CAP
    return SearchInterval(lo=lo, hi=hi, grid_points=grid_points, refine_tol=refine_tol)


def _grid_local_minima(grid: np.ndarray, vals: np.ndarray) -> list[tuple[float, float]]:
    """(beta, value) pairs at grid points not exceeded by either neighbor.

    NaN entries (skipped singular points) are treated as +inf.
    """
    v = np.where(np.isfinite(vals), vals, np.inf)
    out = []
    for i in range(len(grid)):
        left = v[i - 1] if i > 0 else np.inf
        right = v[i + 1] if i < len(grid) - 1 else np.inf
        if v[i] < np.inf and v[i] <= left and v[i] <= right:
            out.append((float(grid[i]), float(v[i])))
    return out


def estimate_cue(ms: MomentSystem, interval: SearchInterval | None = None) -> EstimateReport:
    """Minimize the continuously-updated objective over a compact interval.

    The objective is evaluated on an evenly spaced grid; isolated points
    where the weighting matrix is singular are skipped and counted. The best
    grid point is then refined by bounded Brent minimization (golden section
    with parabolic steps) to ``refine_tol``.

    Parameters
    ----------
    ms : MomentSystem
    interval : SearchInterval, optional
        Defaults to the TSLS-anchored interval of
        :func:`default_search_interval`.

    Returns
    -------
    EstimateReport
        With the objective value, |gradient| at the minimizer, and boundary
        / multiple-minimum flags.
    """
    if interval is None:
        interval = default_search_interval(ms.rd)

    grid = np.linspace(interval.lo, interval.hi, interval.grid_points)
    vals = np.empty_like(grid)
    skipped = 0
    for i, b in enumerate(grid):
        try:
            vals[i] = q_hat(ms, b)
        except SingularWeightingError:
            vals[i] = np.nan
            skipped += 1
    finite = np.isfinite(vals)
    if not finite.any():
        raise EstimationError(
            "objective not evaluable anywhere on the search grid "
            f"[{interval.lo}, {interval.hi}] ({skipped} singular points)"
        )

    best = int(np.nanargmin(vals))
    lo_br = grid[max(best - 1, 0)]
    hi_br = grid[min(best + 1, len(grid) - 1)]

    def safe_q(b):
        try:
            return q_hat(ms, b)
        except SingularWeightingError:
            return np.inf

    res = optimize.minimize_scalar(
        safe_q,
        bounds=(lo_br, hi_br),
        method="bounded",
        options={"xatol": interval.refine_tol},
    )
    beta_hat = float(res.x)
    obj = float(res.fun)
    if not math.isfinite(obj) or obj > vals[best]:
        # refinement failed to improve on the grid point; keep the grid point
        beta_hat, obj = float(grid[best]), float(vals[best])

    try:
        stat = abs(dq_dbeta(ms, beta_hat))
    except SingularWeightingError:
        stat = math.nan

    boundary = (
        beta_hat - interval.lo <= 10.0 * interval.refine_tol
        or interval.hi - beta_hat <= 10.0 * interval.refine_tol
    )

    minima = sorted(_grid_local_minima(grid, vals), key=lambda t: t[1])
    multi = False
    if len(minima) >= 2:
        (b0, v0), (b1, v1) = minima[0], minima[1]
        if v1 - v0 < 1e-3 and abs(b1 - b0) > 10.0 * interval.refine_tol:
            multi = True

    return EstimateReport(
        beta_hat=beta_hat,
        method="cue",
        objective_at_min=obj,
        stationarity=stat,
        boundary_flag=boundary,
        multi_min_flag=multi,
        skipped_grid_points=skipped,
    )


def estimate_tsls(rd: ResidualData) -> EstimateReport:
    """Two-stage least squares on residualized data.

    Projects the treatment on the instruments and forms the ratio
    ``(proj'y) / (proj'd)``; all solves are least squares, no explicit
    inverse.
    """
    zb, db, yb = rd.z_bar, rd.d_bar, rd.y_bar
    coef, _, rank, _ = np.linalg.lstsq(zb, db, rcond=None)
    if rank < rd.m:
        raise EstimationError(
            f"instrument cross-product is singular (rank {rank} < m={rd.m})"
        )
    proj = zb @ coef
    denom = float(proj @ proj)
    scale = float(db @ db)
    if denom <= 1e-12 * max(scale, 1e-300):
        raise EstimationError("zero first stage: treatment projection on instruments vanishes")
    beta = float(proj @ yb) / denom
    return EstimateReport(beta_hat=beta, method="tsls")


def estimate_gmm_identity(ms: MomentSystem, two_step: bool = False) -> EstimateReport:
    """Identity-weighted GMM for the linear moment, in closed form.

    With ``two_step=True`` a second step re-minimizes under the inverse
    weighting matrix evaluated at the first-step estimate (also closed form
    for a moment affine in beta). The default single step matches the usual
    "identity weighting" benchmark.
    """
    szd, szy = ms.szd, ms.szy
    denom = float(szd @ szd)
    if denom <= 0.0 or not math.isfinite(denom):
        raise EstimationError("identity-GMM undefined: mean instrument-treatment moment is zero")
    beta1 = float(szd @ szy) / denom
    if not two_step:
        return EstimateReport(beta_hat=beta1, method="gmm_identity")
    w = omega_hat(ms, beta1)
    u = w.solve(szd)
    denom2 = float(u @ szd)
    if denom2 <= 0.0:
        raise EstimationError("second-step GMM undefined: weighted moment derivative vanishes")
    beta2 = float(u @ szy) / denom2
    return EstimateReport(beta_hat=beta2, method="gmm_two_step")


def residualize_with_truth(ds: Dataset, truth) -> ResidualData:
    """Residualize using true regression functions, without cross-fitting."""
    alpha = np.asarray(truth.alpha0(ds.x), dtype=float)
    if alpha.ndim == 1:
        alpha = np.repeat(alpha[:, None], ds.m, axis=1)
    return ResidualData(
        y_bar=ds.y - np.asarray(truth.ell0(ds.x), dtype=float).reshape(-1),
        d_bar=ds.d - np.asarray(truth.r0(ds.x), dtype=float).reshape(-1),
        z_bar=ds.z - alpha,
        fold_of=np.full(ds.n, -1, dtype=np.intp),
    )


def estimate_oracle(
    ds: Dataset,
    truth,
    method: str = "cue",
    interval: SearchInterval | None = None,
    two_step: bool = False,
) -> EstimateReport:
    """Benchmark estimator with access to the true regression functions.

    ``truth`` must expose ``ell0(x)``, ``r0(x)`` and ``alpha0(x)`` evaluable
    on the full covariate matrix. No cross-fitting is involved.

    Parameters
    ----------
    method : {"cue", "gmm"}
        Which estimator to run on the truth-residualized data.
    """
    rd = residualize_with_truth(ds, truth)
    ms = MomentSystem(rd)
    if method == "cue":
        rep = estimate_cue(ms, interval)
        rep.method = "oracle_cue"
    elif method == "gmm":
        rep = estimate_gmm_identity(ms, two_step=two_step)
        rep.method = "oracle_gmm"
    else:
        raise ConfigError(f"unknown oracle method {method!r}; expected 'cue' or 'gmm'")
    return rep
