"""First-step nuisance learners and the cross-fitting engine.

Cross-fitting estimates three covariate regressions — the outcome
regression, the treatment regression and one regression per instrument
column — on the complement of each fold and applies the predictions only
inside that fold. Four learner kinds are provided:

* ``linear`` — OLS with an automatic tiny-ridge fallback on rank-deficient
  designs,
* ``ridge`` — L2-penalized regression with the penalty chosen by
  generalized cross-validation,
* ``lasso`` — cyclic coordinate descent with soft-thresholding over a
  geometric penalty path, penalty chosen by internal V-fold
  cross-validation,
* ``spline-additive`` — per-covariate cubic B-spline blocks with a
  second-difference penalty, one shared smoothing multiplier chosen by GCV,
* ``oracle`` — evaluates user-supplied true regression functions
  (benchmarking only; no training happens).

Because all regressions within a fold share the same training covariates,
the heavy pieces (design matrices, Gram matrices, factorizations) are
built once per fold and reused across targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import linalg
from scipy.interpolate import BSpline

from .data import Dataset, FoldPartition, ResidualData
from .errors import ConfigError, ConvergenceError, DataError, EstimationError

__all__ = [
    "LearnerSpec",
    "NuisanceFit",
    "fit_linear",
    "fit_ridge",
    "fit_lasso",
    "fit_spline_additive",
    "cross_fit",
    "linear_partial_out",
]

LEARNER_KINDS = ("linear", "ridge", "lasso", "spline-additive", "oracle")


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration of a first-step learner.

    Only the fields relevant to ``kind`` are consulted. ``seed`` drives the
    internal cross-validation fold assignment of the lasso; all other
    learners are deterministic.
    """

    kind: str = "linear"
    # lasso
    lambda_grid: tuple[float, ...] | None = None
    n_lambda: int = 100
    cv_folds: int = 10
    max_sweeps: int = 10_000
    tol: float = 1e-7
    # spline-additive
    knots: int = 10
    gcv_lo: float = 1e-6
    gcv_hi: float = 1e4
    gcv_points: int = 30
    # ridge
    ridge_points: int = 50
    # selection + OLS refit on the selected support (lasso only)
    post_ols: bool = False
    # oracle
    truth: object = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}; expected one of {LEARNER_KINDS}")
        if self.lambda_grid is not None:
            object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
            if len(self.lambda_grid) == 0:
                raise ConfigError("lambda_grid must be non-empty when given")
        if self.n_lambda < 1:
            raise ConfigError("n_lambda must be >= 1")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if self.max_sweeps < 1 or self.tol <= 0:
            raise ConfigError("max_sweeps must be >= 1 and tol > 0")
        if self.knots < 1:
            raise ConfigError("knots must be >= 1")
        if not (0 < self.gcv_lo < self.gcv_hi) or self.gcv_points < 1:
            raise ConfigError("need 0 < gcv_lo < gcv_hi and gcv_points >= 1")
        if self.ridge_points < 1:
            raise ConfigError("ridge_points must be >= 1")
        if self.kind == "oracle":
            for attr in ("ell0", "r0", "alpha0"):
                if not callable(getattr(self.truth, attr, None)):
                    raise ConfigError(f"oracle learner needs truth with callable {attr!r}")

    @classmethod
    def linear(cls) -> "LearnerSpec":
        return cls(kind="linear")

    @classmethod
    def ridge(cls, **kw) -> "LearnerSpec":
        return cls(kind="ridge", **kw)

    @classmethod
    def lasso(cls, **kw) -> "LearnerSpec":
        return cls(kind="lasso", **kw)

    @classmethod
    def spline(cls, **kw) -> "LearnerSpec":
        return cls(kind="spline-additive", **kw)

    @classmethod
    def oracle(cls, truth) -> "LearnerSpec":
        return cls(kind="oracle", truth=truth)


@dataclass(frozen=True)
class NuisanceFit:
    """Out-of-fold predictions of the three covariate regressions.

    ``summaries`` carries one dict per (fold, target) describing the fitted
    model (selected penalties, basis sizes, fallbacks).
    """

    ell_hat: np.ndarray
    r_hat: np.ndarray
    alpha_hat: np.ndarray
    summaries: tuple = ()

    def __post_init__(self):
        ell = np.asarray(self.ell_hat, dtype=float).reshape(-1)
        r = np.asarray(self.r_hat, dtype=float).reshape(-1)
        alpha = np.asarray(self.alpha_hat, dtype=float)
        if alpha.ndim == 1:
            alpha = alpha.reshape(-1, 1)
        for name, arr in (("ell_hat", ell), ("r_hat", r), ("alpha_hat", alpha)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite prediction in {name}")
        if r.shape[0] != ell.shape[0] or alpha.shape[0] != ell.shape[0]:
            raise DataError("nuisance predictions disagree on n")
        object.__setattr__(self, "ell_hat", ell)
        object.__setattr__(self, "r_hat", r)
        object.__setattr__(self, "alpha_hat", alpha)
        object.__setattr__(self, "summaries", tuple(self.summaries))


# ---------------------------------------------------------------------------
# linear / ridge


class ConstantModel:
    """Prediction by the training-sample mean (used whenever p = 0)."""

    def __init__(self, mean: float):
        self.mean_ = float(mean)

    def predict(self, X) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.mean_)

    def summary(self) -> dict:
        return {"kind": "constant", "mean": self.mean_}


class LinearModel:
    """OLS with intercept; falls back to a trace-scaled ridge on
    rank-deficient designs."""

    def __init__(self, coef: np.ndarray, ridge_fallback: bool, ridge_penalty: float = 0.0):
        self.coef_ = np.asarray(coef, dtype=float)  # [intercept, slopes...]
        self.ridge_fallback_ = bool(ridge_fallback)
        self.ridge_penalty_ = float(ridge_penalty)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.coef_[0] + X @ self.coef_[1:]

    def summary(self) -> dict:
        out = {"kind": "linear", "ridge_fallback": self.ridge_fallback_}
        if self.ridge_fallback_:
            out["ridge_penalty"] = self.ridge_penalty_
        return out


def _fit_linear_multi(X: np.ndarray, T: np.ndarray) -> list:
    n, p = X.shape
    if p == 0:
        return [ConstantModel(T[:, j].mean()) for j in range(T.shape[1])]
    A = np.column_stack([np.ones(n), X])
    ncol = A.shape[1]
    coef, _, rank, _ = np.linalg.lstsq(A, T, rcond=None)
    if rank == ncol:
        return [LinearModel(coef[:, j], ridge_fallback=False) for j in range(T.shape[1])]
    # rank-deficient design: tiny ridge keeps predictions finite and stable
    ata = A.T @ A
    delta = 1e-8 * np.trace(ata) / ncol
    coef = linalg.solve(ata + delta * np.eye(ncol), A.T @ T, assume_a="pos")
    return [
        LinearModel(coef[:, j], ridge_fallback=True, ridge_penalty=delta)
        for j in range(T.shape[1])
    ]


def fit_linear(X: np.ndarray, t: np.ndarray) -> LinearModel | ConstantModel:
    """Ordinary least squares of ``t`` on ``X`` with an intercept.

    Rank-deficient designs automatically switch to a ridge with penalty
    ``1e-8 * trace(A'A) / ncol``, recorded in the model summary.
    """
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float).reshape(-1)
    return _fit_linear_multi(X, t[:, None])[0]


class RidgeModel:
    """Standardized ridge regression with a GCV-selected penalty."""

    def __init__(self, x_mean, x_scale, keep, coef_std, intercept, penalty, edf):
        self.x_mean_ = x_mean
        self.x_scale_ = x_scale
        self.keep_ = keep
        self.coef_std_ = coef_std
        self.intercept_ = float(intercept)
        self.penalty_ = float(penalty)
        self.edf_ = float(edf)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)[:, self.keep_]
        Xs = (X - self.x_mean_) / self.x_scale_
        return self.intercept_ + Xs @ self.coef_std_

    def summary(self) -> dict:
        return {"kind": "ridge", "penalty": self.penalty_, "edf": self.edf_}


def _fit_ridge_multi(X: np.ndarray, T: np.ndarray, n_grid: int = 50) -> list:
    n, p = X.shape
    if p == 0:
        return [ConstantModel(T[:, j].mean()) for j in range(T.shape[1])]
    xm_all = X.mean(axis=0)
    xs_all = X.std(axis=0)
    keep = xs_all > 0
    if not keep.any():
        return [ConstantModel(T[:, j].mean()) for j in range(T.shape[1])]
    xm, xs = xm_all[keep], xs_all[keep]
    Xs = (X[:, keep] - xm) / xs
    pk = Xs.shape[1]
    evals, evecs = np.linalg.eigh(Xs.T @ Xs)
    evals = np.clip(evals, 0.0, None)
    grid = n * np.geomspace(1e-8, 1e4, n_grid)

    models = []
    tmeans = T.mean(axis=0)
    Tc = T - tmeans
    XtT = evecs.T @ (Xs.T @ Tc)  # rotated cross-moments, shared across the grid
    for j in range(T.shape[1]):
        best = (np.inf, None, None, None)
        for lam in grid:
            shrink = 1.0 / (evals + lam)
            w = XtT[:, j] * shrink
            fitted = Xs @ (evecs @ w)
            rss = float(np.sum((Tc[:, j] - fitted) ** 2))
            edf = 1.0 + float(np.sum(evals * shrink))
            denom = n - edf
            gcv = n * rss / (denom * denom) if denom > 0 else np.inf
            if gcv < best[0]:
                best = (gcv, lam, evecs @ w, edf)
        _, lam, coef, edf = best
        models.append(RidgeModel(xm, xs, keep, coef, tmeans[j], lam, edf))
    return models


def fit_ridge(X: np.ndarray, t: np.ndarray, n_grid: int = 50) -> RidgeModel | ConstantModel:
    """Ridge regression with intercept; penalty selected by GCV over a
    geometric grid. Columns are standardized internally, so predictions are
    invariant to affine rescaling of any covariate."""
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float).reshape(-1)
    return _fit_ridge_multi(X, t[:, None], n_grid=n_grid)[0]


# ---------------------------------------------------------------------------
# lasso


@njit(cache=True)
def _cd_path(gram, xty, lambdas, tol, max_sweeps):  # pragma: no cover - jitted
    """Cyclic coordinate descent over a penalty path with warm starts.

    ``gram`` = X'X/n and ``xty`` = X'y/n for a standardized, centered
    design. Returns the coefficient path, sweeps used per penalty, and a
    per-penalty convergence flag. Convergence requires a full sweep whose
    largest coefficient change is below ``tol``; between full sweeps only
    the active set is iterated.
    """
    p = gram.shape[0]
    L = lambdas.shape[0]
    coefs = np.zeros((L, p))
    sweeps_used = np.zeros(L, np.int64)
    converged = np.zeros(L, np.bool_)
    b = np.zeros(p)
    q = xty.copy()
    active = np.zeros(p, np.bool_)

    for li in range(L):
        lam = lambdas[li]
        sweeps = 0
        done = False
        while sweeps < max_sweeps:
            # full pass over all coordinates
            sweeps += 1
            dmax = 0.0
            for j in range(p):
                gjj = gram[j, j]
                if gjj <= 0.0:
                    continue
                z = b[j] * gjj + q[j]
                if z > lam:
                    bn = (z - lam) / gjj
                elif z < -lam:
                    bn = (z + lam) / gjj
                else:
                    bn = 0.0
                d = bn - b[j]
                if d != 0.0:
                    b[j] = bn
                    for k in range(p):
                        q[k] -= d * gram[k, j]
                    if abs(d) > dmax:
                        dmax = abs(d)
                active[j] = b[j] != 0.0
            if dmax < tol:
                done = True
                break
            # active-set passes until stable, then re-check with a full pass
            while sweeps < max_sweeps:
                sweeps += 1
                dmax = 0.0
                for j in range(p):
                    if not active[j]:
                        continue
                    gjj = gram[j, j]
                    if gjj <= 0.0:
                        continue
                    z = b[j] * gjj + q[j]
                    if z > lam:
                        bn = (z - lam) / gjj
                    elif z < -lam:
                        bn = (z + lam) / gjj
                    else:
                        bn = 0.0
                    d = bn - b[j]
                    if d != 0.0:
                        b[j] = bn
                        for k in range(p):
                            q[k] -= d * gram[k, j]
                        if abs(d) > dmax:
                            dmax = abs(d)
                    active[j] = b[j] != 0.0
                if dmax < tol:
                    break
        converged[li] = done
        sweeps_used[li] = sweeps
        coefs[li, :] = b
    return coefs, sweeps_used, converged


class LassoModel:
    """L1-penalized linear model on internally standardized columns.

    ``coef_std_`` lives on the standardized scale; ``predict`` undoes the
    standardization. ``x_mean_``, ``x_scale_`` and ``keep_`` expose the
    transform so optimality conditions can be checked externally.

    When built with a post-selection refit, ``refit_coef_std_`` holds OLS
    coefficients on the selected support and drives ``predict`` instead of
    the shrunken path solution (which stays available in ``coef_std_``).
    """

    def __init__(self, x_mean, x_scale, keep, coef_std, intercept, lam, lambda_grid,
                 cv_errors, sweeps, n_cv_folds, refit_coef_std=None, refit_intercept=None):
        self.x_mean_ = x_mean
        self.x_scale_ = x_scale
        self.keep_ = keep
        self.coef_std_ = coef_std
        self.intercept_ = float(intercept)
        self.lambda_ = float(lam)
        self.lambda_grid_ = lambda_grid
        self.cv_errors_ = cv_errors
        self.sweeps_ = int(sweeps)
        self.n_cv_folds_ = int(n_cv_folds)
        self.refit_coef_std_ = refit_coef_std
        self.refit_intercept_ = refit_intercept

    @property
    def coef_(self) -> np.ndarray:
        """Slopes on the original covariate scale (zeros for dropped columns)."""
        out = np.zeros(self.keep_.shape[0])
        out[self.keep_] = self.coef_std_ / self.x_scale_
        return out

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)[:, self.keep_]
        Xs = (X - self.x_mean_) / self.x_scale_
        if self.refit_coef_std_ is not None:
            return self.refit_intercept_ + Xs @ self.refit_coef_std_
        return self.intercept_ + Xs @ self.coef_std_

    def summary(self) -> dict:
        return {
            "kind": "lasso",
            "lambda": self.lambda_,
            "n_active": int(np.count_nonzero(self.coef_std_)),
            "cv_folds": self.n_cv_folds_,
            "sweeps": self.sweeps_,
            "post_ols": self.refit_coef_std_ is not None,
        }


def _standardize(X: np.ndarray):
    xm = X.mean(axis=0)
    xs = X.std(axis=0)
    xs_safe = np.where(xs > 0, xs, 1.0)
    return (X - xm) / xs_safe, xm, xs_safe


def _run_path(gram, xty, grid, tol, max_sweeps, label):
    coefs, sweeps, ok = _cd_path(gram, xty, grid, tol, max_sweeps)
    if not ok.all():
        bad = float(grid[int(np.argmin(ok))])
        raise ConvergenceError(
            f"coordinate descent did not converge within {max_sweeps} sweeps "
            f"at penalty {bad:.6g} ({label})",
            penalty=bad,
        )
    return coefs, sweeps


def _fit_lasso_multi(
    X: np.ndarray,
    T: np.ndarray,
    names: list[str] | None = None,
    lambda_grid=None,
    n_lambda: int = 100,
    cv_folds: int = 10,
    max_sweeps: int = 10_000,
    tol: float = 1e-7,
    seed=0,
    post_ols: bool = False,
) -> list:
    n, p = X.shape
    q = T.shape[1]
    if names is None:
        names = [f"target_{j}" for j in range(q)]
    if p == 0:
        return [ConstantModel(T[:, j].mean()) for j in range(q)]

    xs_all = X.std(axis=0)
    keep = xs_all > 0  # constant columns carry no signal beyond the intercept
    if not keep.any():
        return [ConstantModel(T[:, j].mean()) for j in range(q)]
    Xk = X[:, keep]
    Xs, xm, xs = _standardize(Xk)
    tmeans = T.mean(axis=0)
    Tc = T - tmeans

    xty_full = Xs.T @ Tc / n  # (pk, q)
    if lambda_grid is not None:
        grids = [np.asarray(lambda_grid, dtype=float)] * q
    else:
        grids = []
        for j in range(q):
            lam_max = float(np.max(np.abs(xty_full[:, j])))
            if lam_max <= 0.0:
                grids.append(np.array([0.0]))
            else:
                grids.append(np.geomspace(lam_max, lam_max * 1e-4, n_lambda))

    # cross-validated penalty choice, folds shared across targets
    lam_idx = np.zeros(q, dtype=int)
    cv_errors = [None] * q
    v = 0
    if any(len(g) > 1 for g in grids):
        v = max(2, min(cv_folds, n // 2))
        rng = np.random.default_rng(seed)
        assign = np.array_split(rng.permutation(n), v)
        cv_sq = [np.zeros(len(g)) for g in grids]
        cv_tol = max(tol, 1e-5)  # selection only compares held-out errors
        for test in assign:
            mask = np.ones(n, dtype=bool)
            mask[test] = False
            Xtr = Xk[mask]
            ntr = Xtr.shape[0]
            Xs_tr, xm_tr, xs_tr = _standardize(Xtr)
            gram = Xs_tr.T @ Xs_tr / ntr
            Xs_te = (Xk[test] - xm_tr) / xs_tr
            for j in range(q):
                if len(grids[j]) < 2:
                    continue
                tj = T[mask, j]
                tm = tj.mean()
                xty = Xs_tr.T @ (tj - tm) / ntr
                coefs, _ = _run_path(gram, xty, grids[j], cv_tol, max_sweeps,
                                     f"cv fold, target {names[j]}")
                pred = tm + Xs_te @ coefs.T
                cv_sq[j] += np.sum((T[test, j][:, None] - pred) ** 2, axis=0)
        for j in range(q):
            if len(grids[j]) > 1:
                cv_errors[j] = cv_sq[j] / n
                lam_idx[j] = int(np.argmin(cv_errors[j]))

    # final fit on all data, warm-started along the same grid
    gram = Xs.T @ Xs / n
    models = []
    for j in range(q):
        coefs, sweeps = _run_path(gram, xty_full[:, j], grids[j], tol, max_sweeps,
                                  f"final fit, target {names[j]}")
        li = lam_idx[j]
        coef_sel = coefs[li].copy()
        refit_coef = refit_int = None
        if post_ols:
            # OLS on the selected support removes the shrinkage from the
            # predictions; selection stays penalty-driven
            support = np.nonzero(coef_sel)[0]
            refit_coef = np.zeros_like(coef_sel)
            refit_int = tmeans[j]
            if 0 < support.size < n - 1:
                A = np.column_stack([np.ones(n), Xs[:, support]])
                sol, _, _, _ = np.linalg.lstsq(A, T[:, j], rcond=None)
                refit_int = float(sol[0])
                refit_coef[support] = sol[1:]
        models.append(
            LassoModel(
                x_mean=xm, x_scale=xs, keep=keep,
                coef_std=coef_sel,
                intercept=tmeans[j],
                lam=grids[j][li],
                lambda_grid=grids[j],
                cv_errors=cv_errors[j],
                sweeps=int(sweeps[li]),
                n_cv_folds=v,
                refit_coef_std=refit_coef,
                refit_intercept=refit_int,
            )
        )
    return models


def fit_lasso(
    X: np.ndarray,
    t: np.ndarray,
    lambda_grid=None,
    n_lambda: int = 100,
    cv_folds: int = 10,
    max_sweeps: int = 10_000,
    tol: float = 1e-7,
    seed=0,
) -> LassoModel | ConstantModel:
    """L1-penalized regression by cyclic coordinate descent.

    Minimizes ``(1/2n) ||t - b0 - X b||^2 + lam ||b||_1`` on internally
    standardized columns (centered, unit sample standard deviation;
    constant columns are dropped). The penalty is chosen by ``cv_folds``-fold
    cross-validation minimizing held-out squared error over a geometric
    grid of ``n_lambda`` values from ``lam_max = max_j |X_j'(t - mean t)| / n``
    down to ``lam_max * 1e-4``, with warm starts along the grid.

    Parameters
    ----------
    lambda_grid : sequence of float, optional
        Overrides the automatic grid (no cross-validation when it has a
        single value).
    seed : int or sequence
        Seeds the internal cross-validation fold assignment.

    Raises
    ------
    ConvergenceError
        If a path point fails to converge within ``max_sweeps`` full
        sweeps; the error carries the penalty at fault.
    """
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float).reshape(-1)
    if X.shape[1] < 1:
        raise ConfigError("lasso needs at least one covariate column")
    return _fit_lasso_multi(
        X, t[:, None], names=["t"], lambda_grid=lambda_grid, n_lambda=n_lambda,
        cv_folds=cv_folds, max_sweeps=max_sweeps, tol=tol, seed=seed,
    )[0]


# ---------------------------------------------------------------------------
# additive penalized B-splines


def _second_diff_penalty(m: int) -> np.ndarray:
    if m < 3:
        return np.zeros((m, m))
    D = np.zeros((m - 2, m))
    for i in range(m - 2):
        D[i, i], D[i, i + 1], D[i, i + 2] = 1.0, -2.0, 1.0
    return D.T @ D


def _constraint_basis(w: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the null space of the row vector ``w``."""
    m = w.shape[0]
    _, _, vt = np.linalg.svd(w.reshape(1, -1))
    return vt[1:].T.reshape(m, m - 1)


class _SplineBlock:
    """Basis and penalty ingredients for one covariate."""

    def __init__(self, kind, lo=0.0, hi=0.0, knot_vec=None, Zc=None, mean=0.0,
                 penalty=None, width=0, note=None):
        self.kind = kind  # "spline" | "linear" | "skip"
        self.lo = lo
        self.hi = hi
        self.knot_vec = knot_vec
        self.Zc = Zc
        self.mean = mean
        self.penalty = penalty
        self.width = width
        self.note = note

    def design(self, xj: np.ndarray) -> np.ndarray:
        if self.kind == "skip":
            return np.empty((xj.shape[0], 0))
        if self.kind == "linear":
            return (xj - self.mean)[:, None]
        xc = np.clip(xj, self.lo, self.hi)
        B = BSpline.design_matrix(xc, self.knot_vec, 3).toarray()
        return B @ self.Zc


def _build_blocks(X: np.ndarray, n_knots: int) -> tuple[list[_SplineBlock], list[str]]:
    notes = []
    blocks = []
    for j in range(X.shape[1]):
        xj = X[:, j]
        uniq = np.unique(xj)
        if uniq.size < 2:
            blocks.append(_SplineBlock("skip", note="constant column"))
            notes.append(f"covariate {j}: constant, dropped")
            continue
        kj = n_knots
        if uniq.size - 1 < kj:
            kj = uniq.size - 1
            notes.append(f"covariate {j}: knots reduced to {kj} (few distinct values)")
        lo, hi = float(xj.min()), float(xj.max())
        qs = np.quantile(xj, np.linspace(0.0, 1.0, kj + 2)[1:-1])
        interior = np.unique(qs)
        interior = interior[(interior > lo) & (interior < hi)]
        if interior.size < 1:
            blocks.append(_SplineBlock("linear", mean=float(xj.mean()),
                                       penalty=np.zeros((1, 1)), width=1,
                                       note="entered linearly"))
            notes.append(f"covariate {j}: entered linearly (no interior knots)")
            continue
        knot_vec = np.concatenate([[lo] * 4, interior, [hi] * 4])
        nb = interior.size + 4
        B = BSpline.design_matrix(xj, knot_vec, 3).toarray()
        Zc = _constraint_basis(B.mean(axis=0))
        S = Zc.T @ _second_diff_penalty(nb) @ Zc
        Bt = B @ Zc
        tr_s = np.trace(S)
        scale = float(np.sum(Bt * Bt)) / tr_s if tr_s > 0 else 0.0
        blocks.append(
            _SplineBlock("spline", lo=lo, hi=hi, knot_vec=knot_vec, Zc=Zc,
                         penalty=scale * S, width=nb - 1)
        )
    return blocks, notes


class SplineAdditiveModel:
    """Additive penalized B-spline model for one target."""

    def __init__(self, blocks, coef, multiplier, edf, notes):
        self.blocks_ = blocks
        self.coef_ = coef  # [intercept, block coefficients...]
        self.multiplier_ = float(multiplier)
        self.edf_ = float(edf)
        self.notes_ = list(notes)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.coef_[0])
        ofs = 1
        for j, blk in enumerate(self.blocks_):
            if blk.kind == "skip":
                continue
            Fj = blk.design(X[:, j])
            out += Fj @ self.coef_[ofs : ofs + blk.width]
            ofs += blk.width
        return out

    def summary(self) -> dict:
        out = {
            "kind": "spline-additive",
            "multiplier": self.multiplier_,
            "edf": self.edf_,
            "basis_sizes": [blk.width for blk in self.blocks_ if blk.kind != "skip"],
        }
        if self.notes_:
            out["notes"] = list(self.notes_)
        return out


def _fit_spline_multi(
    X: np.ndarray,
    T: np.ndarray,
    n_knots: int = 10,
    gcv_lo: float = 1e-6,
    gcv_hi: float = 1e4,
    gcv_points: int = 30,
) -> list:
    n, p = X.shape
    q = T.shape[1]
    if p == 0:
        return [ConstantModel(T[:, j].mean()) for j in range(q)]
    blocks, notes = _build_blocks(X, n_knots)
    if all(blk.kind == "skip" for blk in blocks):
        return [ConstantModel(T[:, j].mean()) for j in range(q)]

    parts = [np.ones((n, 1))]
    pens = [np.zeros((1, 1))]
    for j, blk in enumerate(blocks):
        if blk.kind == "skip":
            continue
        parts.append(blk.design(X[:, j]))
        pens.append(blk.penalty)
    F = np.hstack(parts)
    S = linalg.block_diag(*pens)
    M = F.shape[1]

    FtF = F.T @ F
    FtT = F.T @ T
    tt = np.sum(T * T, axis=0)
    lambdas = np.geomspace(gcv_lo, gcv_hi, gcv_points)

    thetas = np.empty((len(lambdas), M, q))
    gcvs = np.full((len(lambdas), q), np.inf)
    edfs = np.full(len(lambdas), np.nan)
    any_ok = False
    for li, lam in enumerate(lambdas):
        A = FtF + lam * S
        try:
            cf = linalg.cho_factor(A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        any_ok = True
        theta = linalg.cho_solve(cf, FtT, check_finite=False)
        thetas[li] = theta
        edf = float(np.trace(linalg.cho_solve(cf, FtF, check_finite=False)))
        edfs[li] = edf
        # rss via cached cross-moments; clamp tiny negatives from cancellation
        rss = np.maximum(tt - 2.0 * np.sum(theta * FtT, axis=0)
                         + np.sum(theta * (FtF @ theta), axis=0), 0.0)
        denom = n - edf
        if denom > 0:
            gcvs[li] = n * rss / (denom * denom)
    if not any_ok:
        raise EstimationError("all smoothing-grid fits are singular; GCV grid degenerate")

    models = []
    for j in range(q):
        li = int(np.argmin(gcvs[:, j]))
        if not np.isfinite(gcvs[li, j]):
            raise EstimationError("no valid smoothing multiplier found")
        models.append(
            SplineAdditiveModel(blocks, thetas[li][:, j].copy(), lambdas[li], edfs[li], notes)
        )
    return models


def fit_spline_additive(
    X: np.ndarray,
    t: np.ndarray,
    knots: int = 10,
    gcv_lo: float = 1e-6,
    gcv_hi: float = 1e4,
    gcv_points: int = 30,
) -> SplineAdditiveModel | ConstantModel:
    """Additive model with a penalized cubic B-spline block per covariate.

    Each block uses interior knots at equally spaced quantiles and is
    identified by a centering constraint; roughness is penalized through
    second differences of the block coefficients. One shared smoothing
    multiplier, scaled per block by the penalty-matrix trace, is selected
    by generalized cross-validation over a geometric grid.

    Covariates with too few distinct values get a reduced knot count (noted
    in the model summary) or enter linearly.
    """
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float).reshape(-1)
    if X.shape[1] < 1:
        raise ConfigError("spline learner needs at least one covariate column")
    return _fit_spline_multi(X, t[:, None], n_knots=knots, gcv_lo=gcv_lo,
                             gcv_hi=gcv_hi, gcv_points=gcv_points)[0]


# ---------------------------------------------------------------------------
# cross-fitting


def _fit_targets(X: np.ndarray, T: np.ndarray, names: list[str], spec: LearnerSpec, seed):
    if spec.kind == "linear":
        return _fit_linear_multi(X, T)
    if spec.kind == "ridge":
        return _fit_ridge_multi(X, T, n_grid=spec.ridge_points)
    if spec.kind == "lasso":
        return _fit_lasso_multi(
            X, T, names=names, lambda_grid=spec.lambda_grid, n_lambda=spec.n_lambda,
            cv_folds=spec.cv_folds, max_sweeps=spec.max_sweeps, tol=spec.tol, seed=seed,
            post_ols=spec.post_ols,
        )
    if spec.kind == "spline-additive":
        return _fit_spline_multi(
            X, T, n_knots=spec.knots, gcv_lo=spec.gcv_lo, gcv_hi=spec.gcv_hi,
            gcv_points=spec.gcv_points,
        )
    raise ConfigError(f"cannot train learner kind {spec.kind!r}")


def _target_names(m: int) -> list[str]:
    return ["outcome", "treatment"] + [f"instrument_{j + 1}" for j in range(m)]


def cross_fit(ds: Dataset, folds: FoldPartition, spec: LearnerSpec, seed=None) -> NuisanceFit:
    """Produce out-of-fold predictions of all 2 + m covariate regressions.

    For each fold the learner is trained on the complement (one model per
    target: outcome, treatment, and each instrument column) and evaluated
    on the held-out fold only. The oracle learner skips training and
    evaluates the supplied true functions everywhere.

    Parameters
    ----------
    ds : Dataset
    folds : FoldPartition
    spec : LearnerSpec
    seed : optional
        Overrides ``spec.seed`` for learner-internal randomness.

    Returns
    -------
    NuisanceFit
        With per-(fold, target) model summaries for diagnostics.
    """
    if folds.n != ds.n:
        raise DataError(f"fold partition over n={folds.n} does not match dataset n={ds.n}")
    if spec.kind == "oracle":
        truth = spec.truth
        alpha = np.asarray(truth.alpha0(ds.x), dtype=float)
        if alpha.ndim == 1:
            alpha = np.repeat(alpha[:, None], ds.m, axis=1)
        return NuisanceFit(
            ell_hat=np.asarray(truth.ell0(ds.x), dtype=float).reshape(-1),
            r_hat=np.asarray(truth.r0(ds.x), dtype=float).reshape(-1),
            alpha_hat=alpha,
            summaries=({"fold": None, "target": "all", "kind": "oracle"},),
        )

    base_seed = spec.seed if seed is None else seed
    names = _target_names(ds.m)
    ell = np.empty(ds.n)
    r = np.empty(ds.n)
    alpha = np.empty((ds.n, ds.m))
    summaries = []
    for k in range(folds.K):
        tr = folds.complement(k)
        te = folds.folds[k]
        T = np.column_stack([ds.y[tr], ds.d[tr], ds.z[tr]])
        try:
            models = _fit_targets(ds.x[tr], T, names, spec, seed=(base_seed, k))
        except ConvergenceError as e:
            raise ConvergenceError(f"fold {k}: {e}", penalty=e.penalty) from e
        except (EstimationError, DataError) as e:
            raise type(e)(f"fold {k}: {e}") from e
        Xte = ds.x[te]
        ell[te] = models[0].predict(Xte)
        r[te] = models[1].predict(Xte)
        for j in range(ds.m):
            alpha[te, j] = models[2 + j].predict(Xte)
        for name, model in zip(names, models):
            summaries.append({"fold": k, "target": name, **model.summary()})
    return NuisanceFit(ell_hat=ell, r_hat=r, alpha_hat=alpha, summaries=tuple(summaries))


def linear_partial_out(ds: Dataset) -> ResidualData:
    """Full-sample linear partialling of the covariates out of (y, d, z).

    This is the conventional (non-cross-fitted) first step used by the
    plain TSLS benchmark: in-sample OLS predictions with an intercept.
    """
    T = np.column_stack([ds.y, ds.d, ds.z])
    models = _fit_linear_multi(ds.x, T)
    preds = np.column_stack([mdl.predict(ds.x) for mdl in models])
    return ResidualData(
        y_bar=ds.y - preds[:, 0],
        d_bar=ds.d - preds[:, 1],
        z_bar=ds.z - preds[:, 2:],
        fold_of=np.full(ds.n, -1, dtype=np.intp),
    )
