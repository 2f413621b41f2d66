"""Variance estimation and test statistics.

The variance of the continuously-updated estimate uses the sandwich

    v_hat = H^{-1} (dh' W^{-1} dh) H^{-1},    se = sqrt(v_hat / n),

where ``H`` is the objective curvature at the estimate and ``dh`` the
moment derivative corrected by the projection of the per-observation
derivative on the moment itself. The correction is what keeps the variance
honest when many weak instruments make the higher-order term
non-negligible.

Also here: the Wald statistic, the identification-robust score statistic
(valid at a hypothesized value without computing the estimate), the
overidentification statistic ``2 n q_hat(beta_hat)`` on m - 1 degrees of
freedom, the partialled-out first-stage F, and chi-square distribution
utilities built on a regularized incomplete gamma evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ResidualData
from .errors import ConfigError, EstimationError, InferenceError
from .moments import (
    MomentSystem,
    WeightingState,
    d2q_dbeta2,
    dq_dbeta,
    g_bar,
    omega_hat,
    q_hat,
)

__all__ = [
    "InferenceReport",
    "d_hat",
    "variance_hat",
    "wald_test",
    "k_statistic",
    "j_statistic",
    "first_stage_f",
    "tsls_variance",
    "identity_gmm_variance",
    "cue_inference",
    "chisq_cdf",
    "chisq_quantile",
]


# ---------------------------------------------------------------------------
# chi-square utilities


def _gamma_p_series(a: float, x: float, eps: float = 1e-14, max_iter: int = 500) -> float:
    """Regularized lower incomplete gamma P(a, x) by its power series."""
    if x == 0.0:
        return 0.0
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(max_iter):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * eps:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _gamma_q_contfrac(a: float, x: float, eps: float = 1e-14, max_iter: int = 500) -> float:
    """Regularized upper incomplete gamma Q(a, x) by continued fraction
    (modified Lentz)."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b if b != 0.0 else 1.0 / tiny
    h = d
    for i in range(1, max_iter + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def _chisq_tails(x: float, df: int) -> tuple[float, float]:
    """(lower, upper) tail probabilities of a chi-square distribution.

    Series and continued-fraction branches split at x = df + 1, so each
    branch is used where it converges fastest and the corresponding tail is
    computed without cancellation.
    """
    if df < 1 or int(df) != df:
        raise ConfigError(f"degrees of freedom must be a positive integer, got {df}")
    if x < 0 or not math.isfinite(x):
        raise ConfigError(f"chi-square argument must be finite and >= 0, got {x}")
    if x == 0.0:
        return 0.0, 1.0
    a = df / 2.0
    z = x / 2.0
    if x < df + 1.0:
        p = _gamma_p_series(a, z)
        p = min(max(p, 0.0), 1.0)
        return p, 1.0 - p
    q = _gamma_q_contfrac(a, z)
    q = min(max(q, 0.0), 1.0)
    return 1.0 - q, q


def chisq_cdf(x: float, df: int) -> float:
    """Chi-square CDF with ``df`` degrees of freedom (absolute accuracy
    ~1e-12)."""
    return _chisq_tails(x, df)[0]


def chisq_sf(x: float, df: int) -> float:
    """Upper tail probability; accurate far into the tail."""
    return _chisq_tails(x, df)[1]


def chisq_quantile(p: float, df: int) -> float:
    """Quantile of the chi-square distribution by bracketed root finding."""
    if not (0.0 < p < 1.0):
        raise ConfigError(f"quantile level must be in (0, 1), got {p}")
    if df < 1 or int(df) != df:
        raise ConfigError(f"degrees of freedom must be a positive integer, got {df}")
    lo, hi = 0.0, max(4.0 * df, 10.0)
    while chisq_cdf(hi, df) < p:
        hi *= 2.0
        if hi > 1e10:
            raise InferenceError(f"failed to bracket chi-square quantile at p={p}, df={df}")
    # bisection: monotone CDF, ~60 halvings reach well below 1e-10
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chisq_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# variance and test statistics


@dataclass
class InferenceReport:
    """Inference summary attached to a CUE point estimate."""

    se: float
    v_hat: float
    d_hat: np.ndarray
    curvature: float
    wald: float
    wald_p: float
    k_stat: float
    k_p: float
    j_stat: float
    j_df: int
    j_p: float
    f_stat: float


def d_hat(ms: MomentSystem, beta: float, w: WeightingState | None = None) -> np.ndarray:
    """Corrected moment derivative used by the variance and score statistics.

    Subtracts from the raw derivative the sample projection of the
    per-observation derivative on the moment:

        dh = dg - [mean_i (dg_i) g_i'] W^{-1} g .
    """
    if w is None:
        w = omega_hat(ms, beta)
    g = g_bar(ms, beta)
    u = w.solve(g)
    return ms.moment_derivative - ms.score_cross_moment(beta) @ u


def variance_hat(ms: MomentSystem, beta_hat: float) -> tuple[float, float]:
    """Sandwich variance of the CUE estimate and its standard error.

    Returns
    -------
    (v_hat, se)
        ``se = sqrt(v_hat / n)``. Raises :class:`InferenceError` when the
        objective curvature at ``beta_hat`` is not positive.
    """
    curv = d2q_dbeta2(ms, beta_hat)
    if not math.isfinite(curv) or curv <= 0.0:
        raise InferenceError(
            f"objective curvature {curv!r} at beta_hat={beta_hat!r} is not positive; "
            "variance unavailable"
        )
    w = omega_hat(ms, beta_hat)
    dh = d_hat(ms, beta_hat, w)
    inner = float(dh @ w.solve(dh))
    v_hat = inner / (curv * curv)
    return v_hat, math.sqrt(v_hat / ms.n)


def wald_test(beta_hat: float, v_hat: float, n: int, beta_star: float) -> tuple[float, float]:
    """Wald statistic ``n (beta_hat - beta_star)^2 / v_hat`` and its
    upper-tail chi-square(1) p-value."""
    if v_hat <= 0.0:
        raise InferenceError(f"Wald test needs a positive variance, got {v_hat!r}")
    t = n * (beta_hat - beta_star) ** 2 / v_hat
    return float(t), chisq_sf(t, 1)


def k_statistic(ms: MomentSystem, beta_star: float) -> tuple[float, float]:
    """Identification-robust score statistic at a hypothesized value.

    ``k = n * (dq(beta_star))^2 / (dh' W^{-1} dh)`` with everything
    evaluated at ``beta_star``; no point estimate is required. Compared to a
    chi-square(1).
    """
    w = omega_hat(ms, beta_star)
    grad = dq_dbeta(ms, beta_star, w)
    dh = d_hat(ms, beta_star, w)
    denom = float(dh @ w.solve(dh))
    if denom <= 0.0:
        raise InferenceError("score statistic undefined: weighted derivative norm is zero")
    k = ms.n * grad * grad / denom
    return float(k), chisq_sf(k, 1)


def j_statistic(ms: MomentSystem, beta_hat: float) -> tuple[float, int, float]:
    """Overidentification statistic ``2 n q_hat(beta_hat)`` on m - 1 degrees
    of freedom.

    For m = 1 the moment is exactly solvable: the statistic is reported as
    0.0 with df = 0 and p-value 1.0 (just-identified case).
    """
    if ms.m == 1:
        return 0.0, 0, 1.0
    j = 2.0 * ms.n * q_hat(ms, beta_hat)
    df = ms.m - 1
    return float(j), df, chisq_sf(j, df)


def first_stage_f(rd: ResidualData) -> float:
    """Classical F statistic of the no-intercept regression of the
    residualized treatment on the residualized instruments.

    Covariate effects are already partialled out, hence no intercept. A
    numerically zero residual sum of squares yields ``inf``.
    """
    zb, db = rd.z_bar, rd.d_bar
    n, m = rd.n, rd.m
    if n <= m + 1:
        raise EstimationError(f"first-stage F needs n > m + 1, got n={n}, m={m}")
    coef, _, rank, _ = np.linalg.lstsq(zb, db, rcond=None)
    if rank < m:
        raise EstimationError(f"singular first-stage design (rank {rank} < m={m})")
    fitted = zb @ coef
    resid = db - fitted
    ess = float(fitted @ fitted)
    rss = float(resid @ resid)
    if rss <= 1e-14 * max(ess, 1.0):
        return math.inf
    return (ess / m) / (rss / (n - m))


def tsls_variance(rd: ResidualData, beta_hat: float) -> tuple[float, float]:
    """Classical homoscedastic TSLS variance, in the same ``(v_hat, se)``
    convention as :func:`variance_hat` (``se = sqrt(v_hat / n)``)."""
    zb, db, yb = rd.z_bar, rd.d_bar, rd.y_bar
    coef, _, rank, _ = np.linalg.lstsq(zb, db, rcond=None)
    if rank < rd.m:
        raise InferenceError("singular instrument cross-product in TSLS variance")
    proj = zb @ coef
    denom = float(proj @ proj)
    if denom <= 0.0:
        raise InferenceError("zero first stage in TSLS variance")
    resid = yb - db * beta_hat
    sigma2 = float(resid @ resid) / rd.n
    v_hat = rd.n * sigma2 / denom
    return v_hat, math.sqrt(v_hat / rd.n)


def identity_gmm_variance(ms: MomentSystem, beta_hat: float) -> tuple[float, float]:
    """Sandwich variance of the identity-weighted GMM estimate."""
    szd = ms.szd
    denom = float(szd @ szd)
    if denom <= 0.0:
        raise InferenceError("identity-GMM variance undefined: zero moment derivative")
    w = omega_hat(ms, beta_hat)
    v_hat = float(szd @ (w.omega @ szd)) / (denom * denom)
    return v_hat, math.sqrt(v_hat / ms.n)


def cue_inference(
    ms: MomentSystem,
    beta_hat: float,
    beta_star: float = 0.0,
    rd: ResidualData | None = None,
) -> InferenceReport:
    """Assemble the full inference report for a CUE estimate.

    The Wald and score statistics test ``beta = beta_star`` (default 0);
    the first-stage F is computed from ``rd`` (defaults to the residual
    data behind ``ms``).
    """
    v_hat, se = variance_hat(ms, beta_hat)
    curv = d2q_dbeta2(ms, beta_hat)
    w = omega_hat(ms, beta_hat)
    dh = d_hat(ms, beta_hat, w)
    wald, wald_p = wald_test(beta_hat, v_hat, ms.n, beta_star)
    k, k_p = k_statistic(ms, beta_star)
    j, j_df, j_p = j_statistic(ms, beta_hat)
    f = first_stage_f(rd if rd is not None else ms.rd)
    return InferenceReport(
        se=se,
        v_hat=v_hat,
        d_hat=dh,
        curvature=curv,
        wald=wald,
        wald_p=wald_p,
        k_stat=k,
        k_p=k_p,
        j_stat=j,
        j_df=j_df,
        j_p=j_p,
        f_stat=f,
    )
