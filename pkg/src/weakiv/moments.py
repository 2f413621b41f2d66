"""Moment system for the residualized linear IV moment.

With residualized outcome ``yb``, treatment ``db`` and instruments ``zb``,
the per-observation moment is ``g_i(b) = zb_i * (yb_i - db_i * b)``. Its
sample mean is affine in ``b`` and the weighting matrix

    omega(b) = mean_i g_i(b) g_i(b)'

is an exact quadratic polynomial in ``b``. :class:`MomentSystem` caches the
polynomial coefficient matrices once, so objective evaluations at any
number of parameter values cost O(m^2) each instead of O(n m^2). All
weighted quadratic forms go through a Cholesky factorization; the inverse
weighting matrix is never formed explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import ResidualData
from .errors import SingularWeightingError

__all__ = [
    "MomentSystem",
    "WeightingState",
    "g_bar",
    "omega_hat",
    "d_omega_dbeta",
    "q_hat",
    "dq_dbeta",
    "d2q_dbeta2",
]


def _sym(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


class MomentSystem:
    """Caches the cross-moments needed to evaluate the CUE objective.

    Attributes
    ----------
    szy : ndarray, shape (m,)
        ``mean_i zb_i * yb_i``.
    szd : ndarray, shape (m,)
        ``mean_i zb_i * db_i``; the moment derivative is the constant
        ``-szd``.
    omega_yy, omega_yd, omega_dd : ndarray, shape (m, m)
        Coefficients of the quadratic expansion
        ``omega(b) = omega_yy - 2 b omega_yd + b^2 omega_dd``.
    """

    def __init__(self, rd: ResidualData):
        zb = rd.z_bar
        yb = rd.y_bar
        db = rd.d_bar
        n = rd.n

        self.rd = rd
        self.n = n
        self.m = rd.m
        self.szy = zb.T @ yb / n
        self.szd = zb.T @ db / n
        self.omega_yy = _sym((zb * (yb * yb)[:, None]).T @ zb / n)
        self.omega_yd = _sym((zb * (yb * db)[:, None]).T @ zb / n)
        self.omega_dd = _sym((zb * (db * db)[:, None]).T @ zb / n)

    @property
    def moment_derivative(self) -> np.ndarray:
        """Constant derivative of the mean moment with respect to beta."""
        return -self.szd

    def score_cross_moment(self, beta: float) -> np.ndarray:
        """``mean_i (dg_i/db) g_i(beta)'`` as an m x m matrix.

        Equals ``-(omega_yd - beta * omega_dd)`` by the same quadratic
        expansion that powers the weighting matrix.
        """
        return -(self.omega_yd - beta * self.omega_dd)


@dataclass(frozen=True)
class WeightingState:
    """A factorized weighting matrix at a fixed parameter value."""

    beta: float
    omega: np.ndarray
    chol: np.ndarray  # lower-triangular Cholesky factor
    jitter: float = 0.0

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``omega @ x = b`` using the cached factorization."""
        return linalg.cho_solve((self.chol, True), b, check_finite=False)

    @property
    def diagnostics(self) -> dict:
        d = np.diag(self.chol)
        return {
            "min_chol_diag": float(d.min()),
            "max_chol_diag": float(d.max()),
            "jitter": self.jitter,
        }


def g_bar(ms: MomentSystem, beta: float) -> np.ndarray:
    """Mean moment vector at ``beta``: ``szy - beta * szd``."""
    return ms.szy - beta * ms.szd


def omega_hat(ms: MomentSystem, beta: float) -> WeightingState:
    """Weighting matrix at ``beta``, factorized for solves.

    If the Cholesky factorization fails, one retry is made with a ridge
    jitter of ``1e-10 * mean(diag)``; a second failure raises
    :class:`SingularWeightingError` carrying conditioning diagnostics.
    """
    omega = ms.omega_yy - (2.0 * beta) * ms.omega_yd + (beta * beta) * ms.omega_dd
    try:
        c = linalg.cholesky(omega, lower=True, check_finite=False)
        return WeightingState(beta=float(beta), omega=omega, chol=c)
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * float(np.mean(np.diag(omega)))
    if jitter > 0.0:
        try:
            c = linalg.cholesky(
                omega + jitter * np.eye(ms.m), lower=True, check_finite=False
            )
            return WeightingState(beta=float(beta), omega=omega, chol=c, jitter=jitter)
        except linalg.LinAlgError:
            pass
    diag = np.diag(omega)
    raise SingularWeightingError(
        f"weighting matrix numerically singular at beta={beta!r}",
        beta=float(beta),
        diagnostics={
            "min_diag": float(diag.min()) if diag.size else float("nan"),
            "max_diag": float(diag.max()) if diag.size else float("nan"),
            "jitter_tried": jitter,
        },
    )


def d_omega_dbeta(ms: MomentSystem, beta: float) -> np.ndarray:
    """Derivative of the weighting matrix in ``beta``:
    ``-2 (omega_yd - beta * omega_dd)``."""
    return -2.0 * (ms.omega_yd - beta * ms.omega_dd)


def q_hat(ms: MomentSystem, beta: float, w: WeightingState | None = None) -> float:
    """Continuously-updated objective ``g' omega(beta)^{-1} g / 2``."""
    if w is None:
        w = omega_hat(ms, beta)
    g = g_bar(ms, beta)
    return 0.5 * float(g @ w.solve(g))


def dq_dbeta(ms: MomentSystem, beta: float, w: WeightingState | None = None) -> float:
    """Analytic derivative of the objective in ``beta``.

    Differentiating both the moment and the weighting matrix gives

        dq = g' W^{-1} dg/db - (1/2) (W^{-1} g)' dW/db (W^{-1} g),

    evaluated with two triangular solves and no explicit inverse.
    """
    if w is None:
        w = omega_hat(ms, beta)
    g = g_bar(ms, beta)
    u = w.solve(g)
    d_omega = d_omega_dbeta(ms, beta)
    return float(-u @ ms.szd - 0.5 * (u @ (d_omega @ u)))


def d2q_dbeta2(ms: MomentSystem, beta: float, rel_step: float = 1e-5) -> float:
    """Objective curvature by central differencing of the analytic gradient.

    Step size is ``rel_step * max(1, |beta|)``.
    """
    h = rel_step * max(1.0, abs(beta))
    return (dq_dbeta(ms, beta + h) - dq_dbeta(ms, beta - h)) / (2.0 * h)
