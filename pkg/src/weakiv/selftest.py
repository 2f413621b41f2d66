"""Built-in property suite behind the ``selftest`` CLI command.

Each check draws seeded random instances, verifies a mathematical identity
the estimator must satisfy, and reports a pass/fail with the worst observed
discrepancy. A deliberately corrupted-gradient hook exists so the harness
itself can be tested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ResidualData
from .estimators import SearchInterval, estimate_cue, estimate_gmm_identity, estimate_tsls
from .inference import chisq_cdf, chisq_quantile
from .moments import MomentSystem, d_omega_dbeta, dq_dbeta, omega_hat, q_hat

__all__ = ["PropertyResult", "run_all"]


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str


def _random_system(rng: np.random.Generator, m: int | None = None) -> ResidualData:
    n = int(rng.integers(60, 240))
    m = int(rng.integers(1, 6)) if m is None else m
    zb = rng.standard_normal((n, m))
    db = zb @ rng.normal(0.4, 0.2, m) + rng.standard_normal(n)
    yb = db * rng.normal(0.0, 1.0) + rng.standard_normal(n)
    return ResidualData(y_bar=yb, d_bar=db, z_bar=zb)


def check_gradients(seed=0, n_cases: int = 25, corrupt: bool = False) -> PropertyResult:
    """Analytic objective gradient and weighting-matrix derivative vs
    central finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        ms = MomentSystem(_random_system(rng))
        beta = float(rng.uniform(-2.0, 2.0))
        h = 1e-6 * max(1.0, abs(beta))
        fd = (q_hat(ms, beta + h) - q_hat(ms, beta - h)) / (2.0 * h)
        an = dq_dbeta(ms, beta) + (1e-3 if corrupt else 0.0)
        worst = max(worst, abs(an - fd) / max(abs(fd), 1e-8))
        fdm = (omega_hat(ms, beta + h).omega - omega_hat(ms, beta - h).omega) / (2.0 * h)
        anm = d_omega_dbeta(ms, beta)
        worst = max(worst, np.linalg.norm(anm - fdm) / max(np.linalg.norm(fdm), 1e-8))
    ok = worst < 1e-6
    return PropertyResult("gradient-fidelity", ok, f"worst relative error {worst:.3e}")


def check_rotation_invariance(seed=0, n_cases: int = 10) -> PropertyResult:
    """Objective values and the estimate are invariant under invertible
    linear transformations of the instruments."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        rd = _random_system(rng, m=int(rng.integers(2, 6)))
        a = rng.standard_normal((rd.m, rd.m)) + 0.5 * np.eye(rd.m)
        rd2 = ResidualData(y_bar=rd.y_bar, d_bar=rd.d_bar, z_bar=rd.z_bar @ a.T)
        ms1, ms2 = MomentSystem(rd), MomentSystem(rd2)
        for beta in rng.uniform(-2.0, 2.0, 4):
            q1, q2 = q_hat(ms1, beta), q_hat(ms2, beta)
            worst = max(worst, abs(q1 - q2) / max(abs(q1), 1e-12))
        iv = SearchInterval(-10.0, 10.0)
        b1 = estimate_cue(ms1, iv).beta_hat
        b2 = estimate_cue(ms2, iv).beta_hat
        worst = max(worst, abs(b1 - b2) / max(abs(b1), 1.0))
    ok = worst < 1e-7
    return PropertyResult("instrument-rotation-invariance", ok, f"worst relative change {worst:.3e}")


def check_just_identified(seed=0, n_cases: int = 25) -> PropertyResult:
    """With a single instrument, CUE, TSLS and identity-GMM all equal the
    IV ratio."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        rd = _random_system(rng, m=1)
        ms = MomentSystem(rd)
        ratio = float(rd.z_bar[:, 0] @ rd.y_bar) / float(rd.z_bar[:, 0] @ rd.d_bar)
        b_cue = estimate_cue(ms, SearchInterval(ratio - 5.0, ratio + 5.0)).beta_hat
        b_tsls = estimate_tsls(rd).beta_hat
        b_gmm = estimate_gmm_identity(ms).beta_hat
        worst = max(worst, abs(b_cue - ratio), abs(b_tsls - ratio), abs(b_gmm - ratio))
    ok = worst < 1e-8
    return PropertyResult("just-identified-equivalence", ok, f"worst |difference| {worst:.3e}")


def check_chisq(seed=0) -> PropertyResult:
    """Chi-square CDF/quantile inverse identity plus a pinned quantile."""
    worst = 0.0
    for df in (1, 4, 14, 29, 179):
        for p in (0.01, 0.5, 0.95, 0.999):
            worst = max(worst, abs(chisq_cdf(chisq_quantile(p, df), df) - p))
    pinned = abs(chisq_quantile(0.95, 1) - 3.841458820694124)
    ok = worst < 1e-9 and pinned < 1e-4
    return PropertyResult("chi-square-identities", ok,
                          f"worst inverse error {worst:.3e}, pinned quantile off by {pinned:.3e}")


def run_all(seed=0, corrupt_gradient: bool = False) -> list[PropertyResult]:
    """Run every property check with instance seeds derived from ``seed``."""
    return [
        check_gradients(seed=(seed, 1), corrupt=corrupt_gradient),
        check_rotation_invariance(seed=(seed, 2)),
        check_just_identified(seed=(seed, 3)),
        check_chisq(seed=(seed, 4)),
    ]
