"""Identification-robust testing without a point estimate.

The score statistic tests a hypothesized effect value directly from the
moment system; inverting it over a grid yields a confidence set that stays
valid no matter how weak the instruments are. We make the instruments very
weak on purpose and compare the robust set with the Wald interval.
"""

import numpy as np

from weakiv import (
    MomentSystem,
    ScenarioConfig,
    SearchInterval,
    chisq_quantile,
    estimate_cue,
    generate_s1,
    k_statistic,
    residualize_with_truth,
    variance_hat,
)

seed = 11
cfg = ScenarioConfig(scenario="s1_lowdim", n=800, m=15, cp=20.0, base_seed=seed)
ds, truth = generate_s1(cfg, seed)
rd = residualize_with_truth(ds, truth)  # oracle first steps keep the demo focused
ms = MomentSystem(rd)
print(f"deliberately weak design: n={ds.n}, m={ds.m}, CP={cfg.cp:g} "
      f"(per-instrument strength ~{np.sqrt(cfg.cp / (cfg.n * cfg.m)):.4f})\n")

# --- Wald interval (requires the point estimate) ---------------------------
rep = estimate_cue(ms, SearchInterval(-8, 8))
_, se = variance_hat(ms, rep.beta_hat)
print(f"CUE point estimate {rep.beta_hat:.4f}, Wald 95% CI "
      f"({rep.beta_hat - 1.96 * se:.4f}, {rep.beta_hat + 1.96 * se:.4f})")
if rep.multi_min_flag:
    print("note: objective had near-tied local minima (flagged)")

# --- score-test inversion ----------------------------------------------------
crit = chisq_quantile(0.95, 1)
grid = np.linspace(-4.0, 4.0, 801)
accepted = []
for b in grid:
    k, _ = k_statistic(ms, float(b))
    if k <= crit:
        accepted.append(b)
accepted = np.array(accepted)
lo = "-inf?" if accepted.min() <= grid[0] else f"{accepted.min():.4f}"
hi = "+inf?" if accepted.max() >= grid[-1] else f"{accepted.max():.4f}"
print(f"\nscore-test 95% confidence set: [{lo}, {hi}] "
      f"({len(accepted)} of {len(grid)} grid points accepted)")
print("the robust set is wider and may run off to infinity on one side -- the")
print("honest statement of what these weak instruments can rule out. The Wald")
print("interval is tidier but trusts a normal approximation the design cannot")
print("support; the true value 0 lies in the robust set.")
