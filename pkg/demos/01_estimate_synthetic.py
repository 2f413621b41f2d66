"""Walk through the full estimation pipeline on one synthetic dataset.

The dataset has 15 instruments that are individually weak (concentration
parameter 30 spread across all of them) and three covariates entering the
instrument, treatment and outcome equations through smooth nonlinear
functions. We cross-fit spline regressions, residualize, and compare the
continuously-updated estimator against TSLS and identity-weighted GMM.
"""

import numpy as np

from weakiv import (
    LearnerSpec,
    MomentSystem,
    ScenarioConfig,
    SearchInterval,
    cross_fit,
    cue_inference,
    estimate_cue,
    estimate_gmm_identity,
    estimate_tsls,
    generate_s1,
    identity_gmm_variance,
    linear_partial_out,
    make_folds,
    residualize,
    tsls_variance,
)

seed = 7
cfg = ScenarioConfig(scenario="s1_lowdim", n=1000, m=15, cp=30.0, base_seed=seed)
ds, truth = generate_s1(cfg, seed)
print(f"data: n={ds.n}, m={ds.m} instruments, p={ds.p} covariates, true effect = {cfg.beta0}")

# --- first step: cross-fitted spline regressions ---------------------------
folds = make_folds(ds.n, K=4, seed=seed)
fits = cross_fit(ds, folds, LearnerSpec.spline(), seed=seed)
rd = residualize(ds, fits, folds)
chosen = sorted({round(s["multiplier"], 4) for s in fits.summaries if "multiplier" in s})
print(f"cross-fit: {len(fits.summaries)} spline fits, GCV multipliers span "
      f"[{chosen[0]:g}, {chosen[-1]:g}]")

# --- debiased CUE with identification-robust inference ---------------------
ms = MomentSystem(rd)
rep = estimate_cue(ms, SearchInterval(-8.0, 8.0))
inf = cue_inference(ms, rep.beta_hat, beta_star=0.0)
print("\ndebiased CUE")
print(f"  estimate      {rep.beta_hat:8.4f}   (objective {rep.objective_at_min:.2e}, "
      f"|gradient| {rep.stationarity:.1e})")
print(f"  95% CI        ({rep.beta_hat - 1.96 * inf.se:8.4f}, {rep.beta_hat + 1.96 * inf.se:8.4f})")
print(f"  first-stage F {inf.f_stat:8.3f}   (weak: roughly 1 + CP/m = {1 + cfg.cp / cfg.m:.1f})")
print(f"  J = {inf.j_stat:.3f} on {inf.j_df} df (p = {inf.j_p:.3f}) -- overidentification")
print(f"  K at beta=0: {inf.k_stat:.3f} (p = {inf.k_p:.3f}) -- robust score test")

# --- benchmarks -------------------------------------------------------------
rd_lin = linear_partial_out(ds)
tsls = estimate_tsls(rd_lin)
_, se_t = tsls_variance(rd_lin, tsls.beta_hat)
gmm = estimate_gmm_identity(ms)
_, se_g = identity_gmm_variance(ms, gmm.beta_hat)
print("\nbenchmarks")
print(f"  TSLS (linear first steps)   {tsls.beta_hat:8.4f}  (se {se_t:.4f})")
print(f"  identity-GMM (same splines) {gmm.beta_hat:8.4f}  (se {se_g:.4f})")
print("\nwith many weak instruments, TSLS and one-step GMM are pulled toward the")
print("biased OLS direction; the continuously-updated objective removes most of it.")
