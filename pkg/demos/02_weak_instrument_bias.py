"""A small Monte Carlo comparison across estimators.

Runs one weak-instrument cell (50 replications at desk scale; the full
reproduction uses 500+) and renders the aggregate table. The qualitative
pattern appears already at this size: TSLS is badly biased with poor
coverage, identity-weighted GMM is better, and the debiased CUE is nearly
unbiased with close-to-nominal coverage at the price of a larger spread.
"""

import os

from weakiv import LearnerSpec, ScenarioConfig, render_table, run_cell

workers = int(os.environ.get("WEAKIV_WORKERS", "2"))

cfg = ScenarioConfig(
    scenario="s1_lowdim",
    n=1000,
    m=15,
    cp=30.0,
    reps=50,
    base_seed=2026,
    estimators=("cue", "tsls", "gmm", "oracle_cue", "oracle_gmm"),
    learner=LearnerSpec.spline(),
)
print(f"running {cfg.reps} replications of (n={cfg.n}, m={cfg.m}, CP={cfg.cp:g}) "
      f"with {workers} workers...\n")
cell = run_cell(cfg, workers=workers)
print(render_table([cell], "markdown"))

cue = cell.per_estimator["cue"]
tsls = cell.per_estimator["tsls"]
print(f"TSLS bias is {tsls.abs_mean_bias / max(cue.abs_mean_bias, 1e-9):.0f}x the "
      f"CUE bias in this cell; its coverage is {tsls.cov95:.0%} against a nominal 95%.")
