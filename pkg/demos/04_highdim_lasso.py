"""High-dimensional first steps: lasso selection and the value of refitting.

One hundred covariates enter all equations through the same five-variable
support. Cross-validated lasso predictions carry soft-threshold shrinkage,
and because all first-step targets share the support, the shrinkage errors
are *correlated across equations*; their products contaminate the moments.
Refitting OLS on the selected support removes the shrinkage and restores
the estimator. This demo shows both variants on a handful of replications.
"""

import os

import numpy as np

from weakiv import (
    LearnerSpec,
    MomentSystem,
    ScenarioConfig,
    SearchInterval,
    cross_fit,
    estimate_cue,
    generate_s2,
    make_folds,
    residualize,
)

workers = int(os.environ.get("WEAKIV_WORKERS", "2"))
reps = 10
estimates = {"shrunken lasso": [], "lasso + OLS refit": []}

for r in range(reps):
    cfg = ScenarioConfig(scenario="s2_highdim", n=1000, m=15, cp=30.0, base_seed=0)
    ds, truth = generate_s2(cfg, 100 + r)
    folds = make_folds(ds.n, 4, (100 + r, 1))
    for label, spec in (
        ("shrunken lasso", LearnerSpec.lasso()),
        ("lasso + OLS refit", LearnerSpec.lasso(post_ols=True)),
    ):
        fits = cross_fit(ds, folds, spec, seed=(100 + r, 2))
        rd = residualize(ds, fits, folds)
        rep = estimate_cue(MomentSystem(rd), SearchInterval(-8, 8))
        estimates[label].append(rep.beta_hat)
    n_active = [s["n_active"] for s in fits.summaries]
    if r == 0:
        print(f"selected support sizes across {len(n_active)} first-step fits: "
              f"min {min(n_active)}, median {int(np.median(n_active))}, max {max(n_active)}")
        print(f"(5 covariates truly matter in every equation)\n")

print(f"true effect = 0.0, {reps} replications:")
for label, vals in estimates.items():
    vals = np.array(vals)
    print(f"  {label:18s} mean {vals.mean():+.3f}  sd {vals.std(ddof=1):.3f}")
print("\nthe shrunken predictions leave a systematic positive bias; the refit")
print("turns first-step errors into pure noise, which the orthogonal moment")
print("and cross-fitting are built to absorb.")
