"""Debiased continuously-updated GMM for partially linear IV models with
many weak instruments.

The pipeline: load or simulate data, cross-fit the covariate regressions,
residualize, then estimate and test on the residualized moment system.

>>> import weakiv
>>> ds, truth = weakiv.generate_s1(weakiv.ScenarioConfig(n=1000, m=15, cp=30), seed=1)
>>> folds = weakiv.make_folds(ds.n, K=4, seed=1)
>>> fits = weakiv.cross_fit(ds, folds, weakiv.LearnerSpec.spline())
>>> rd = weakiv.residualize(ds, fits, folds)
>>> ms = weakiv.MomentSystem(rd)
>>> report = weakiv.estimate_cue(ms, weakiv.SearchInterval(-8, 8))
"""

__version__ = "0.1.0"

from .data import (
    ColumnSchema,
    Dataset,
    FoldPartition,
    ResidualData,
    load_csv,
    make_folds,
    residualize,
    write_csv,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    EstimationError,
    InferenceError,
    NumericalError,
    SingularWeightingError,
    WeakIVError,
)
from .estimators import (
    EstimateReport,
    SearchInterval,
    default_search_interval,
    estimate_cue,
    estimate_gmm_identity,
    estimate_oracle,
    estimate_tsls,
    residualize_with_truth,
)
from .inference import (
    InferenceReport,
    chisq_cdf,
    chisq_quantile,
    cue_inference,
    d_hat,
    first_stage_f,
    identity_gmm_variance,
    j_statistic,
    k_statistic,
    tsls_variance,
    variance_hat,
    wald_test,
)
from .learners import (
    LearnerSpec,
    NuisanceFit,
    cross_fit,
    fit_lasso,
    fit_linear,
    fit_ridge,
    fit_spline_additive,
    linear_partial_out,
)
from .moments import (
    MomentSystem,
    WeightingState,
    d2q_dbeta2,
    d_omega_dbeta,
    dq_dbeta,
    g_bar,
    omega_hat,
    q_hat,
)
from .simulate import (
    CellMetrics,
    EstimatorMetrics,
    RepOutcome,
    ScenarioConfig,
    generate_dataset,
    generate_s1,
    generate_s2,
    render_table,
    run_cell,
    run_replications,
)
