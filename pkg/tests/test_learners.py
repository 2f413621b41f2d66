import numpy as np
import pytest

from weakiv.data import Dataset, make_folds, residualize
from weakiv.errors import ConfigError, ConvergenceError, EstimationError
from weakiv.learners import (
    LearnerSpec,
    cross_fit,
    fit_lasso,
    fit_linear,
    fit_ridge,
    fit_spline_additive,
    linear_partial_out,
)

# ---------------------------------------------------------------------------
# LearnerSpec validation


def test_spec_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        LearnerSpec(kind="forest")


def test_spec_rejects_bad_hyperparameters():
    with pytest.raises(ConfigError):
        LearnerSpec(kind="lasso", lambda_grid=())
    with pytest.raises(ConfigError):
        LearnerSpec(kind="lasso", cv_folds=1)
    with pytest.raises(ConfigError):
        LearnerSpec(kind="spline-additive", knots=0)
    with pytest.raises(ConfigError):
        LearnerSpec(kind="oracle", truth=object())


def test_spec_constructors():
    assert LearnerSpec.linear().kind == "linear"
    assert LearnerSpec.lasso(post_ols=True).post_ols
    assert LearnerSpec.spline(knots=7).knots == 7


# ---------------------------------------------------------------------------
# fit_linear


def test_linear_exact_recovery():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((60, 1))
    t = 2.0 * x[:, 0] + 1.0
    mdl = fit_linear(x, t)
    assert mdl.coef_[0] == pytest.approx(1.0, abs=1e-10)
    assert mdl.coef_[1] == pytest.approx(2.0, abs=1e-10)
    assert not mdl.ridge_fallback_


def test_linear_constant_target():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((40, 3))
    mdl = fit_linear(x, np.full(40, 3.25))
    assert mdl.coef_[0] == pytest.approx(3.25, abs=1e-10)
    np.testing.assert_allclose(mdl.coef_[1:], 0.0, atol=1e-10)


def test_linear_duplicated_column_ridge_fallback():
    rng = np.random.default_rng(2)
    base = rng.standard_normal((50, 1))
    x = np.hstack([base, base])  # rank deficient
    t = base[:, 0] + 0.1 * rng.standard_normal(50)
    mdl = fit_linear(x, t)
    assert mdl.ridge_fallback_
    assert np.all(np.isfinite(mdl.predict(x)))
    assert mdl.summary()["ridge_fallback"]


# ---------------------------------------------------------------------------
# fit_lasso


def test_lasso_lambda_zero_matches_ols():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((120, 4))
    t = x @ np.array([1.0, -2.0, 0.5, 0.0]) + 0.7 + rng.standard_normal(120)
    mdl = fit_lasso(x, t, lambda_grid=[0.0])
    ols = np.linalg.lstsq(np.column_stack([np.ones(120), x]), t, rcond=None)[0]
    np.testing.assert_allclose(mdl.coef_, ols[1:], atol=1e-6)
    pred_ols = ols[0] + x @ ols[1:]
    np.testing.assert_allclose(mdl.predict(x), pred_ols, atol=1e-6)


def test_lasso_soft_threshold_kills_unit_correlation_slope():
    # single standardized predictor with X'(t - mean t)/n = 1 and a penalty
    # of 1.5 must return a zero slope
    rng = np.random.default_rng(4)
    n = 100
    x = rng.standard_normal(n)
    x = (x - x.mean()) / x.std()
    t = x + 5.0  # correlation X'(t - mean t)/n = X'X/n = 1 exactly
    mdl = fit_lasso(x[:, None], t, lambda_grid=[1.5])
    assert mdl.coef_std_[0] == 0.0
    assert mdl.predict(x[:, None]) == pytest.approx(t.mean())


def test_lasso_kkt_conditions_hold():
    rng = np.random.default_rng(5)
    for trial in range(5):
        n, p = 200, 12
        x = rng.standard_normal((n, p))
        t = x @ np.r_[np.ones(3), np.zeros(p - 3)] + rng.standard_normal(n)
        mdl = fit_lasso(x, t, seed=trial)
        xs = (x[:, mdl.keep_] - mdl.x_mean_) / mdl.x_scale_
        resid = t - mdl.predict(x)
        grad = xs.T @ resid / n
        lam = mdl.lambda_
        nz = mdl.coef_std_ != 0
        if (~nz).any():
            assert np.max(np.abs(grad[~nz])) <= lam + 1e-6
        if nz.any():
            np.testing.assert_allclose(
                grad[nz], lam * np.sign(mdl.coef_std_[nz]), atol=1e-6
            )


def test_lasso_convergence_error_carries_penalty():
    rng = np.random.default_rng(6)
    base = rng.standard_normal((80, 1))
    x = np.hstack([base + 0.01 * rng.standard_normal((80, 3)) for _ in range(1)][0:1])
    x = np.hstack([base, base + 1e-3 * rng.standard_normal((80, 1))])
    t = x[:, 0] + rng.standard_normal(80)
    with pytest.raises(ConvergenceError) as exc:
        fit_lasso(x, t, lambda_grid=[1e-8], max_sweeps=1)
    assert exc.value.penalty == pytest.approx(1e-8)


def test_lasso_constant_column_dropped():
    rng = np.random.default_rng(7)
    x = np.column_stack([np.full(90, 2.0), rng.standard_normal(90)])
    t = 3.0 * x[:, 1] + rng.standard_normal(90)
    mdl = fit_lasso(x, t, seed=0)
    assert mdl.coef_[0] == 0.0
    assert np.all(np.isfinite(mdl.predict(x)))


def test_lasso_post_ols_refit_removes_shrinkage():
    rng = np.random.default_rng(8)
    n, p = 400, 30
    x = rng.standard_normal((n, p))
    coefs = np.r_[np.full(4, 2.0), np.zeros(p - 4)]
    t = x @ coefs + rng.standard_normal(n)
    from weakiv.learners import _fit_lasso_multi

    plain = _fit_lasso_multi(x, t[:, None], seed=1)[0]
    refit = _fit_lasso_multi(x, t[:, None], seed=1, post_ols=True)[0]
    assert refit.summary()["post_ols"]
    # the selection is penalty-driven either way, but the refit coefficients
    # on the true support lose the soft-threshold shrinkage
    true_strength = np.abs(coefs[:4] * plain.x_scale_[:4]).sum()
    plain_strength = np.abs(plain.coef_std_[:4]).sum()
    refit_strength = np.abs(refit.refit_coef_std_[:4]).sum()
    assert abs(refit_strength - true_strength) < abs(plain_strength - true_strength)
    assert plain_strength < true_strength  # shrinkage direction sanity


# ---------------------------------------------------------------------------
# fit_spline_additive


def test_spline_reproduces_linear_function():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((500, 1))
    t = 1.5 - 2.0 * x[:, 0]
    mdl = fit_spline_additive(x, t)
    grid = np.linspace(x.min(), x.max(), 400)[:, None]
    ise = np.mean((mdl.predict(grid) - (1.5 - 2.0 * grid[:, 0])) ** 2)
    assert ise < 1e-4


def test_spline_constant_target():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((200, 2))
    mdl = fit_spline_additive(x, np.full(200, -1.25))
    np.testing.assert_allclose(mdl.predict(x), -1.25, atol=1e-8)


def test_spline_affine_rescale_invariance():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((300, 2))
    t = np.sin(x[:, 0]) + 0.5 * x[:, 1] ** 2 + 0.3 * rng.standard_normal(300)
    mdl1 = fit_spline_additive(x, t)
    x2 = x.copy()
    x2[:, 0] = 7.0 * x2[:, 0] - 3.0  # affine rescale of one column
    mdl2 = fit_spline_additive(x2, t)
    xt = rng.standard_normal((100, 2))
    xt2 = xt.copy()
    xt2[:, 0] = 7.0 * xt2[:, 0] - 3.0
    np.testing.assert_allclose(mdl1.predict(xt), mdl2.predict(xt2), atol=1e-8)


def test_ridge_affine_rescale_invariance():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((250, 3))
    t = x @ np.array([1.0, -0.5, 0.2]) + rng.standard_normal(250)
    mdl1 = fit_ridge(x, t)
    x2 = x.copy()
    x2[:, 1] = -4.0 * x2[:, 1] + 10.0
    mdl2 = fit_ridge(x2, t)
    xt = rng.standard_normal((80, 3))
    xt2 = xt.copy()
    xt2[:, 1] = -4.0 * xt2[:, 1] + 10.0
    np.testing.assert_allclose(mdl1.predict(xt), mdl2.predict(xt2), atol=1e-8)


def test_spline_knot_reduction_noted_for_few_distinct_values():
    rng = np.random.default_rng(13)
    x = np.column_stack([rng.integers(0, 4, 300).astype(float), rng.standard_normal(300)])
    t = x[:, 0] + np.sin(x[:, 1]) + 0.1 * rng.standard_normal(300)
    mdl = fit_spline_additive(x, t)
    assert any("knots reduced" in note for note in mdl.notes_)
    assert np.all(np.isfinite(mdl.predict(x)))


def test_spline_dummy_column_entered_linearly():
    rng = np.random.default_rng(14)
    x = np.column_stack([rng.integers(0, 2, 300).astype(float), rng.standard_normal(300)])
    t = 2.0 * x[:, 0] + x[:, 1] + 0.1 * rng.standard_normal(300)
    mdl = fit_spline_additive(x, t)
    assert any("linearly" in note for note in mdl.notes_)
    assert np.all(np.isfinite(mdl.predict(x)))


def test_spline_duplicated_columns_still_predict():
    # identical covariates leave a coefficient ambiguity that cancels in
    # predictions; the fit must stay usable
    rng = np.random.default_rng(15)
    base = rng.standard_normal(200)
    x = np.column_stack([base, base])
    t = base + rng.standard_normal(200)
    mdl = fit_spline_additive(x, t)
    assert np.all(np.isfinite(mdl.predict(x)))


def test_spline_degenerate_grid_errors(monkeypatch):
    # when every smoothing-grid factorization fails the fit must refuse
    from scipy import linalg as slinalg

    import weakiv.learners as learners

    def always_fail(*args, **kwargs):
        raise slinalg.LinAlgError("forced failure")

    monkeypatch.setattr(learners.linalg, "cho_factor", always_fail)
    rng = np.random.default_rng(16)
    x = rng.standard_normal((100, 1))
    t = x[:, 0] + rng.standard_normal(100)
    with pytest.raises(EstimationError, match="singular"):
        fit_spline_additive(x, t)


def test_spline_prediction_clips_outside_training_range():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((300, 1))
    t = x[:, 0] ** 2 + 0.1 * rng.standard_normal(300)
    mdl = fit_spline_additive(x, t)
    far = np.array([[x.min() - 10.0], [x.max() + 10.0]])
    edge = np.array([[x.min()], [x.max()]])
    np.testing.assert_allclose(mdl.predict(far), mdl.predict(edge), atol=1e-10)


# ---------------------------------------------------------------------------
# cross_fit


def _linear_truth_data(seed=0, n=80, m=2, noise=0.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2))
    ell = 1.0 + x @ np.array([0.5, -1.0])
    r = -0.5 + x @ np.array([1.0, 0.3])
    alpha = np.column_stack([0.2 + x[:, 0], -0.1 + x[:, 1]])[:, :m]
    y = ell + noise * rng.standard_normal(n)
    d = r + noise * rng.standard_normal(n)
    z = alpha + noise * rng.standard_normal((n, m))
    return Dataset(y=y, d=d, z=z, x=x)


def test_cross_fit_oracle_evaluates_truth_exactly():
    class Truth:
        def ell0(self, x):
            return x[:, 0] * 2.0

        def r0(self, x):
            return x[:, 1] * -1.0

        def alpha0(self, x):
            return np.column_stack([x[:, 0], x[:, 1]])

    ds = _linear_truth_data(seed=1, noise=0.5)
    folds = make_folds(ds.n, 4, seed=0)
    fits = cross_fit(ds, folds, LearnerSpec.oracle(Truth()))
    np.testing.assert_array_equal(fits.ell_hat, ds.x[:, 0] * 2.0)
    np.testing.assert_array_equal(fits.r_hat, ds.x[:, 1] * -1.0)


def test_cross_fit_noiseless_linear_recovers_residuals_exactly():
    ds = _linear_truth_data(seed=2, noise=0.0)
    folds = make_folds(ds.n, 2, seed=0)
    fits = cross_fit(ds, folds, LearnerSpec.linear())
    rd = residualize(ds, fits, folds)
    np.testing.assert_allclose(rd.y_bar, 0.0, atol=1e-8)
    np.testing.assert_allclose(rd.d_bar, 0.0, atol=1e-8)
    np.testing.assert_allclose(rd.z_bar, 0.0, atol=1e-8)


def test_cross_fit_p_zero_uses_training_fold_means():
    rng = np.random.default_rng(3)
    n = 40
    ds = Dataset(y=rng.standard_normal(n), d=rng.standard_normal(n),
                 z=rng.standard_normal((n, 1)), x=np.empty((n, 0)))
    folds = make_folds(n, 4, seed=0)
    fits = cross_fit(ds, folds, LearnerSpec.linear())
    for k in range(folds.K):
        tr = folds.complement(k)
        te = folds.folds[k]
        np.testing.assert_allclose(fits.ell_hat[te], ds.y[tr].mean(), atol=1e-12)
        np.testing.assert_allclose(fits.r_hat[te], ds.d[tr].mean(), atol=1e-12)


def test_cross_fit_model_count():
    ds = _linear_truth_data(seed=4, n=60, m=2, noise=0.3)
    folds = make_folds(ds.n, 3, seed=0)
    fits = cross_fit(ds, folds, LearnerSpec.linear())
    assert len(fits.summaries) == 3 * (2 + ds.m)
    targets = {s["target"] for s in fits.summaries}
    assert targets == {"outcome", "treatment", "instrument_1", "instrument_2"}


def test_cross_fit_fold_isolation():
    # perturbing outcomes inside fold k must not change the predictions
    # applied to fold k (the fold-k model trains on the complement)
    ds = _linear_truth_data(seed=5, n=100, noise=0.4)
    folds = make_folds(ds.n, 4, seed=1)
    fits = cross_fit(ds, folds, LearnerSpec.linear())
    k = 2
    y2 = np.array(ds.y)
    y2[folds.folds[k]] += 37.0
    ds2 = Dataset(y=y2, d=ds.d, z=ds.z, x=ds.x)
    fits2 = cross_fit(ds2, folds, LearnerSpec.linear())
    np.testing.assert_allclose(
        fits.ell_hat[folds.folds[k]], fits2.ell_hat[folds.folds[k]], atol=1e-10
    )
    # other folds train on fold k, so their predictions do change
    other = folds.folds[(k + 1) % 4]
    assert not np.allclose(fits.ell_hat[other], fits2.ell_hat[other], atol=1e-6)


def test_cross_fit_instrument_regressions_are_independent():
    # the fit for instrument j must not depend on other instrument columns
    ds = _linear_truth_data(seed=6, n=100, m=2, noise=0.4)
    folds = make_folds(ds.n, 4, seed=1)
    fits = cross_fit(ds, folds, LearnerSpec.linear())
    z2 = np.array(ds.z)
    z2[:, 1] = np.random.default_rng(9).standard_normal(ds.n)  # perturb column 2
    ds2 = Dataset(y=ds.y, d=ds.d, z=z2, x=ds.x)
    fits2 = cross_fit(ds2, folds, LearnerSpec.linear())
    np.testing.assert_allclose(fits.alpha_hat[:, 0], fits2.alpha_hat[:, 0], atol=1e-10)


def test_cross_fit_tags_fold_on_error():
    ds = _linear_truth_data(seed=7, n=24, noise=0.2)
    folds = make_folds(ds.n, 2, seed=0)
    spec = LearnerSpec.lasso(lambda_grid=(1e-9,), max_sweeps=1)
    # duplicated covariates force non-convergence in one sweep
    x = np.hstack([ds.x, ds.x])
    ds_bad = Dataset(y=ds.y, d=ds.d, z=ds.z, x=x)
    with pytest.raises(ConvergenceError, match="fold 0"):
        cross_fit(ds_bad, folds, spec)


def test_cross_fit_spline_and_lasso_run_end_to_end():
    ds = _linear_truth_data(seed=8, n=120, noise=0.5)
    folds = make_folds(ds.n, 3, seed=2)
    for spec in (LearnerSpec.spline(knots=4), LearnerSpec.lasso(n_lambda=20, cv_folds=3)):
        fits = cross_fit(ds, folds, spec)
        assert np.all(np.isfinite(fits.ell_hat))
        assert fits.alpha_hat.shape == (ds.n, ds.m)


def test_linear_partial_out_orthogonalizes_in_sample():
    ds = _linear_truth_data(seed=9, n=150, noise=0.7)
    rd = linear_partial_out(ds)
    design = np.column_stack([np.ones(ds.n), ds.x])
    np.testing.assert_allclose(design.T @ rd.y_bar, 0.0, atol=1e-8)
    np.testing.assert_allclose(design.T @ rd.d_bar, 0.0, atol=1e-8)
    np.testing.assert_allclose(design.T @ rd.z_bar, 0.0, atol=1e-7)
    assert (rd.fold_of == -1).all()


# ---------------------------------------------------------------------------
# Monte Carlo behavior (slow)

SEED = 20260811


@pytest.mark.slow
def test_lasso_recovers_sparse_support():
    # 5 active of 100 coefficients at n=750: cross-validated selection keeps
    # all true signals in at least 95% of trials
    hits = 0
    for r in range(100):
        rng = np.random.default_rng((SEED, 5, r))
        x = rng.standard_normal((750, 100))
        gamma = np.zeros(100)
        gamma[:5] = 1.0
        t = x @ gamma + rng.standard_normal(750)
        mdl = fit_lasso(x, t, seed=(SEED, 6, r))
        if set(range(5)) <= set(np.nonzero(mdl.coef_)[0]):
            hits += 1
    assert hits >= 95


@pytest.mark.slow
def test_spline_quadratic_out_of_sample_rmse():
    # squared covariate, noise sd 1, n=750: mean out-of-sample RMSE of the
    # estimated function stays below 0.15 (evaluated on the training range,
    # where the fitted function is defined)
    rmses = []
    for r in range(50):
        rng = np.random.default_rng((SEED, 7, r))
        x = rng.standard_normal((750, 1))
        t = x[:, 0] ** 2 + rng.standard_normal(750)
        mdl = fit_spline_additive(x, t)
        xte = rng.standard_normal((2000, 1))
        keep = (xte[:, 0] >= x.min()) & (xte[:, 0] <= x.max())
        xin = xte[keep]
        rmses.append(float(np.sqrt(np.mean((mdl.predict(xin) - xin[:, 0] ** 2) ** 2))))
    assert np.mean(rmses) < 0.15
