import math
import warnings

import numpy as np
import pytest

from binagree import glmm
from binagree.data import LongDataset
from binagree.glmm import FitOptions, ModelSpec, VarianceComponents, WorkingData
from binagree.simulation import MODEL_1, SimConfig, generate, replicate_rng

from test_acceptance import one_way_reml, one_way_toy, zero_variance_dataset


@pytest.fixture(scope="module")
def model1_data():
    return generate(MODEL_1, replicate_rng(42, 0))


@pytest.fixture(scope="module")
def model1_fit(model1_data):
    return glmm.fit(model1_data, ModelSpec())


def _working(seed=0, spec=ModelSpec(), cfg=SimConfig(n_subjects=8, n_raters=4, n_times=4)):
    rng = np.random.Generator(np.random.Philox(seed))
    ds = generate(cfg, rng)
    d = glmm.build_design(ds, spec)
    return WorkingData.from_arrays(d, rng.normal(0, 1.5, d.n_obs), rng.uniform(0.2, 1.5, d.n_obs))


# -- AR(1) -----------------------------------------------------------------------


@pytest.mark.parametrize("rho", [-0.7, 0.0, 0.1, 0.95])
def test_ar1_precision_inverts_correlation(rho):
    t = np.array([1.0, 2.0, 3.0, 5.0, 6.0, 9.0])
    Q, logdet = glmm.ar1_precision(t, rho)
    R = glmm.ar1_matrix(t, rho)
    np.testing.assert_allclose(Q @ R, np.eye(len(t)), atol=1e-10)
    assert math.isclose(logdet, np.linalg.slogdet(R)[1], abs_tol=1e-12)


def test_ar1_matrix_validates():
    with pytest.raises(ValueError):
        glmm.ar1_matrix([1, 2], 1.0)
    with pytest.raises(ValueError):
        glmm.ar1_matrix([1, np.nan], 0.3)
    np.testing.assert_array_equal(glmm.ar1_matrix([1, 2, 3], 0.0), np.eye(3))


# -- design and mixed-model equations ------------------------------------------


def test_design_dimensions(model1_data):
    d = glmm.build_design(model1_data, ModelSpec())
    assert d.X.shape == (1000, 3)
    assert d.n_random == 100 + 2 * 30
    assert d.fixed_names == ("beta_1", "beta_2", "theta")
    assert len(d.block_starts) == 200
    # every row hits exactly one subject and one rater column
    np.testing.assert_array_equal(np.asarray(d.Z.sum(axis=1)).ravel(), 2.0)
    d0 = glmm.build_design(model1_data, ModelSpec(rater_effect="omitted", time_trend="none"))
    assert d0.X.shape == (1000, 2) and d0.n_random == 100


def test_design_rejects_single_rater():
    ds = LongDataset.from_arrays([0, 0, 1, 1], [0, 0, 0, 0], [1, 2, 1, 2], [1, 1, 1, 1], [1, 0, 0, 1])
    with pytest.raises(glmm.FitError, match="2 raters"):
        glmm.build_design(ds, ModelSpec(time_trend="none"))


@pytest.mark.parametrize("spec", [ModelSpec(), ModelSpec(rater_effect="omitted", residual_correlation="independent")])
def test_scaled_solver_matches_direct(spec):
    wd = _working(3, spec)
    vc = VarianceComponents(0.7, 0.3, 0.5, 0.4, scale=1.3)
    bs, us, cs = glmm.solve_mme(wd, vc, "scaled")
    bd, ud, cd = glmm.solve_mme(wd, vc, "direct")
    np.testing.assert_allclose(bs, bd, atol=1e-9)
    np.testing.assert_allclose(us, ud, atol=1e-9)
    np.testing.assert_allclose(cs, cd, atol=1e-9)


def test_reml_objective_matches_dense_formula():
    wd = _working(5)
    vc = VarianceComponents(0.6, 0.25, 0.45, 0.3)
    d = wd.design
    V = (d.Z.toarray() * d.random_scale([0.6, 0.25, 0.45]) ** 2) @ d.Z.toarray().T
    V += np.linalg.inv(glmm._dense_rinv(wd, 0.3))
    Vi = np.linalg.inv(V)
    XtViX = d.X.T @ Vi @ d.X
    beta = np.linalg.solve(XtViX, d.X.T @ Vi @ wd.P)
    r = wd.P - d.X @ beta
    expect = np.linalg.slogdet(V)[1] + np.linalg.slogdet(XtViX)[1] + r @ Vi @ r
    x = [math.log(0.6), math.log(0.25), math.log(0.45), math.atanh(0.3)]
    assert math.isclose(glmm.reml_objective(x, wd), expect, rel_tol=1e-10)


def test_reml_residual_scale_and_one_way_closed_form():
    wd, y, group = one_way_toy(6, 5, 7)
    for s2 in (0.05, 1.0):
        # scaling V by phi adds (N - p) log phi once the data are rescaled
        phi = 2.0
        got = glmm.reml_objective([math.log(s2), 0, 0, 0], wd, residual_scale=phi)
        scaled = glmm.WorkingData.from_arrays(wd.design, y / math.sqrt(phi))
        base = glmm.reml_objective([math.log(s2 / phi), 0, 0, 0], scaled)
        assert math.isclose(got, base + (len(y) - 1) * math.log(phi), rel_tol=1e-10)
        assert math.isclose(
            glmm.reml_objective([math.log(s2), 0, 0, 0], wd), one_way_reml(y, group, 6, 5, s2), rel_tol=1e-10
        )


@pytest.mark.parametrize("spec", [ModelSpec(), ModelSpec(rater_effect="omitted")])
def test_analytic_gradient_matches_finite_differences(spec):
    wd = _working(11, spec)
    x = np.array([math.log(0.5), math.log(0.2), math.log(0.6), math.atanh(0.35)])
    g = glmm.reml_gradient(x, wd, residual_scale=0.8)
    h = 1e-5
    fd = np.zeros(4)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd[k] = (glmm.reml_objective(x + e, wd, 0.8) - glmm.reml_objective(x - e, wd, 0.8)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)
    if spec.rater_effect == "omitted":
        assert g[1] == 0 and g[2] == 0


# -- probit pieces ---------------------------------------------------------------


def test_linearize_is_stable_in_the_tails():
    eta = np.array([-40.0, -8.0, 0.0, 8.0, 40.0])
    y = np.array([1, 1, 0, 0, 0])
    mu, w, P = glmm.linearize(eta, y)
    assert np.isfinite(w).all() and np.isfinite(P).all()
    assert (w > 0).all()
    assert mu[2] == 0.5 and math.isclose(w[2], 2 / math.pi, rel_tol=1e-12)


def test_probit_glm_recovers_coefficients():
    rng = np.random.Generator(np.random.Philox(1))
    X = np.column_stack([np.ones(20000), rng.normal(size=20000)])
    y = (X @ [0.3, -0.8] + rng.normal(size=20000) > 0).astype(int)
    beta, cov, ok = glmm.probit_glm(X, y)
    assert ok
    assert np.all(np.abs(beta - [0.3, -0.8]) < 4 * np.sqrt(np.diag(cov)))


def test_zero_variance_data_reduces_to_probit():
    ds = zero_variance_dataset(4)
    for scale in ("fixed", "estimated"):
        spec = ModelSpec(residual_scale=scale)
        oracle, _, _ = glmm.probit_glm(glmm.build_design(ds, spec).X, ds.y)
        res = glmm.fit(ds, spec, FitOptions(fixed_vc=(0, 0, 0, 0)))
        np.testing.assert_allclose(res.fixed.values, oracle, atol=1e-6)
        assert math.isnan(res.vc.se_sigma2_gamma)


# -- fitting ---------------------------------------------------------------------


def test_fit_model1_sane(model1_fit):
    res = model1_fit
    assert res.converged
    assert abs(res.fixed.beta_1 - 1.6) < 0.8 and abs(res.fixed.beta_2 - 1.6) < 0.8
    assert abs(res.fixed.theta + 0.5) < 0.3
    assert 0 <= res.vc.rho < 1
    cov = res.fixed.cov
    np.testing.assert_allclose(cov, cov.T, atol=1e-14)
    assert np.linalg.eigvalsh(cov).min() > 0
    assert res.eblup_alpha.shape == (30, 2)
    assert np.isfinite(res.vc.se_sigma2_gamma)


def test_eblups_are_centered(model1_fit):
    # the subject and rater indicators lie in the span of the method indicators
    assert abs(model1_fit.eblup_gamma.sum()) < 1e-6
    np.testing.assert_allclose(model1_fit.eblup_alpha.sum(axis=0), 0, atol=1e-6)


def test_fit_is_deterministic(model1_data, model1_fit):
    again = glmm.fit(model1_data, ModelSpec())
    np.testing.assert_array_equal(again.fixed.values, model1_fit.fixed.values)
    assert again.vc == model1_fit.vc


def test_nonconvergence_is_reported(model1_data):
    with pytest.warns(RuntimeWarning, match="converge"):
        res = glmm.fit(model1_data, ModelSpec(), FitOptions(max_outer=1, compute_se=False))
    assert not res.converged
    assert res.n_outer_iterations == 1


def test_separation_warns_and_fits():
    ds = LongDataset.from_arrays(
        np.repeat(np.arange(6), 4),
        np.tile([0, 1, 1, 0], 6),
        np.tile([1, 1, 2, 2], 6),
        np.tile([1.0, 2.0, 1.0, 2.0], 6),
        np.tile([1, 1, 0, 1], 6),
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = glmm.fit(ds, ModelSpec(time_trend="none"), FitOptions(compute_se=False, max_outer=20))
    assert any("separation" in str(w.message) for w in caught)
    assert np.isfinite(res.fixed.values).all()


def test_fixed_scale_variant(model1_data):
    res = glmm.fit(model1_data, ModelSpec(residual_scale="fixed"), FitOptions(compute_se=False))
    assert res.converged and res.vc.scale == 1.0


# -- tests of equal method effects ---------------------------------------------


def test_z_test_worked_example():
    t = glmm.z_test(0.5706, 0.1627)
    assert math.isclose(t.statistic, 3.507, abs_tol=5e-4)
    assert t.p_value < 0.001
    assert math.isclose(t.ci_high - t.ci_low, 2 * 1.959964 * 0.1627, rel_tol=1e-6)


def test_wald_test_uses_covariance(model1_fit):
    t = glmm.wald_test(model1_fit)
    cov = model1_fit.fixed.cov
    assert math.isclose(t.std_error, math.sqrt(cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]))
    assert 0 <= t.p_value <= 1
    with pytest.raises(ValueError):
        glmm.z_test(1.0, 1.0, level=1.0)
