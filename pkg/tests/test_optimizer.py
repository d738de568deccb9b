import numpy as np
import pytest
import scipy.sparse as sp

from cbmr import optimizer as opt
from cbmr import stochastic_models as sm
from cbmr.errors import SingularInformationError, ValidationError
from cbmr.optimizer import FitConfig, fit
from cbmr.stochastic_models import ModelParams, SufficientStats
from cbmr.synthetic import gaussian_bump, nb_counts, poisson_counts


def bump_stats(mask, design, rng, m=30, per_study=40.0, covariate=None):
    w = gaussian_bump(mask, (4, -6, 2), 8.0, 4.0)
    mu_x = w / w.sum() * per_study
    mu_z = np.ones(m) if covariate is None else np.exp(0.4 * covariate)
    yv, ys = poisson_counts(mu_x, mu_z, rng)
    z = None if covariate is None else covariate[:, None]
    return SufficientStats(design.matrix, yv, ys, z)


def test_scoring_and_lbfgs_agree(small_mask, small_design, rng):
    cov = rng.normal(size=30)
    st = bump_stats(small_mask, small_design, rng, covariate=cov)
    assert st.total >= 1000
    fs = opt.fisher_scoring_poisson(st)
    lb = opt.lbfgs_fit(sm.POISSON, st)
    assert fs.converged and lb.converged
    assert abs(fs.loglik - lb.loglik) <= 1e-6
    assert np.max(np.abs(fs.params.beta - lb.params.beta)) <= 1e-4
    assert np.max(np.abs(fs.params.gamma - lb.params.gamma)) <= 1e-4


def test_intercept_only_closed_form():
    # a single constant basis: the MLE is the homogeneous rate
    x = sp.csr_matrix(np.ones((50, 1)))
    yv = np.arange(50) % 3
    st = SufficientStats(x, yv, [yv.sum() - 10, 10])
    res = fit(sm.POISSON, st)
    assert res.params.beta[0] == pytest.approx(np.log(yv.sum() / (2 * 50)), abs=1e-10)
    quasi = fit(sm.QUASI_POISSON, st)
    np.testing.assert_allclose(quasi.params.beta, res.params.beta, atol=1e-8)


def test_score_vanishes_at_poisson_mle(small_mask, small_design, rng):
    cov = rng.normal(size=30)
    st = bump_stats(small_mask, small_design, rng, covariate=cov)
    res = fit(sm.POISSON, st)
    assert np.max(np.abs(sm.gradient(sm.POISSON, res.params, st))) <= 1e-6
    # with an unpenalized covariate, fitted study totals reproduce the covariate moment
    f = sm.intensity_factors(res.params, st)
    assert (cov * f.mu_z).sum() * f.sum_x == pytest.approx((cov * st.y_per_study).sum(), rel=1e-8)


def test_nb_recovers_strong_dispersion(small_mask, small_design):
    m, alpha = 10, 3.0
    mu_x = np.full(small_mask.n_voxels, 1.0 / m)
    yv, ys = nb_counts(mu_x, np.ones(m), alpha, np.random.default_rng(0))
    res = fit(sm.NB, SufficientStats(small_design.matrix, yv, ys))
    assert res.converged
    assert 1.5 < res.params.alpha < 6.0


def test_quasi_dispersion_floor(small_mask, small_design, rng):
    st = bump_stats(small_mask, small_design, rng)
    res = fit(sm.QUASI_POISSON, st)
    assert res.loglik is None and res.theta_hat is not None
    assert res.params.theta == max(1.0, res.theta_hat)
    pois = fit(sm.POISSON, st)
    np.testing.assert_allclose(res.fisher_info, pois.fisher_info / res.params.theta, rtol=1e-10)


def test_poisson_information_matches_numerical(small_design, rng):
    x = small_design.matrix
    z = rng.normal(size=(6, 2))
    prm = ModelParams(rng.normal(-3, 0.3, size=x.shape[1]), rng.normal(0, 0.2, size=2))
    st = SufficientStats(x, np.zeros(x.shape[0], dtype=int) + 1, [x.shape[0], 0, 0, 0, 0, 0], z)
    ana = opt.poisson_information(prm, st)
    num = opt.numerical_information(sm.POISSON, prm, st)
    np.testing.assert_allclose(ana, num, rtol=1e-5, atol=1e-6 * np.abs(ana).max())


@pytest.mark.parametrize("strategy", ["random", "poisson"])
def test_init_strategies_reach_the_same_optimum(small_mask, small_design, rng, strategy):
    st = bump_stats(small_mask, small_design, rng)
    base = fit(sm.CLUSTERED_NB, st)
    other = fit(sm.CLUSTERED_NB, st, FitConfig(init_strategy=strategy, seed=3))
    assert other.loglik == pytest.approx(base.loglik, abs=1e-5)


def test_lbfgs_minimize_rosenbrock():
    def fg(v):
        a, b = v
        f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        return f, np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])

    res = opt.lbfgs_minimize(fg, np.array([-1.2, 1.0]), FitConfig(max_iter=500, tol_grad=1e-8))
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
    scaled = opt.lbfgs_minimize(fg, np.array([-1.2, 1.0]), FitConfig(max_iter=500, tol_grad=1e-8), np.array([2.0, 5.0]))
    np.testing.assert_allclose(scaled.x, [1.0, 1.0], atol=1e-6)


def test_moment_log_alpha_is_clipped():
    x = sp.csr_matrix(np.ones((4, 1)))
    flat = SufficientStats(x, [1, 1, 1, 1], [2, 2])
    assert np.exp(opt.moment_log_alpha(sm.NB, flat)) == pytest.approx(opt.ALPHA_INIT_RANGE[0])
    spiky = SufficientStats(x, [400, 0, 0, 0], [8] * 50)
    assert np.exp(opt.moment_log_alpha(sm.NB, spiky)) == pytest.approx(opt.ALPHA_INIT_RANGE[1])


def test_config_and_input_validation():
    with pytest.raises(ValidationError):
        FitConfig(tol_grad=0)
    with pytest.raises(ValidationError):
        FitConfig(init_strategy="zeros")
    x = sp.csr_matrix(np.ones((3, 1)))
    with pytest.raises(ValidationError, match="no foci"):
        fit(sm.POISSON, SufficientStats(x, [0, 0, 0], [0]))
    with pytest.raises(ValidationError):
        opt.lbfgs_fit(sm.QUASI_POISSON, SufficientStats(x, [1, 0, 0], [1]))


def test_low_foci_note_and_singular_covariance():
    x = sp.csr_matrix(np.eye(3))
    res = fit(sm.POISSON, SufficientStats(x, [5, 0, 2], [7]), FitConfig(max_iter=50))
    assert any("foci" in n for n in res.notes)
    # an empty voxel drives its coefficient to -inf: no usable information
    if res.singular_flag:
        with pytest.raises(SingularInformationError):
            res.covariance()


def test_summary_is_json_ready(small_mask, small_design, rng):
    import json

    st = bump_stats(small_mask, small_design, rng)
    res = fit(sm.NB, st)
    out = json.loads(json.dumps(res.summary()))
    assert out["model_kind"] == "nb" and out["alpha"] > 0
