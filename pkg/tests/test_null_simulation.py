import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbmr import null_simulation as ns
from cbmr import stochastic_models as sm
from cbmr.data_io import CovariateSpec, build_counts
from cbmr.errors import ValidationError
from cbmr.synthetic import sample_foci


@pytest.fixture(scope="module")
def template(small_mask):
    rng = np.random.default_rng(8)
    return sample_foci(small_mask, rng.poisson(15, size=20), rng, covariates={"n": rng.normal(size=20)})


def test_empirical_sampler_keeps_counts(template, small_mask, rng):
    data = ns.sample_null_empirical(template, small_mask, rng)
    assert [s.foci.shape[0] for s in data.studies] == [s.foci.shape[0] for s in template.studies]
    counts = build_counts(data, small_mask)
    assert counts.y_per_voxel.sum() == template.n_foci
    assert [s.covariates for s in data.studies] == [s.covariates for s in template.studies]


def test_model_based_sampler(template, small_mask):
    data = ns.sample_null_model_based(template, small_mask, np.random.default_rng(1))
    for s in data.studies:
        assert np.unique(s.foci, axis=0).shape[0] == s.foci.shape[0]
    with pytest.raises(ValidationError, match="alpha"):
        ns.sample_null_model_based(template, small_mask, np.random.default_rng(1), sm.NB)
    # study totals follow the requested count model on average
    totals = [
        ns.sample_null_model_based(template, small_mask, np.random.default_rng(s), sm.CLUSTERED_NB, 0.5).n_foci
        for s in range(40)
    ]
    assert np.mean(totals) == pytest.approx(template.n_foci, rel=0.1)


@given(st.integers(1, 5000))
def test_pp_ranks_are_valid(n):
    r = ns._pp_ranks(n)
    assert r[0] == 1 and r[-1] == n and np.all(np.diff(r) > 0)
    e = ns.expected_quantiles(n, r)
    assert np.all(np.diff(e) < 0) and e[-1] > 0


def test_config_validation(template):
    with pytest.raises(ValidationError):
        ns.NullConfig(template, sampler="bootstrap")
    with pytest.raises(ValidationError):
        ns.NullConfig(template, n_realizations=0)
    with pytest.raises(ValidationError):
        ns.NullConfig(template, with_covariates=True)


def test_calibration_run_is_reproducible(template, small_mask, small_design, tmp_path):
    cfg = ns.NullConfig(template, n_realizations=6, seed=5)
    a = ns.run_calibration(cfg, small_mask, small_design)
    b = ns.run_calibration(cfg, small_mask, small_design)
    np.testing.assert_array_equal(a.pp_mean, b.pp_mean)
    assert a.n_used + a.n_excluded == 6
    assert 0.0 <= a.fpr_at_05 <= 0.2
    # the envelope is the mean plus or minus 1.96 standard deviations
    half = (a.pp_hi - a.pp_lo) / 2
    np.testing.assert_allclose(a.pp_mean - a.pp_lo, half)
    rows = list(csv.reader(a.write_csv(tmp_path / "c.csv").open()))
    assert rows[0][0] == "rank" and len(rows) == a.pp_rank.size + 1
    assert a.summary()["n_voxels"] == small_mask.n_voxels


def test_calibration_with_covariates_and_nb(template, small_mask, small_design):
    cfg = ns.NullConfig(
        template, n_realizations=2, model_kind=sm.NB, with_covariates=True,
        covariates=(CovariateSpec("n"),), seed=2, sampler="empirical_shuffle",
    )
    res = ns.run_calibration(cfg, small_mask, small_design)
    assert res.n_used + res.n_excluded == 2


def test_identity_coverage_logic():
    exp = ns.expected_quantiles(100)
    res = ns.CalibrationResult(
        np.arange(1, 101), exp, exp, exp - 0.1, exp + 0.1, 0.05, 0.0, 0.0, 1, 0, 100, np.array([0.05])
    )
    assert res.identity_covered(1e-3)
    shifted = ns.CalibrationResult(
        np.arange(1, 101), exp, exp + 1, exp + 0.5, exp + 1.5, 0.05, 0.0, 0.0, 1, 0, 100, np.array([0.05])
    )
    assert not shifted.identity_covered(1e-3)
