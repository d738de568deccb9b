import csv
import warnings
from dataclasses import replace

import numpy as np
import pytest

from cbmr import model_selection as ms
from cbmr import stochastic_models as sm
from cbmr.errors import NumericalError, ValidationError
from cbmr.optimizer import fit
from cbmr.stochastic_models import SufficientStats
from cbmr.synthetic import gaussian_bump, nb_counts


@pytest.fixture(scope="module")
def overdispersed(small_mask, small_design):
    m = 10
    w = gaussian_bump(small_mask, (0, 0, 0), 8.0, 4.0)
    mu_x = w / w.sum() * small_mask.n_voxels / m
    yv, ys, ysq = nb_counts(mu_x, np.ones(m), 3.0, np.random.default_rng(0), with_squares=True)
    st = SufficientStats(small_design.matrix, yv, ys)
    fits = {k: fit(k, st) for k in sm.MODEL_KINDS}
    return fits, st, ysq


def test_lrt_detects_overdispersion(overdispersed):
    fits, _, _ = overdispersed
    res = ms.lrt(fits[sm.POISSON], fits[sm.NB])
    assert res.stat > 0 and res.p < 1e-8
    assert res.p_mixture == pytest.approx(res.p / 2)
    assert res.stat == pytest.approx(2 * (fits[sm.NB].loglik - fits[sm.POISSON].loglik))


def test_lrt_guards(overdispersed):
    fits, _, _ = overdispersed
    with pytest.raises(ValidationError):
        ms.lrt(fits[sm.NB], fits[sm.POISSON])
    with pytest.raises(NumericalError):
        ms.lrt(fits[sm.POISSON], replace(fits[sm.NB], converged=False))
    worse = replace(fits[sm.NB], loglik=fits[sm.POISSON].loglik - 1e-9)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        res = ms.lrt(fits[sm.POISSON], worse)
    assert res.clamped and res.stat == 0.0 and res.p == 1.0 and res.p_mixture == 1.0
    assert any(issubclass(w.category, RuntimeWarning) for w in rec)


def test_information_criteria(overdispersed):
    fits, st, _ = overdispersed
    f = fits[sm.NB]
    aic, bic = ms.information_criteria(f)
    k = st.p + 1
    assert aic == pytest.approx(2 * k - 2 * f.loglik)
    assert bic == pytest.approx(k * np.log(st.n) - 2 * f.loglik)
    with pytest.raises(ValidationError):
        ms.information_criteria(fits[sm.QUASI_POISSON])
    assert ms.natural_n_obs(fits[sm.CLUSTERED_NB], st) == st.m


def test_bias_ordering_on_overdispersed_data(overdispersed, small_mask):
    fits, st, ysq = overdispersed
    report = ms.select_models(fits, st, small_mask, y_sq_per_voxel=ysq)
    for row in report.rows:
        assert abs(row.bias.sum_intensity) < 5e-3
    assert report.row(sm.POISSON).bias.voxel_variance < report.row(sm.NB).bias.voxel_variance
    assert report.row(sm.NB).aic < report.row(sm.POISSON).aic
    assert report.row(sm.QUASI_POISSON).aic is None


def test_voxel_variance_on_known_values():
    # two voxels, three studies, Poisson fit at the sample means
    from cbmr.data_io import BrainMask

    mask = BrainMask(np.ones((2, 1, 1), dtype=bool), np.eye(4))
    x = np.eye(2)
    st = SufficientStats(x, [3, 6], [3, 3, 3])
    res = fit(sm.POISSON, st)
    # per-study counts (1,1,1) on voxel 0 and (1,2,3) on voxel 1
    ysq = np.array([3, 14])
    b = ms.bias_metrics(res, st, mask, ysq)
    # voxel 0 has zero empirical variance and is skipped; voxel 1: (2 - 1) / 1
    assert b.voxel_variance == pytest.approx(1.0)
    assert b.sum_intensity == pytest.approx(0.0, abs=1e-9)


def test_report_outputs(overdispersed, small_mask, tmp_path):
    fits, st, _ = overdispersed
    report = ms.select_models(fits, st, small_mask)
    path = report.write_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(path.open()))
    assert [r["model"] for r in rows] == list(sm.MODEL_KINDS)
    assert rows[[r["model"] for r in rows].index("quasi_poisson")]["aic"] == ""
    assert any("studies" in n for n in report.notes)
    summary = report.summary()
    assert summary["lrt_nb_vs_poisson"]["p"] < 1e-8
