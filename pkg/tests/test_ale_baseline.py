import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbmr import ale_baseline as ale
from cbmr.data_io import FociDataset, Study
from cbmr.errors import ValidationError
from cbmr.synthetic import box_mask, sample_foci


def dense_ale(data, mask, fwhm):
    """Direct evaluation over all voxel pairs, without offsets or padding."""
    sigma = fwhm / (2 * np.sqrt(2 * np.log(2)))
    centers = mask.centers_mm
    surv = np.ones(mask.n_voxels)
    for s in data.studies:
        foci = centers[mask.lookup(mask.mm_to_voxel(s.foci))]
        d2 = ((centers[:, None, :] - foci[None, :, :]) ** 2).sum(-1)
        k = np.exp(-d2 / (2 * sigma**2))
        k[d2 > (3 * sigma) ** 2] = 0.0
        surv *= 1 - k.max(axis=1)
    return 1 - surv


def test_kernel_shape():
    mask = box_mask((15, 15, 15))
    offsets, values = ale.kernel_offsets(mask, 10.0)
    assert values[np.all(offsets == 0, axis=1)][0] == 1.0
    # reflection symmetry: the same set of offsets with the same values
    key = {tuple(o): v for o, v in zip(offsets.tolist(), values)}
    assert all(key[tuple(-np.array(o))] == v for o, v in key.items())
    radius = 3 * ale.fwhm_to_sigma(10.0)
    assert np.all(np.linalg.norm(offsets * 2.0, axis=1) <= radius)
    _, comp = ale.kernel_offsets(mask, 10.0, complement=True)
    np.testing.assert_allclose(comp, 1 - values, atol=1e-15)
    with pytest.raises(ValidationError):
        ale.kernel_offsets(mask, 0.0)


def test_two_half_kernels_give_three_quarters():
    # at half the FWHM from the focus the kernel equals 1/2
    mask = box_mask((5, 5, 5))
    focus = mask.centers_mm[mask.lookup(np.array([[2, 2, 2]]))]
    data = FociDataset((Study("a", focus), Study("b", focus)))
    res = ale.ale_map(data, mask, fwhm_mm=4.0)
    neighbour = mask.lookup(np.array([[3, 2, 2]]))[0]
    assert res.stat[neighbour] == pytest.approx(0.75, abs=1e-12)
    assert res.stat[mask.lookup(np.array([[2, 2, 2]]))[0]] == 1.0


@given(st.integers(0, 2**31))
def test_matches_dense_evaluation(seed):
    mask = box_mask((9, 8, 7))
    rng = np.random.default_rng(seed)
    data = sample_foci(mask, rng.integers(1, 4, size=3), rng)
    np.testing.assert_allclose(ale.ale_map(data, mask, 6.0).stat, dense_ale(data, mask, 6.0), atol=1e-12)


def test_adding_a_study_never_lowers_ale(rng):
    mask = box_mask((10, 10, 10))
    data = sample_foci(mask, [3, 4, 2], rng)
    more = FociDataset(data.studies + (Study("extra", mask.centers_mm[[5]]),))
    assert np.all(ale.ale_map(more, mask).stat >= ale.ale_map(data, mask).stat)


def test_null_test_is_calibrated_and_reproducible():
    mask = box_mask((12, 12, 12))
    fractions = []
    for seed in range(8):
        rng = np.random.default_rng(seed)
        data = sample_foci(mask, rng.integers(2, 6, size=12), rng)
        _, p = ale.ale_null_test(data, mask, 8.0, n_iter=100, rng=seed)
        assert np.all((p > 0) & (p <= 1))
        fractions.append((p < 0.05).mean())
    assert 0.02 <= np.mean(fractions) <= 0.08
    _, p1 = ale.ale_null_test(data, mask, 8.0, n_iter=20, rng=3)
    _, p2 = ale.ale_null_test(data, mask, 8.0, n_iter=20, rng=3)
    np.testing.assert_array_equal(p1, p2)


def test_dice_reference_counts():
    # overlap of 37301 voxels between masks of 41242 and 52371 voxels
    a = np.zeros(41242 + 52371 - 37301, dtype=bool)
    b = a.copy()
    a[:41242] = True
    b[41242 - 37301 : 41242 - 37301 + 52371] = True
    assert int((a & b).sum()) == 37301
    assert round(ale.dice(a, b) * 100, 2) == 79.69
    assert ale.dice(a, b) == pytest.approx(0.7969, abs=5e-5)


def test_dice_edge_cases():
    assert ale.dice(np.zeros(4), np.zeros(4)) == 0.0
    assert ale.dice(np.ones(4), np.ones(4)) == 1.0
    with pytest.raises(ValidationError):
        ale.dice(np.ones(3), np.ones(4))


def test_compare_masks_and_csv(tmp_path):
    cbmr_p = np.array([1e-6, 0.01, 0.2, 0.9])
    ale_p = np.array([1e-4, 0.3, 0.04, 0.9])
    rows = ale.compare_masks(cbmr_p, ale_p)
    unc = rows[0]
    assert (unc.n_cbmr, unc.n_ale, unc.n_both) == (2, 2, 1)
    assert unc.dsc == pytest.approx(0.5)
    path = ale.write_comparison(rows, tmp_path / "cmp.csv")
    table = list(csv.reader(path.open()))
    assert table[0] == ["threshold", "n_active_cbmr", "n_active_ale", "n_active_both", "dsc"]
    assert len(table) == 3
