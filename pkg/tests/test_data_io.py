import gzip

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbmr.data_io import (
    BrainMask,
    CovariateSpec,
    FociDataset,
    Study,
    build_counts,
    load_foci,
    load_mask,
    prepare_covariates,
    read_stat_map,
    reference_mask,
    write_foci,
    write_json,
    write_mask,
    write_stat_map,
)
from cbmr.errors import ValidationError
from cbmr.synthetic import box_mask, ellipsoid_mask


def _write(tmp_path, text, name="foci.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_foci_groups_by_study_in_order(tmp_path):
    p = _write(tmp_path, "study_id,x,y,z,n\nb,0,0,0,10\na,2,2,2,20\nb,4,4,4,10\n")
    data = load_foci(p)
    assert [s.study_id for s in data.studies] == ["b", "a"]
    assert data.n_foci == 3
    np.testing.assert_array_equal(data.covariate("n"), [10, 20])


def test_load_foci_tsv_by_extension(tmp_path):
    p = _write(tmp_path, "study_id\tx\ty\tz\ns1\t1\t2\t3\n", "foci.tsv")
    assert load_foci(p).studies[0].foci.tolist() == [[1.0, 2.0, 3.0]]


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("study_id,x,y\ns,1,2\n", "missing"),
        ("study_id,x,y,z\ns,1,two,3\n", r"csv:2: could not convert"),
        ("study_id,x,y,z,n\ns,1,2,3,5\ns,1,2,4,6\n", "vary within study"),
        ("", "empty"),
    ],
)
def test_load_foci_rejects_malformed(tmp_path, text, fragment):
    with pytest.raises(ValidationError, match=fragment):
        load_foci(_write(tmp_path, text))


def test_load_foci_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_foci(tmp_path / "nope.csv")


def test_foci_round_trip(tmp_path):
    data = FociDataset((Study("s1", [[1.5, -2.0, 3.25]], {"n": 12.0}), Study("s2", [[0, 0, 0], [2, 2, 2]], {"n": 30.0})))
    write_foci(data, tmp_path / "out.csv")
    back = load_foci(tmp_path / "out.csv")
    assert back.n_studies == 2
    np.testing.assert_array_equal(back.studies[1].foci, data.studies[1].foci)
    np.testing.assert_array_equal(back.covariate("n"), [12.0, 30.0])


def test_dataset_rejects_duplicate_ids_and_empty_studies():
    with pytest.raises(ValidationError):
        FociDataset((Study("a", [[0, 0, 0]]), Study("a", [[1, 1, 1]])))
    with pytest.raises(ValidationError):
        FociDataset((Study("a", np.zeros((0, 3))),))


def test_reference_mask_is_mni_2mm():
    mask = reference_mask()
    assert mask.dims == (91, 109, 91)
    assert mask.n_voxels == 228483
    np.testing.assert_allclose(mask.voxel_size, [2, 2, 2])


def test_mask_enumeration_is_x_fastest():
    mask = box_mask((3, 2, 2))
    assert mask.voxel_ijk[:4].tolist() == [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]]


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 11), st.integers(0, 9)), min_size=1, max_size=30))
def test_voxel_world_round_trip(ijk):
    mask = ellipsoid_mask((10, 12, 10))
    ijk = np.array(ijk)
    np.testing.assert_array_equal(mask.mm_to_voxel(mask.voxel_to_mm(ijk)), ijk)


def test_mm_to_voxel_rounds_half_away_from_zero():
    mask = BrainMask(np.ones((4, 4, 4), bool), np.diag([2.0, 2.0, 2.0, 1.0]))
    out = mask.mm_to_voxel([[1.0, 3.0, -1.0]])
    assert out.tolist() == [[1, 2, -1]]


def test_build_counts_drops_outside_and_deduplicates():
    mask = box_mask((4, 4, 4))
    data = FociDataset((
        Study("a", [[0, 0, 0], [0.4, 0, 0], [2, 2, 2], [100, 0, 0]]),
        Study("b", [[0, 0, 0]]),
    ))
    c = build_counts(data, mask)
    assert c.n_dropped_outside == 1
    assert c.n_deduplicated == 1
    assert c.n_foci_in_file == 5
    assert c.y_per_study.tolist() == [2, 1]
    assert c.y_per_voxel[mask.lookup([[0, 0, 0]])[0]] == 2
    assert c.total == c.y_per_voxel.sum()


@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_count_totals_agree(m, seed):
    rng = np.random.default_rng(seed)
    mask = box_mask((5, 5, 5))
    studies = tuple(Study(f"s{i}", rng.uniform(-2, 10, size=(rng.integers(1, 8), 3))) for i in range(m))
    c = build_counts(FociDataset(studies), mask)
    assert c.y_per_voxel.sum() == c.y_per_study.sum()
    assert c.total + c.n_dropped_outside + c.n_deduplicated == c.n_foci_in_file


def test_prepare_covariates_sqrt_and_standardize():
    studies = tuple(Study(f"s{i}", [[0, 0, 0]], {"n": v}) for i, v in enumerate([4.0, 16.0, 36.0]))
    cov = prepare_covariates(FociDataset(studies), [CovariateSpec("n", "sqrt", True)])
    col = np.sqrt([4.0, 16.0, 36.0])
    np.testing.assert_allclose(cov.z[:, 0], (col - col.mean()) / col.std(ddof=1))
    again = prepare_covariates(FociDataset(studies), [("n", "sqrt", True)], cov.transform_log)
    np.testing.assert_array_equal(again.z, cov.z)


def test_prepare_covariates_rejects_constant():
    studies = tuple(Study(f"s{i}", [[0, 0, 0]], {"n": 5.0}) for i in range(3))
    with pytest.raises(ValidationError, match="zero variance"):
        prepare_covariates(FociDataset(studies), [CovariateSpec("n", standardize=True)])


def test_stat_map_round_trip_and_determinism(tmp_path):
    mask = ellipsoid_mask((8, 10, 8))
    values = np.linspace(-1, 1, mask.n_voxels)
    a = write_stat_map(values, mask, tmp_path / "a.nii.gz")
    b = write_stat_map(values, mask, tmp_path / "b.nii.gz")
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_allclose(read_stat_map(a, mask), values.astype(np.float32))
    img = nib.load(str(a))
    np.testing.assert_allclose(img.affine, mask.affine)
    assert gzip.decompress(a.read_bytes())[:4] == (348).to_bytes(4, "little")


def test_mask_write_and_load(tmp_path):
    mask = ellipsoid_mask((8, 10, 8))
    path = write_mask(mask, tmp_path / "m.nii.gz")
    back = load_mask(path)
    np.testing.assert_array_equal(back.inside, mask.inside)
    np.testing.assert_allclose(back.affine, mask.affine)


def test_load_mask_errors(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_mask(tmp_path / "missing.nii.gz")
    bad = tmp_path / "bad.nii.gz"
    bad.write_bytes(b"not a nifti")
    with pytest.raises(ValidationError):
        load_mask(bad)


def test_write_json_is_sorted(tmp_path):
    write_json({"b": 1, "a": [1.5]}, tmp_path / "x.json")
    assert (tmp_path / "x.json").read_text().startswith('{\n  "a"')
