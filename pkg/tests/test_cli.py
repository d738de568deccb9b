import json
import subprocess
import sys

import numpy as np
import pytest

from cbmr import cli
from cbmr.data_io import load_mask, read_stat_map

FAST = ["--simulation-n-realizations", "3", "--ale-n-iter", "20"]
PIPELINE = ["fit", "infer", "glh", "select", "simulate-null", "ale", "compare", "plot-pp"]


def run(*args) -> int:
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def example(tmp_path_factory):
    root = tmp_path_factory.mktemp("example")
    assert run("make-example", "--output-dir", root) == 0
    return root


@pytest.fixture(scope="module")
def pipeline_outputs(example, tmp_path_factory):
    outs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        for cmd in PIPELINE:
            assert run(cmd, "--config", example / "config.toml", "--output-dir", out, *FAST) == 0, cmd
        outs.append(out)
    return outs


def test_pipeline_outputs_exist(pipeline_outputs, example):
    out = pipeline_outputs[0]
    for name in (
        "fit.json", "fit.npz", "eta_x.nii.gz", "mu_x.nii.gz", "z.nii.gz", "neglog10p.nii.gz",
        "fdr_rejected.nii.gz", "infer.json", "glh.json", "selection_report.csv", "calibration.csv",
        "ale.nii.gz", "ale_z.nii.gz", "comparison.csv", "pp_plot.svg",
    ):
        assert (out / name).is_file(), name
    mask = load_mask(example / "example_mask.nii.gz")
    z = read_stat_map(out / "z.nii.gz", mask)
    assert z.shape == (mask.n_voxels,) and np.isfinite(z).all()
    glh = json.loads((out / "glh.json").read_text())
    assert glh["df"] == 1 and glh["z_signed"] is not None


def test_reruns_are_byte_identical(pipeline_outputs):
    a, b = pipeline_outputs
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_missing_prerequisite_exits_1(example, tmp_path, capsys):
    assert run("infer", "--config", example / "config.toml", "--output-dir", tmp_path) == 1
    assert "cbmr fit" in capsys.readouterr().err


def test_bad_input_exits_1(tmp_path, capsys):
    bad = tmp_path / "foci.csv"
    bad.write_text("study_id,x,y,z\ns1,1,2\n")
    assert run("fit", "--foci", bad, "--output-dir", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[model]\nkindd = 'nb'\n")
    assert run("fit", "--config", cfg) == 1


def test_unconverged_fit_exits_2(example, tmp_path):
    code = run("fit", "--config", example / "config.toml", "--output-dir", tmp_path,
               "--model-kind", "nb", "--fit-max-iter", "1")
    assert code == 2


def test_help_lists_every_config_key():
    proc = subprocess.run([sys.executable, "-m", "cbmr", "fit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for ck in cli.CONFIG_KEYS:
        assert ck.key in proc.stdout, ck.key


def test_threads_validation(example, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert run("fit", "--config", example / "config.toml", "--output-dir", tmp_path) == 1
