import json

import numpy as np
import pytest

from normalforge import fileio
from normalforge.metrics import evaluate

from cli_pipeline import run_cli, run_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    return d, run_pipeline(d, threads=1)


def test_pipeline_outputs(pipeline):
    d, out = pipeline
    assert len(fileio.read_cloud(d / "cube.xyz")) == 600
    assert fileio.read_cloud(d / "cube.xyz").gt_normals is not None
    filt = np.loadtxt(d / "cube_filt.nrm")
    assert filt.shape[0] == 600 and filt.shape[1] % 3 == 0
    assert fileio.read_cloud(d / "cube_dn.xyz").gt_normals is None
    report = json.loads(out["eval.json"])
    assert set(report["pgp"]) == {"5", "10", "20"} and report["count"] == 600
    errs = fileio.read_values(d / "cube_err.txt")
    ref = evaluate(fileio.read_normals(d / "cube_ref.nrm"), fileio.read_normals(d / "cube.xyz"))
    assert np.allclose(errs, ref.per_point_errors_deg, atol=1e-6)
    v = fileio.read_ply_vertices(d / "heat_gt.ply")
    assert len(v["x"]) == 600
    assert out["model.nfm"][:4] == b"NFMD"


def test_eval_stdout_and_mismatch(pipeline, tmp_path):
    d, _ = pipeline
    proc = run_cli(["eval", "--in", d / "cube_pca.nrm", "--gt", d / "cube.xyz"], tmp_path)
    assert json.loads(proc.stdout)["count"] == 600
    bad = run_cli(["eval", "--in", d / "dih_smfps.nrm", "--gt", d / "cube.xyz"], tmp_path, check=False)
    assert bad.returncode != 0 and "LengthMismatch" in bad.stderr


@pytest.mark.parametrize("args,needle", [
    (["estimate", "--in", "missing.xyz", "--out", "x"], "missing.xyz"),
    (["synth", "--shape", "cube", "--count", 10, "--noise", -1, "--out", "x"], "noise"),
    (["synth", "--shape", "cube", "--out", "x", "--seed", -4], "seed"),
])
def test_errors_exit_nonzero(tmp_path, args, needle):
    proc = run_cli(args, tmp_path, check=False)
    assert proc.returncode != 0 and needle in proc.stderr


def test_bad_config_key(tmp_path):
    (tmp_path / "c.json").write_text('{"mfps": {"scale": [1]}}')
    proc = run_cli(["synth", "--shape", "plane", "--out", "p.xyz", "--config", "c.json"], tmp_path, check=False)
    assert proc.returncode == 2 and "scale" in proc.stderr


def test_resolved_config_logged(tmp_path):
    proc = run_cli(["synth", "--shape", "plane", "--count", 10, "--out", "p.xyz", "--seed", 11], tmp_path)
    line = next(l for l in proc.stderr.splitlines() if "resolved config" in l)
    cfg = json.loads(line.split("resolved config: ", 1)[1])
    assert cfg["seed"] == 11 and cfg["train"]["seed"] == 11


def test_clean_plane_mfps_roundtrip(tmp_path):
    run_cli(["synth", "--shape", "plane", "--count", 3000, "--out", "plane.xyz"], tmp_path)
    run_cli(["estimate", "--in", "plane.xyz", "--method", "mfps", "--out", "plane.nrm"], tmp_path)
    proc = run_cli(["eval", "--in", "plane.nrm", "--gt", "plane.xyz"], tmp_path)
    assert json.loads(proc.stdout)["mean_deg"] < 0.1


def test_filter_requires_matching_normals(pipeline, tmp_path):
    d, _ = pipeline
    proc = run_cli(["filter", "--in", d / "cube.xyz", "--normals", d / "dih_smfps.nrm", "--out", "f"],
                   tmp_path, check=False)
    assert proc.returncode == 2


def test_train_needs_ground_truth(pipeline, tmp_path):
    d, _ = pipeline
    proc = run_cli(["train", "--in", d / "cube_dn.xyz", "--out", "m.nfm"], tmp_path, check=False)
    assert proc.returncode == 2 and "6 columns" in proc.stderr
