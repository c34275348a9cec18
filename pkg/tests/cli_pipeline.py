"""Runs every CLI subcommand as a subprocess on small inputs (shared by the
CLI tests and the determinism acceptance check)."""

import json
import os
import subprocess
import sys
from pathlib import Path

# small enough that a full pipeline runs in well under a minute
TINY_CONFIG = {
    "preset": "desk",
    "mfps": {"scales": [10, 20, 30], "classify_k": 20, "orient_k": 15, "plane_samples": 30},
    "features": {"max_pts": 16},
    "net": {"point_mlp": [8, 16], "point_fc": [16], "conv": [4, 0], "hmp_fc": [16],
            "feature_dim": 8, "lift": [8], "head": [16]},
    "train": {"epochs": 2, "batch": 32, "samples_per_cloud": 40},
    "denoise": {"iterations": 3},
}


def run_cli(args, cwd, threads=None, check=True):
    env = dict(os.environ)
    env.pop("NUMBA_NUM_THREADS", None)
    if threads is not None:
        env["NORMALFORGE_THREADS"] = str(threads)
    proc = subprocess.run([sys.executable, "-m", "normalforge", *map(str, args)], cwd=cwd, env=env,
                          capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"normalforge {' '.join(map(str, args))} failed:\n{proc.stderr}")
    return proc


def run_pipeline(workdir, threads=None) -> dict[str, bytes]:
    """Run all eight subcommands; return {output file name: bytes}."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "cfg.json").write_text(json.dumps(TINY_CONFIG))
    c = ["--config", "cfg.json", "--seed", "3"]
    steps = [
        ["synth", "--shape", "cube", "--count", 600, "--noise", 0.005, "--out", "cube.xyz"],
        ["synth", "--shape", "cylinder", "--count", 600, "--noise", 0.005, "--out", "cyl.xyz"],
        ["synth", "--shape", "dihedral", "--count", 500, "--noise", 0.002, "--angle", 120, "--out", "dih.xyz"],
        ["estimate", "--in", "cube.xyz", "--method", "pca", "--out", "cube_pca.nrm"],
        ["estimate", "--in", "cube.xyz", "--method", "mfps", "--out", "cube_mfps.nrm"],
        ["estimate", "--in", "cyl.xyz", "--method", "mfps", "--out", "cyl_mfps.nrm"],
        ["estimate", "--in", "dih.xyz", "--method", "simple-mfps", "--out", "dih_smfps.nrm"],
        ["filter", "--in", "cube.xyz", "--normals", "cube_mfps.nrm", "--out", "cube_filt.nrm"],
        ["train", "--in", "cube.xyz,cyl.xyz", "--normals", "cube_mfps.nrm,cyl_mfps.nrm", "--out", "model.nfm"],
        ["refine", "--in", "cube.xyz", "--normals", "cube_mfps.nrm", "--model", "model.nfm",
         "--out", "cube_ref.nrm"],
        ["denoise", "--in", "cube.xyz", "--normals", "cube_ref.nrm", "--out", "cube_dn.xyz"],
        ["eval", "--in", "cube_ref.nrm", "--gt", "cube.xyz", "--alphas", "5,10,20",
         "--out", "eval.json", "--errors", "cube_err.txt"],
        ["export-heatmap", "--in", "cube.xyz", "--normals", "cube_ref.nrm", "--gt", "cube.xyz",
         "--out", "heat_gt.ply"],
        ["export-heatmap", "--in", "cube.xyz", "--normals", "cube_ref.nrm", "--errors", "cube_err.txt",
         "--out", "heat_err.ply"],
    ]
    for step in steps:
        run_cli([*step, *c], workdir, threads)
    return {p.name: p.read_bytes() for p in sorted(workdir.iterdir()) if p.name != "cfg.json"}
