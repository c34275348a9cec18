"""Command-line interface: ``normalforge <subcommand> ...``.

Every subcommand accepts ``--config`` (JSON, see ``normalforge.config``)
and ``--seed``; the resolved configuration is logged at startup. Errors
are reported on stderr with a nonzero exit status.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps floating-point reductions identical across runs
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
# size numba's pool from the requested thread count (it is fixed at import time)
if os.environ.get("NORMALFORGE_THREADS", "").strip().isdigit() and int(os.environ["NORMALFORGE_THREADS"]) > 0:
    os.environ.setdefault("NUMBA_NUM_THREADS", os.environ["NORMALFORGE_THREADS"].strip())

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import _kernels, fileio  # noqa: E402
from .config import Config, load_config  # noqa: E402
from .errors import ConfigError, NormalForgeError  # noqa: E402

log = logging.getLogger("normalforge")

METHODS = ("pca", "mfps", "simple-mfps")


def _csv_paths(text: str) -> list[str]:
    return [p for p in (s.strip() for s in text.split(",")) if p]


def _alphas(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="normalforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cloud with true normals")
    p.add_argument("--shape", required=True, choices=("plane", "sphere", "cube", "cylinder", "dihedral"))
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--noise", type=float, default=0.0, help="noise sigma as a fraction of the bbox diagonal")
    p.add_argument("--angle", type=float, default=90.0, help="dihedral opening angle (degrees)")
    p.add_argument("--out", required=True, help="output x y z nx ny nz file")

    p = sub.add_parser("estimate", parents=[common], help="initial normal estimation")
    p.add_argument("--in", dest="inp", required=True, help="points file")
    p.add_argument("--method", choices=METHODS, default="mfps")
    p.add_argument("--out", required=True, help="output normals file")

    p = sub.add_parser("filter", parents=[common], help="multi-scale bilateral filtering")
    p.add_argument("--in", dest="inp", required=True, help="points file")
    p.add_argument("--normals", required=True, help="initial normals file")
    p.add_argument("--out", required=True, help="output file, 3 columns per filter branch")

    p = sub.add_parser("train", parents=[common], help="train a refinement model")
    p.add_argument("--in", dest="inp", required=True,
                   help="comma-separated training clouds with ground-truth normals (6 columns)")
    p.add_argument("--normals", help="comma-separated initial normal files (default: MFPS estimates)")
    p.add_argument("--out", required=True, help="output model file")

    p = sub.add_parser("refine", parents=[common], help="refine initial normals with a trained model")
    p.add_argument("--in", dest="inp", required=True, help="points file")
    p.add_argument("--normals", required=True, help="initial normals file (any estimator)")
    p.add_argument("--model", required=True, help="model file written by 'train'")
    p.add_argument("--out", required=True, help="output normals file")

    p = sub.add_parser("denoise", parents=[common], help="normal-guided point update")
    p.add_argument("--in", dest="inp", required=True, help="points file")
    p.add_argument("--normals", required=True, help="normals file")
    p.add_argument("--out", required=True, help="output points file")

    p = sub.add_parser("eval", parents=[common], help="angular error statistics")
    p.add_argument("--in", dest="inp", required=True, help="predicted normals file")
    p.add_argument("--gt", required=True, help="ground-truth normals (3- or 6-column file)")
    p.add_argument("--alphas", type=_alphas, help="PGP thresholds in degrees, e.g. 5,10")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--errors", help="write per-point errors (degrees) to this file")

    p = sub.add_parser("export-heatmap", parents=[common], help="PLY coloured by angular error")
    p.add_argument("--in", dest="inp", required=True, help="points file")
    p.add_argument("--normals", required=True, help="predicted normals file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--gt", help="ground-truth normals file")
    src.add_argument("--errors", help="per-point error file from 'eval --errors'")
    p.add_argument("--out", required=True, help="output .ply file")
    return parser


def resolve_config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        cfg.seed = args.seed
    cfg.train = replace(cfg.train, seed=cfg.seed)
    if getattr(args, "alphas", None):
        cfg.eval = replace(cfg.eval, alphas=args.alphas)
    return cfg


def _estimate(cloud, method, cfg: Config):
    from .geometry import build_index, pca_normals
    from .mfps import mfps_estimate, simple_mfps_estimate

    index = build_index(cloud)
    if method == "pca":
        return pca_normals(cloud, index, cfg.pca.k)
    fn = mfps_estimate if method == "mfps" else simple_mfps_estimate
    return fn(cloud, cfg.mfps, np.random.default_rng(cfg.seed), index=index)


def _check_count(normals, cloud, what="normals"):
    from .errors import LengthMismatch

    if len(normals) != len(cloud):
        raise LengthMismatch(f"{len(normals)} {what} for {len(cloud)} points")


def cmd_synth(args, cfg):
    from .synth import SynthShape, synth_generate

    cloud = synth_generate(SynthShape(args.shape, args.count, args.noise, cfg.seed, args.angle))
    fileio.write_cloud(args.out, cloud)
    log.info("wrote %d points to %s", len(cloud), args.out)


def cmd_estimate(args, cfg):
    cloud = fileio.read_cloud(args.inp)
    normals = _estimate(cloud, args.method, cfg)
    fileio.write_normals(args.out, normals)
    log.info("wrote %d %s normals to %s", len(normals), args.method, args.out)


def cmd_filter(args, cfg):
    from .filtering import multi_scale_filter
    from .geometry import build_index

    cloud = fileio.read_cloud(args.inp)
    initial = fileio.read_normals(args.normals)
    _check_count(initial, cloud)
    out = multi_scale_filter(cloud, build_index(cloud), initial, cfg.filter)
    fileio.write_normals(args.out, out.reshape(len(cloud), -1))
    log.info("wrote %d filter branches for %d points to %s", out.shape[1], len(cloud), args.out)


def cmd_train(args, cfg):
    from . import refine

    paths = _csv_paths(args.inp)
    clouds = [fileio.read_cloud(p) for p in paths]
    for p, c in zip(paths, clouds):
        if c.gt_normals is None:
            raise ConfigError(f"{p}: training clouds need 6 columns (points and true normals)")
    if args.normals:
        npaths = _csv_paths(args.normals)
        if len(npaths) != len(paths):
            raise ConfigError("--normals needs one file per training cloud")
        initials = [fileio.read_normals(p) for p in npaths]
        for n, c in zip(initials, clouds):
            _check_count(n, c)
    else:
        initials = [_estimate(c, "mfps", cfg) for c in clouds]
    data = refine.training_set(clouds, initials, cfg.filter, cfg.features, cfg.train)
    log.info("training on %d samples from %d clouds", len(data.gt), len(clouds))
    model = refine.train(data, cfg.net, cfg.train, cfg.filter, cfg.features)
    model.save(args.out)
    h = model.loss_history
    log.info("loss %.6f -> %.6f; model written to %s", h[0], h[-1], args.out)


def cmd_refine(args, cfg):
    from .refine import RefineModel, refine_field

    cloud = fileio.read_cloud(args.inp)
    initial = fileio.read_normals(args.normals)
    _check_count(initial, cloud)
    model = RefineModel.load(args.model)
    out = refine_field(cloud, initial, model, seed=cfg.seed)
    fileio.write_normals(args.out, out)
    log.info("wrote %d refined normals to %s", len(out), args.out)


def cmd_denoise(args, cfg):
    from .denoise import point_update

    cloud = fileio.read_cloud(args.inp)
    normals = fileio.read_normals(args.normals)
    _check_count(normals, cloud)
    out = point_update(cloud, normals, cfg.denoise)
    fileio.write_cloud(args.out, out, with_normals=False)
    log.info("wrote %d updated points to %s", len(out), args.out)


def cmd_eval(args, cfg):
    from .metrics import evaluate

    pred = fileio.read_normals(args.inp)
    gt = fileio.read_normals(args.gt)
    report = evaluate(pred, gt, cfg.eval.alphas)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.errors:
        fileio.write_table(args.errors, report.per_point_errors_deg)


def cmd_export_heatmap(args, cfg):
    from .metrics import angular_error

    cloud = fileio.read_cloud(args.inp)
    normals = fileio.read_normals(args.normals)
    _check_count(normals, cloud)
    if args.gt:
        gt = fileio.read_normals(args.gt)
        _check_count(gt, cloud, "ground-truth normals")
        errors = angular_error(normals, gt)
    else:
        errors = fileio.read_values(args.errors)
        _check_count(errors, cloud, "error values")
    fileio.write_heatmap_ply(args.out, cloud.points, normals, errors, cfg.eval.heatmap_max_deg)
    log.info("wrote heatmap with %d vertices to %s", len(cloud), args.out)


COMMANDS = {
    "synth": cmd_synth,
    "estimate": cmd_estimate,
    "filter": cmd_filter,
    "train": cmd_train,
    "refine": cmd_refine,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "export-heatmap": cmd_export_heatmap,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = _kernels.configure_threads()
    try:
        cfg = resolve_config(args)
        log.info("command %s, seed %d, threads %d", args.command, cfg.seed, threads)
        log.info("resolved config: %s", cfg.to_json())
        COMMANDS[args.command](args, cfg)
    except (NormalForgeError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
