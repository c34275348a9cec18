"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--points 5000] [--repeat 3]

Each kernel runs on the same inputs through both backends (numba is
warmed up first, so compile time is excluded); the table reports the best
wall time of ``--repeat`` runs, the speed-up, and the largest absolute
difference between the two outputs (for ``best_planes``: energies and
unsigned normal directions).
"""

import argparse
import time

import numpy as np

from normalforge import _kernels
from normalforge.features import FeatureParams, _hmp_query_radius, hmp_frames
from normalforge.filtering import reorient_all
from normalforge.geometry import bbox_diagonal, build_index, pca_normals, to_csr
from normalforge.mfps import _draw_triples
from normalforge.synth import SynthShape, synth_generate


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def max_diff(a, b):
    if isinstance(a, tuple):
        # best_planes: a plane is defined up to normal sign, and equal-energy
        # candidates (the same triple in another order) may keep another anchor
        (na, _, ea), (nb, _, eb) = a, b
        return max(float(np.max(np.abs(ea - eb))),
                   float(np.max(1.0 - np.abs(np.sum(na * nb, axis=1)))))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def make_cases(n_points, seed=0):
    cloud = synth_generate(SynthShape("cube", n_points, 0.002, seed=seed))
    pts = np.asarray(cloud.points)
    idx = build_index(cloud)
    diag = bbox_diagonal(cloud)
    normals = pca_normals(cloud, idx, 30)
    rng = np.random.default_rng(seed)

    off_bl, flat_bl = to_csr(idx.ball_all(2 * 0.025 * diag))
    off_dn, flat_dn = to_csr([ids[ids != i] for i, ids in enumerate(idx.ball_all(0.03 * diag))])

    patches = min(1000, n_points)
    members = idx.knn_all(50)[1][:patches]
    triples = _draw_triples(rng, (patches, 100), 50)
    sigma = np.full(patches, 0.01)

    fe = FeatureParams()
    centers = min(500, n_points)
    filtered = np.repeat(normals[:centers, None], 3, axis=1)
    _, frames = reorient_all(filtered)
    hframes = hmp_frames(filtered, frames)
    spacing = fe.bin_spacing(diag)
    ball = fe.ball_factor * spacing
    off_h, flat_h = to_csr(idx.ball_all(_hmp_query_radius(fe, diag), queries=pts[:centers]))

    return {
        "bilateral": lambda b: _kernels.bilateral(pts, normals, off_bl, flat_bl, 0.025 * diag, 0.2, b),
        "best_planes": lambda b: _kernels.best_planes(pts, members, triples, sigma, b),
        "hmp": lambda b: _kernels.hmp(pts, pts[:centers], hframes, off_h, flat_h, fe.radius(diag),
                                      fe.m, ball, fe.sigma_d_factor * spacing, b),
        "point_step": lambda b: _kernels.point_step(pts, normals, off_dn, flat_dn, 0.5, 0.3, b),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, default=5000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)

    threads = _kernels.configure_threads()
    print(f"{args.points} points, best of {args.repeat}, numba threads {threads}")
    print(f"{'kernel':<12} {'numpy [s]':>10} {'numba [s]':>10} {'speed-up':>9} {'max |diff|':>11}")
    for name, run in make_cases(args.points).items():
        run("numba")  # compile / load from cache
        t_np, out_np = best_time(lambda: run("numpy"), args.repeat)
        t_nb, out_nb = best_time(lambda: run("numba"), args.repeat)
        print(f"{name:<12} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>8.1f}x {max_diff(out_np, out_nb):>11.2e}")


if __name__ == "__main__":
    main()
