"""Inner loops that dominate runtime, in two interchangeable backends.

Every kernel has a numba implementation (``_nb_*``) and a numpy one
(``_np_*``) computing the same quantity. ``backend()`` picks one per call:
numba unless ``NORMALFORGE_DISABLE_NUMBA`` is set to a truthy value or numba
is not importable. Both paths are exercised by the test suite and compared
in ``benchmarks/bench_kernels.py``.

Neighbor lists are passed in CSR form: ``offsets`` (N + 1,) and ``flat``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange
    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the bundled work-queue pool is always present; probing TBB/OpenMP
        # only produces version warnings and buys nothing for these kernels
        numba.config.THREADING_LAYER = "workqueue"
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_FALSEY = {"", "0", "false", "no", "off"}


def backend(requested: str | None = None) -> str:
    """Resolve the kernel backend, "numba" or "numpy"."""
    if requested is not None:
        if requested not in ("numba", "numpy"):
            raise ValueError(f"unknown backend {requested!r}")
        if requested == "numba" and not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return requested
    flag = os.environ.get("NORMALFORGE_DISABLE_NUMBA", "").strip().lower()
    if flag not in _FALSEY or not HAVE_NUMBA:
        return "numpy"
    return "numba"


def configure_threads() -> int:
    """Cap numba worker threads at ``NORMALFORGE_THREADS`` if set."""
    cap = os.environ.get("NORMALFORGE_THREADS")
    if not HAVE_NUMBA:
        return 1
    if cap:
        n = max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
    return numba.get_num_threads()


if HAVE_NUMBA:
    _jit = njit(cache=True, fastmath=False)
    _pjit = njit(cache=True, fastmath=False, parallel=True)
else:  # pragma: no cover
    def _jit(f):
        return f
    _pjit = _jit
    prange = range


# ---------------------------------------------------------------------------
# bilateral normal filter

@_pjit
def _nb_bilateral(points, normals, offsets, flat, sigma_s, sigma_r):
    n = points.shape[0]
    out = np.empty((n, 3))
    cs = 1.0 / (2.0 * sigma_s * sigma_s)
    cr = 1.0 / (2.0 * sigma_r * sigma_r)
    for i in prange(n):
        ax = ay = az = 0.0
        has_self = False
        for q in range(offsets[i], offsets[i + 1]):
            j = flat[q]
            if j == i:
                has_self = True
            dx = points[i, 0] - points[j, 0]
            dy = points[i, 1] - points[j, 1]
            dz = points[i, 2] - points[j, 2]
            # unoriented input: bring n_j into n_i's hemisphere first
            sj = 1.0
            if normals[i, 0] * normals[j, 0] + normals[i, 1] * normals[j, 1] + normals[i, 2] * normals[j, 2] < 0.0:
                sj = -1.0
            ex = normals[i, 0] - sj * normals[j, 0]
            ey = normals[i, 1] - sj * normals[j, 1]
            ez = normals[i, 2] - sj * normals[j, 2]
            w = np.exp(-(dx * dx + dy * dy + dz * dz) * cs) * np.exp(-(ex * ex + ey * ey + ez * ez) * cr)
            ax += w * sj * normals[j, 0]
            ay += w * sj * normals[j, 1]
            az += w * sj * normals[j, 2]
        if not has_self:
            ax += normals[i, 0]
            ay += normals[i, 1]
            az += normals[i, 2]
        norm = np.sqrt(ax * ax + ay * ay + az * az)
        if norm > 0.0:
            out[i, 0] = ax / norm
            out[i, 1] = ay / norm
            out[i, 2] = az / norm
        else:
            out[i, 0] = normals[i, 0]
            out[i, 1] = normals[i, 1]
            out[i, 2] = normals[i, 2]
    return out


def _np_bilateral(points, normals, offsets, flat, sigma_s, sigma_r):
    n = len(points)
    counts = np.diff(offsets)
    rows = np.repeat(np.arange(n), counts)
    dp = points[rows] - points[flat]
    nj = normals[flat]
    nj = np.where((np.einsum("ij,ij->i", normals[rows], nj) < 0.0)[:, None], -nj, nj)
    dn = normals[rows] - nj
    w = np.exp(-np.einsum("ij,ij->i", dp, dp) / (2.0 * sigma_s ** 2))
    w *= np.exp(-np.einsum("ij,ij->i", dn, dn) / (2.0 * sigma_r ** 2))
    acc = np.zeros((n, 3))
    np.add.at(acc, rows, w[:, None] * nj)
    has_self = np.zeros(n, dtype=bool)
    has_self[rows[flat == rows]] = True
    acc[~has_self] += normals[~has_self]
    norm = np.linalg.norm(acc, axis=1)
    out = normals.copy()
    ok = norm > 0.0
    out[ok] = acc[ok] / norm[ok, None]
    return out


def bilateral(points, normals, offsets, flat, sigma_s, sigma_r, backend_name=None):
    args = (np.ascontiguousarray(points, np.float64), np.ascontiguousarray(normals, np.float64),
            np.ascontiguousarray(offsets, np.int64), np.ascontiguousarray(flat, np.int64),
            float(sigma_s), float(sigma_r))
    if backend(backend_name) == "numba":
        return _nb_bilateral(*args)
    return _np_bilateral(*args)


# ---------------------------------------------------------------------------
# sampled plane fitting: for each patch, evaluate the Gaussian-residual
# energy of every candidate plane through a member triple, keep the best

COLLINEAR_EPS = 1e-10


@_pjit
def _nb_best_planes(points, members, triples, sigma):
    n_patch, k = members.shape
    n_samp = triples.shape[1]
    best_n = np.zeros((n_patch, 3))
    best_p = np.zeros((n_patch, 3))
    best_e = np.full(n_patch, -1.0)
    for pi in prange(n_patch):
        inv = 1.0 / (sigma[pi] * sigma[pi])
        for s in range(n_samp):
            a = members[pi, triples[pi, s, 0]]
            b = members[pi, triples[pi, s, 1]]
            c = members[pi, triples[pi, s, 2]]
            ux = points[b, 0] - points[a, 0]
            uy = points[b, 1] - points[a, 1]
            uz = points[b, 2] - points[a, 2]
            vx = points[c, 0] - points[a, 0]
            vy = points[c, 1] - points[a, 1]
            vz = points[c, 2] - points[a, 2]
            nx = uy * vz - uz * vy
            ny = uz * vx - ux * vz
            nz = ux * vy - uy * vx
            nn = np.sqrt(nx * nx + ny * ny + nz * nz)
            lu = np.sqrt(ux * ux + uy * uy + uz * uz)
            lv = np.sqrt(vx * vx + vy * vy + vz * vz)
            if nn <= COLLINEAR_EPS * lu * lv or nn == 0.0:
                continue
            nx /= nn
            ny /= nn
            nz /= nn
            acc = 0.0
            for q in range(k):
                j = members[pi, q]
                r = ((points[j, 0] - points[a, 0]) * nx + (points[j, 1] - points[a, 1]) * ny
                     + (points[j, 2] - points[a, 2]) * nz)
                acc += np.exp(-r * r * inv)
            e = acc / k
            if e > best_e[pi]:
                best_e[pi] = e
                best_n[pi, 0] = nx
                best_n[pi, 1] = ny
                best_n[pi, 2] = nz
                best_p[pi, 0] = points[a, 0]
                best_p[pi, 1] = points[a, 1]
                best_p[pi, 2] = points[a, 2]
    return best_n, best_p, best_e


def _np_best_planes(points, members, triples, sigma, chunk=64):
    n_patch, k = members.shape
    best_n = np.zeros((n_patch, 3))
    best_p = np.zeros((n_patch, 3))
    best_e = np.full(n_patch, -1.0)
    for lo in range(0, n_patch, chunk):
        hi = min(lo + chunk, n_patch)
        mem = members[lo:hi]
        tri = np.take_along_axis(mem[:, None, :], triples[lo:hi].reshape(hi - lo, 1, -1), axis=2)
        tri = tri.reshape(hi - lo, -1, 3)
        a, b, c = points[tri[..., 0]], points[tri[..., 1]], points[tri[..., 2]]
        u, v = b - a, c - a
        nrm = np.cross(u, v)
        nn = np.linalg.norm(nrm, axis=-1)
        valid = (nn > COLLINEAR_EPS * np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1)) & (nn > 0.0)
        nrm = nrm / np.where(nn > 0.0, nn, 1.0)[..., None]
        pts = points[mem]  # (C, k, 3)
        r = np.einsum("ckd,csd->csk", pts, nrm) - np.einsum("csd,csd->cs", a, nrm)[..., None]
        inv = 1.0 / (sigma[lo:hi] ** 2)
        e = np.exp(-r * r * inv[:, None, None]).mean(axis=2)
        e = np.where(valid, e, -1.0)
        arg = np.argmax(e, axis=1)
        rows = np.arange(hi - lo)
        best_e[lo:hi] = e[rows, arg]
        best_n[lo:hi] = nrm[rows, arg]
        best_p[lo:hi] = a[rows, arg]
    return best_n, best_p, best_e


def best_planes(points, members, triples, sigma, backend_name=None):
    """Best sampled plane per patch.

    ``members`` (P, k) point ids, ``triples`` (P, S, 3) positions into each
    member row, ``sigma`` (P,) residual bandwidths. Returns unit normals
    (P, 3), anchor points (P, 3) and energies (P,); an energy of -1 marks a
    patch where every sampled triple was collinear.
    """
    args = (np.ascontiguousarray(points, np.float64), np.ascontiguousarray(members, np.int64),
            np.ascontiguousarray(triples, np.int64), np.ascontiguousarray(sigma, np.float64))
    if backend(backend_name) == "numba":
        return _nb_best_planes(*args)
    return _np_best_planes(*args)


# ---------------------------------------------------------------------------
# height-map grids

@_pjit
def _nb_hmp(points, centers, frames, offsets, flat, radius, m, ball_r, sigma_d):
    n, x_count = frames.shape[0], frames.shape[1]
    out = np.zeros((n, x_count, m, m))
    spacing = 2.0 * radius / m
    half = (m - 1) / 2.0
    br2 = ball_r * ball_r
    inv_sd = 1.0 / (sigma_d * sigma_d)
    for i in prange(n):
        cx, cy, cz = centers[i, 0], centers[i, 1], centers[i, 2]
        for t in range(x_count):
            for row in range(m):
                vy = (row - half) * spacing
                for col in range(m):
                    vx = (col - half) * spacing
                    bx = cx + vx * frames[i, t, 0, 0] + vy * frames[i, t, 1, 0]
                    by = cy + vx * frames[i, t, 0, 1] + vy * frames[i, t, 1, 1]
                    bz = cz + vx * frames[i, t, 0, 2] + vy * frames[i, t, 1, 2]
                    num = 0.0
                    den = 0.0
                    for q in range(offsets[i], offsets[i + 1]):
                        j = flat[q]
                        dx = points[j, 0] - bx
                        dy = points[j, 1] - by
                        dz = points[j, 2] - bz
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 <= br2:
                            w = np.exp(-d2 * inv_sd)
                            h = ((points[j, 0] - cx) * frames[i, t, 2, 0]
                                 + (points[j, 1] - cy) * frames[i, t, 2, 1]
                                 + (points[j, 2] - cz) * frames[i, t, 2, 2]) / radius
                            num += w * h
                            den += w
                    if den > 0.0:
                        out[i, t, row, col] = num / den
    return out


def _np_hmp(points, centers, frames, offsets, flat, radius, m, ball_r, sigma_d):
    n, x_count = frames.shape[:2]
    out = np.zeros((n, x_count, m, m))
    spacing = 2.0 * radius / m
    u = (np.arange(m) - (m - 1) / 2.0) * spacing
    # bin offsets in the tangent frame: rows follow the y axis, cols the x axis
    grid_y, grid_x = np.meshgrid(u, u, indexing="ij")
    for i in range(n):
        nb = flat[offsets[i]:offsets[i + 1]]
        if len(nb) == 0:
            continue
        rel = points[nb] - centers[i]  # (P, 3)
        fr = frames[i]  # (X, 3, 3)
        bins = grid_x[None, :, :, None] * fr[:, None, None, 0, :] + grid_y[None, :, :, None] * fr[:, None, None, 1, :]
        diff = rel[None, None, None, :, :] - bins[:, :, :, None, :]  # (X, m, m, P, 3)
        d2 = np.einsum("...d,...d->...", diff, diff)
        w = np.where(d2 <= ball_r * ball_r, np.exp(-d2 / sigma_d ** 2), 0.0)
        h = rel @ fr[:, 2, :].T / radius  # (P, X)
        num = np.einsum("xabp,px->xab", w, h)
        den = w.sum(axis=-1)
        out[i] = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    return out


def hmp(points, centers, frames, offsets, flat, radius, m, ball_r, sigma_d, backend_name=None):
    """Height-map grids for each center and tangent frame.

    ``frames`` is (N, X, 3, 3) with rows (x axis, y axis, normal). Heights
    are signed distances along the normal divided by ``radius``. Returns
    (N, X, m, m) with rows indexed along the y axis.
    """
    args = (np.ascontiguousarray(points, np.float64), np.ascontiguousarray(centers, np.float64),
            np.ascontiguousarray(frames, np.float64), np.ascontiguousarray(offsets, np.int64),
            np.ascontiguousarray(flat, np.int64), float(radius), int(m), float(ball_r), float(sigma_d))
    if backend(backend_name) == "numba":
        return _nb_hmp(*args)
    return _np_hmp(*args)


# ---------------------------------------------------------------------------
# normal-guided point update (one Jacobi step)

@_pjit
def _nb_point_step(points, normals, offsets, flat, lam, sigma):
    n = points.shape[0]
    out = points.copy()
    inv = 1.0 / (sigma * sigma)
    for i in prange(n):
        cnt = offsets[i + 1] - offsets[i]
        if cnt == 0:
            continue
        dx = dy = dz = 0.0
        for q in range(offsets[i], offsets[i + 1]):
            j = flat[q]
            ex = points[j, 0] - points[i, 0]
            ey = points[j, 1] - points[i, 1]
            ez = points[j, 2] - points[i, 2]
            gx = normals[i, 0] - normals[j, 0]
            gy = normals[i, 1] - normals[j, 1]
            gz = normals[i, 2] - normals[j, 2]
            w = np.exp(-(gx * gx + gy * gy + gz * gz) * inv)
            si = w * (ex * normals[i, 0] + ey * normals[i, 1] + ez * normals[i, 2])
            sj = lam * (ex * normals[j, 0] + ey * normals[j, 1] + ez * normals[j, 2])
            dx += si * normals[i, 0] + sj * normals[j, 0]
            dy += si * normals[i, 1] + sj * normals[j, 1]
            dz += si * normals[i, 2] + sj * normals[j, 2]
        step = 1.0 / (3.0 * cnt)
        out[i, 0] += step * dx
        out[i, 1] += step * dy
        out[i, 2] += step * dz
    return out


def _np_point_step(points, normals, offsets, flat, lam, sigma):
    n = len(points)
    counts = np.diff(offsets)
    rows = np.repeat(np.arange(n), counts)
    e = points[flat] - points[rows]
    ni, nj = normals[rows], normals[flat]
    g = ni - nj
    w = np.exp(-np.einsum("ij,ij->i", g, g) / sigma ** 2)
    contrib = (w * np.einsum("ij,ij->i", e, ni))[:, None] * ni + (lam * np.einsum("ij,ij->i", e, nj))[:, None] * nj
    acc = np.zeros((n, 3))
    np.add.at(acc, rows, contrib)
    step = np.where(counts > 0, 1.0 / (3.0 * np.maximum(counts, 1)), 0.0)
    return points + step[:, None] * acc


def point_step(points, normals, offsets, flat, lam, sigma, backend_name=None):
    args = (np.ascontiguousarray(points, np.float64), np.ascontiguousarray(normals, np.float64),
            np.ascontiguousarray(offsets, np.int64), np.ascontiguousarray(flat, np.int64),
            float(lam), float(sigma))
    if backend(backend_name) == "numba":
        return _nb_point_step(*args)
    return _np_point_step(*args)
