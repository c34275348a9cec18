"""Multi-scale fitting patch selection (MFPS).

Initial normals for a noisy point cloud. Points far from sharp features take
plain PCA normals. For points near features, every k-NN patch (at several
scales) that contains the point is fitted with a robust sampled plane; the
patch planes are ranked by a scale-weighted consistency score, reduced to a
set of mutually distinct directions, and the direction whose plane passes
closest on the correct side of the point wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegeneratePatch
from .geometry import (
    CANDIDATE,
    PointCloud,
    SpatialIndex,
    bbox_diagonal,
    build_index,
    classify_points,
    pca_normals,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.point) @ self.normal


@dataclass(frozen=True)
class FitPatch:
    center_index: int
    scale: int
    members: np.ndarray
    plane: Plane
    energy: float
    score: float


@dataclass
class MfpsParams:
    scales: tuple[int, ...] = (50, 100, 150)
    beta: float = 0.9
    sigma_factor: float = 0.3
    sigma: float | None = None  # global residual bandwidth; overrides sigma_factor
    plane_samples: int = 100
    w_t: float = 60.0
    orient_k: int = 50
    classify_k: int = 100
    tau: float = 0.05

    def __post_init__(self):
        self.scales = tuple(int(k) for k in self.scales)
        if len(self.scales) == 0 or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be non-empty and strictly increasing")
        if self.scales[0] < 3:
            raise ValueError("smallest scale must be at least 3")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.plane_samples < 1:
            raise ValueError("plane_samples must be >= 1")
        if not 0.0 < self.w_t < 180.0:
            raise ValueError("w_t must lie in (0, 180) degrees")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.sigma_factor <= 0:
            raise ValueError("sigma_factor must be positive")
        if self.orient_k < 1:
            raise ValueError("orient_k must be >= 1")


def plane_energy(points: np.ndarray, plane: Plane, sigma: float) -> float:
    """Mean Gaussian weight of the point-to-plane residuals."""
    r = plane.signed_distance(points)
    return float(np.mean(np.exp(-(r * r) / (sigma * sigma))))


def scale_weight(scale: int, params: MfpsParams) -> float:
    k_min, k_max = params.scales[0], params.scales[-1]
    if k_max == k_min:
        return 1.0
    return params.beta + (1.0 - params.beta) * (scale - k_min) / (k_max - k_min)


def patch_score(energy: float, scale: int, params: MfpsParams) -> float:
    if not params.scales[0] <= scale <= params.scales[-1]:
        raise ValueError(f"scale {scale} outside [{params.scales[0]}, {params.scales[-1]}]")
    if not 0.0 < energy <= 1.0:
        raise ValueError("energy must lie in (0, 1]")
    return energy * scale_weight(scale, params)


def _draw_triples(rng: np.random.Generator, shape: tuple[int, int], k: int) -> np.ndarray:
    """Uniform draws of three distinct positions in range(k)."""
    a = rng.integers(0, k, size=shape)
    b = rng.integers(0, k - 1, size=shape)
    c = rng.integers(0, k - 2, size=shape)
    b = b + (b >= a)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.stack([a, b, c], axis=-1)


def fit_patch_plane(cloud: PointCloud, members, sigma: float, samples: int,
                    rng: np.random.Generator, backend=None) -> tuple[Plane, float]:
    """Best of ``samples`` candidate planes through random member triples."""
    members = np.asarray(members, dtype=np.int64)
    if len(members) < 3:
        raise DegeneratePatch("a patch needs at least 3 members")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    triples = _draw_triples(rng, (1, samples), len(members))
    n, p, e = _kernels.best_planes(cloud.points, members[None, :], triples,
                                   np.array([sigma]), backend)
    if e[0] < 0:
        raise DegeneratePatch(f"no non-collinear triple in {samples} draws")
    return Plane(n[0], p[0]), float(e[0])


@dataclass
class PatchPool:
    """All fitted patches, stored column-wise. ``pool[i]`` is a FitPatch."""

    centers: np.ndarray
    scales: np.ndarray
    normals: np.ndarray
    anchors: np.ndarray
    energies: np.ndarray
    scores: np.ndarray
    member_table: dict[int, np.ndarray] = field(repr=False)  # scale -> (N, k) knn rows

    def __len__(self) -> int:
        return len(self.centers)

    def members(self, i: int) -> np.ndarray:
        return self.member_table[int(self.scales[i])][self.centers[i]]

    def __getitem__(self, i: int) -> FitPatch:
        return FitPatch(int(self.centers[i]), int(self.scales[i]), self.members(i),
                        Plane(self.normals[i], self.anchors[i]),
                        float(self.energies[i]), float(self.scores[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def build_patch_pool(cloud: PointCloud, index: SpatialIndex, params: MfpsParams,
                     rng: np.random.Generator, centers=None, backend=None) -> PatchPool:
    """Fit one patch per (center point, scale).

    ``centers`` optionally restricts the centers (boolean mask or index
    array); by default every point is a center. Random triples are drawn for
    every point and scale regardless of ``centers`` so the pool does not
    depend on which subset was requested.
    """
    n = len(cloud)
    if centers is None:
        center_mask = np.ones(n, dtype=bool)
    else:
        centers = np.asarray(centers)
        center_mask = centers.astype(bool) if centers.dtype == bool else np.isin(np.arange(n), centers)
    diag = bbox_diagonal(cloud)
    floor = max(diag, 1.0) * 1e-12
    parts = {key: [] for key in ("centers", "scales", "normals", "anchors", "energies")}
    table = {}
    for k in params.scales:
        if k > n:
            raise ValueError(f"scale {k} exceeds point count {n}")
        dist, knn = index.knn_all(k)
        table[k] = knn
        triples = _draw_triples(rng, (n, params.plane_samples), k)
        if params.sigma is not None:
            sigma = np.full(n, float(params.sigma))
        else:
            sigma = np.maximum(params.sigma_factor * dist[:, -1], floor)
        rows = np.flatnonzero(center_mask)
        nrm, anc, en = _kernels.best_planes(cloud.points, knn[rows], triples[rows], sigma[rows], backend)
        ok = en > 0
        if not np.all(ok):
            log.warning("skipped %d degenerate patches at scale %d", int((~ok).sum()), k)
        parts["centers"].append(rows[ok])
        parts["scales"].append(np.full(int(ok.sum()), k, dtype=np.int64))
        parts["normals"].append(nrm[ok])
        parts["anchors"].append(anc[ok])
        parts["energies"].append(en[ok])
    cat = {key: np.concatenate(val) for key, val in parts.items()}
    weights = np.array([scale_weight(int(k), params) for k in cat["scales"]]) if len(cat["scales"]) else np.zeros(0)
    return PatchPool(cat["centers"].astype(np.int64), cat["scales"], cat["normals"].reshape(-1, 3),
                     cat["anchors"].reshape(-1, 3), cat["energies"], cat["energies"] * weights, table)


def containing_patches(pool: PatchPool, targets: np.ndarray) -> dict[int, np.ndarray]:
    """For each target point, ids of pool patches whose members include it.

    Ids come back sorted by descending score, then ascending center index,
    then ascending scale.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        return {}
    pids, owners = [], []
    for k, table in pool.member_table.items():
        sel = np.flatnonzero(pool.scales == k)
        if len(sel) == 0:
            continue
        rows = table[pool.centers[sel]]  # (M, k)
        hit = np.isin(rows, targets)
        r, _ = np.nonzero(hit)
        pids.append(sel[r])
        owners.append(rows[hit])
    if not pids:
        return {int(t): np.zeros(0, dtype=np.int64) for t in targets}
    pid = np.concatenate(pids)
    owner = np.concatenate(owners)
    order = np.lexsort((pool.scales[pid], pool.centers[pid], -pool.scores[pid], owner))
    pid, owner = pid[order], owner[order]
    bounds = np.flatnonzero(np.diff(owner)) + 1
    groups = np.split(pid, bounds)
    keys = owner[np.concatenate([[0], bounds])] if len(owner) else []
    out = {int(t): np.zeros(0, dtype=np.int64) for t in targets}
    for key, grp in zip(keys, groups):
        out[int(key)] = grp
    return out


def _greedy_anisotropic(normals: np.ndarray, w_t: float) -> np.ndarray:
    """Positions kept by the greedy angular filter over score-sorted normals."""
    cos_t = np.cos(np.radians(w_t))
    alive = np.ones(len(normals), dtype=bool)
    kept = []
    while alive.any():
        first = int(np.argmax(alive))
        kept.append(first)
        alive[first] = False
        # kept iff the unoriented angle exceeds w_t, i.e. |cos| < cos(w_t)
        alive &= np.abs(normals @ normals[first]) < cos_t
    return np.array(kept, dtype=np.int64)


def select_anisotropic(containing, w_t: float = 60.0) -> list[tuple[FitPatch, np.ndarray]]:
    """Greedy selection of patches with mutually distinct plane normals.

    ``containing`` must be sorted by descending score.
    """
    containing = list(containing)
    if not containing:
        raise ValueError("no containing patches")
    normals = np.array([p.plane.normal for p in containing])
    return [(containing[i], containing[i].plane.normal) for i in _greedy_anisotropic(normals, w_t)]


def _orient_and_pick(p_i: np.ndarray, nbr_pts: np.ndarray, normals: np.ndarray,
                     anchors: np.ndarray, point_id: int = -1) -> tuple[int, np.ndarray]:
    n = normals.copy()
    d_i = np.einsum("ij,ij->i", p_i[None, :] - anchors, n)
    p_ref = p_i[None, :] - d_i[:, None] * n
    # orient each normal so the neighborhood lies on its negative side
    crit = np.einsum("ij,ij->i", n, p_ref) * len(nbr_pts) - n @ nbr_pts.sum(axis=0)
    if np.any(crit == 0.0):
        log.info("ambiguous orientation at point %d; keeping sign", point_id)
    flip = crit < 0.0
    n[flip] *= -1.0
    values = np.einsum("ij,ij->i", n, p_ref - p_i[None, :])
    best = int(np.argmin(values))
    return best, n[best]


def choose_fitting_normal(cloud: PointCloud, index: SpatialIndex, p_i: int,
                          aniso, orient_k: int = 50) -> np.ndarray:
    """Pick, among anisotropic (patch, normal) pairs, the plane fitting ``p_i``."""
    aniso = list(aniso)
    if not aniso:
        raise ValueError("anisotropic set is empty")
    pos = cloud.points[p_i]
    nbrs = cloud.points[index.knn(pos, orient_k)]
    normals = np.array([n for _, n in aniso], dtype=np.float64)
    anchors = np.array([patch.plane.point for patch, _ in aniso], dtype=np.float64)
    _, n = _orient_and_pick(pos, nbrs, normals, anchors, p_i)
    return n


def _candidate_centers(index: SpatialIndex, candidates: np.ndarray, params: MfpsParams) -> np.ndarray:
    # any center whose largest-scale patch reaches a candidate
    _, knn = index.knn_all(params.scales[-1])
    is_cand = np.zeros(len(knn), dtype=bool)
    is_cand[candidates] = True
    return is_cand[knn].any(axis=1)


def _estimate(cloud, params, rng, index, classes, simple, backend):
    index = build_index(cloud) if index is None else index
    if classes is None:
        classes = classify_points(cloud, index, params.classify_k, params.tau)
    k_pca = min(params.scales[-1], len(cloud))
    normals = pca_normals(cloud, index, k_pca)
    candidates = np.flatnonzero(classes == CANDIDATE)
    if len(candidates) == 0:
        return normals
    pool = build_patch_pool(cloud, index, params, rng,
                            centers=_candidate_centers(index, candidates, params), backend=backend)
    groups = containing_patches(pool, candidates)
    nbr_ids = None
    if not simple:
        _, nbr_ids = index.knn_all(min(params.orient_k, len(cloud)))
    fallback = 0
    for i in candidates:
        ids = groups[int(i)]
        if len(ids) == 0:
            fallback += 1
            continue
        if simple:
            normals[i] = pool.normals[ids[0]]
            continue
        kept = ids[_greedy_anisotropic(pool.normals[ids], params.w_t)]
        _, n = _orient_and_pick(cloud.points[i], cloud.points[nbr_ids[i]],
                                pool.normals[kept], pool.anchors[kept], int(i))
        normals[i] = n
    if fallback:
        log.warning("%d candidate points had no containing patch; kept PCA normals", fallback)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def mfps_estimate(cloud: PointCloud, params: MfpsParams | None = None, rng=None, *,
                  index: SpatialIndex | None = None, classes=None, backend=None) -> np.ndarray:
    """MFPS initial normal of every point, shape (N, 3)."""
    params = params or MfpsParams()
    rng = np.random.default_rng(rng)
    return _estimate(cloud, params, rng, index, classes, False, backend)


def simple_mfps_estimate(cloud: PointCloud, params: MfpsParams | None = None, rng=None, *,
                         index: SpatialIndex | None = None, classes=None, backend=None) -> np.ndarray:
    """Ablation variant: each candidate takes its top-scoring containing patch."""
    params = params or MfpsParams()
    rng = np.random.default_rng(rng)
    return _estimate(cloud, params, rng, index, classes, True, backend)
