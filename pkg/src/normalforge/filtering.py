"""Multi-scale bilateral normal filtering, per-point canonical frames and
k-means clustering of the filtered-normal descriptors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DimensionMismatch
from .geometry import PointCloud, SpatialIndex, bbox_diagonal, to_csr

log = logging.getLogger(__name__)

RANK_TOL = 1e-12  # eigenvalue ratio below which a tensor direction counts as empty


@dataclass
class FilterParams:
    """Bilateral filter scales.

    Spatial deviations are given as fractions of the bounding-box diagonal;
    range deviations are plain distances between unit normals.
    """

    spatial_fracs: tuple[float, ...] = (0.025, 0.05)
    range_sigmas: tuple[float, ...] = (0.1, 0.2, 0.35, 0.5)
    include_unfiltered: bool = True
    radius_factor: float = 2.0

    def __post_init__(self):
        self.spatial_fracs = tuple(float(v) for v in self.spatial_fracs)
        self.range_sigmas = tuple(float(v) for v in self.range_sigmas)
        if any(v <= 0 for v in self.spatial_fracs + self.range_sigmas):
            raise ValueError("filter deviations must be positive")
        if self.radius_factor <= 0:
            raise ValueError("radius_factor must be positive")
        if self.branch_count < 1:
            raise ValueError("filter parameters produce no branches")

    @property
    def branch_count(self) -> int:
        return len(self.spatial_fracs) * len(self.range_sigmas) + int(self.include_unfiltered)


def bilateral_filter(cloud: PointCloud, index: SpatialIndex, normals, sigma_s: float,
                     sigma_r: float, radius: float | None = None, backend=None) -> np.ndarray:
    """One bilateral pass over the normal field.

    Neighbors are the points within ``radius`` (default ``2 * sigma_s``).
    Normals are treated as unoriented: each neighbor normal is flipped into
    the center normal's hemisphere before weighting and averaging, so the
    output keeps the center's sign and a sign-consistent field is filtered
    unchanged.
    """
    if sigma_s <= 0 or sigma_r <= 0:
        raise ValueError("sigmas must be positive")
    radius = 2.0 * sigma_s if radius is None else radius
    offsets, flat = to_csr(index.ball_all(radius))
    return _kernels.bilateral(cloud.points, np.asarray(normals, np.float64), offsets, flat,
                              sigma_s, sigma_r, backend)


def multi_scale_filter(cloud: PointCloud, index: SpatialIndex, initial,
                       params: FilterParams, backend=None, diag: float | None = None) -> np.ndarray:
    """Stack of filtered normals, shape (N, X, 3).

    Slot order: spatial scale outer, range scale inner, unfiltered input last.
    Spatial scales are fractions of ``diag`` (default: the cloud's
    axis-aligned bounding-box diagonal, which is not rotation invariant;
    pass a fixed length to compare differently posed copies of a cloud).
    """
    initial = np.asarray(initial, dtype=np.float64)
    diag = bbox_diagonal(cloud) if diag is None else float(diag)
    out = []
    for frac in params.spatial_fracs:
        sigma_s = frac * diag
        offsets, flat = to_csr(index.ball_all(params.radius_factor * sigma_s))
        for sigma_r in params.range_sigmas:
            out.append(_kernels.bilateral(cloud.points, initial, offsets, flat,
                                          sigma_s, sigma_r, backend))
    if params.include_unfiltered:
        out.append(initial / np.linalg.norm(initial, axis=1, keepdims=True))
    return np.stack(out, axis=1)


def _sign_by_third_moment(vec: np.ndarray, normals: np.ndarray) -> np.ndarray:
    # deterministic, rotation-equivariant sign choice for an eigenvector
    m3 = np.sum(np.einsum("...xd,...d->...x", normals, vec) ** 3, axis=-1)
    return np.where(m3 < 0.0, -1.0, 1.0)


def frames_from_normals(normal_sets: np.ndarray) -> np.ndarray:
    """Rotation matrices [e1, e2, e3] (columns) from the normal tensors.

    ``normal_sets`` is (N, X, 3) or (X, 3). Eigenvalues ascend from e1 to
    e3. Signs of e1 and e3 follow the third moment of the normals'
    projections and e2 completes a right-handed frame. When the tensor has
    rank 2 (e1 orthogonal to every normal, so its moment vanishes) e2 takes
    the moment sign and e1 = e2 x e3 instead. Rank-1 tensors leave the
    in-plane axes undetermined; they are logged and resolved by the
    eigensolver's output.
    """
    sets = np.asarray(normal_sets, dtype=np.float64)
    single = sets.ndim == 2
    if single:
        sets = sets[None]
    if np.any(np.all(sets == 0.0, axis=(1, 2))):
        raise ValueError("a normal set is entirely zero")
    tensors = np.einsum("nxi,nxj->nij", sets, sets)
    w, v = np.linalg.eigh(tensors)
    ties = np.abs(w[:, 2] - w[:, 1]) <= 1e-12 * np.maximum(np.abs(w[:, 2]), 1.0)
    if np.any(ties):
        log.info("%d normal tensors with a repeated dominant eigenvalue", int(ties.sum()))
    flat = w[:, 0] <= RANK_TOL * w[:, 2]
    rank1 = w[:, 1] <= RANK_TOL * w[:, 2]
    if np.any(rank1):
        log.info("%d rank-1 normal tensors; in-plane frame axes are arbitrary", int(rank1.sum()))
    e3 = v[:, :, 2] * _sign_by_third_moment(v[:, :, 2], sets)[:, None]
    e1 = v[:, :, 0] * _sign_by_third_moment(v[:, :, 0], sets)[:, None]
    e2 = v[:, :, 1] * _sign_by_third_moment(v[:, :, 1], sets)[:, None]
    e1 = np.where(flat[:, None], np.cross(e2, e3), e1)
    e2 = np.cross(e3, e1)
    frames = np.stack([e1, e2, e3], axis=2)
    return frames[0] if single else frames


def to_frame(vectors: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Express world vectors in frame coordinates (multiply by R^T)."""
    return np.einsum("...ji,...xj->...xi", frames, vectors)


def from_frame(vectors: np.ndarray, frames: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...xj->...xi", frames, vectors)


def flip_up(vectors: np.ndarray) -> np.ndarray:
    return np.where(vectors[..., 2:3] < 0.0, -vectors, vectors)


def reorient(raw) -> tuple[np.ndarray, np.ndarray]:
    """Canonicalize one point's normal set.

    Returns the rotated normals (each with z >= 0) and the frame R whose
    columns are the normal-tensor eigenvectors; rotated = flip(R^T n).
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
    frame = frames_from_normals(raw)
    return flip_up(to_frame(raw, frame)), frame


def reorient_all(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``reorient`` over (N, X, 3) stacks."""
    frames = frames_from_normals(raw)
    return flip_up(to_frame(raw, frames)), frames


@dataclass
class ClusterModel:
    centers: np.ndarray
    assignments: np.ndarray
    objective_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centers)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(len(x), p=d2 / total)
        else:
            pick = int(rng.integers(len(x)))
        centers.append(x[pick])
        d2 = np.minimum(d2, _sq_dists(x, x[pick][None])[:, 0])
    return np.array(centers)


def kmeans_cluster(features, k: int, rng=None, max_iters: int = 100) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is re-seeded at the sample farthest from its assigned
    center. Stops when assignments no longer change or after ``max_iters``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if not 1 <= k <= len(x):
        raise ValueError(f"k must lie in [1, {len(x)}], got {k}")
    rng = np.random.default_rng(rng)
    centers = _kmeanspp(x, k, rng)
    assign = np.full(len(x), -1, dtype=np.int64)
    history = []
    for _ in range(max(1, max_iters)):
        d2 = _sq_dists(x, centers)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new].sum()))
        changed = not np.array_equal(new, assign)
        assign = new
        if not changed:
            break
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
        counts = np.bincount(assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            diff = x - centers[assign]
            far = int(np.argmax(np.einsum("nd,nd->n", diff, diff)))
            centers[c] = x[far]
            assign[far] = c
    d2 = _sq_dists(x, centers)
    assign = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(len(x)), assign].sum()))
    return ClusterModel(centers, assign, history)


def assign_cluster(model: ClusterModel, feature) -> int | np.ndarray:
    """Nearest center (Euclidean); ties go to the lowest id.

    Accepts one feature vector or a (M, D) batch.
    """
    f = np.asarray(feature, dtype=np.float64)
    single = f.ndim == 1
    f2 = f[None] if single else f
    if f2.shape[1] != model.centers.shape[1]:
        raise DimensionMismatch(
            f"feature dimension {f2.shape[1]} != center dimension {model.centers.shape[1]}")
    ids = np.argmin(_sq_dists(f2, model.centers), axis=1)
    return int(ids[0]) if single else ids
