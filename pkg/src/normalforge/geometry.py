"""Point-cloud container, neighborhood queries and covariance analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood

SMOOTH = 0
CANDIDATE = 1


@dataclass(frozen=True)
class PointCloud:
    """Positions of a sampled surface, optionally with ground-truth normals.

    ``points`` is an (N, 3) float64 array. ``gt_normals`` is either None or
    an (N, 3) array of unit vectors.
    """

    points: np.ndarray
    gt_normals: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) < 4:
            raise ValueError(f"a point cloud needs at least 4 points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.gt_normals is not None:
            gt = np.ascontiguousarray(self.gt_normals, dtype=np.float64)
            if gt.shape != pts.shape:
                raise ValueError(
                    f"gt_normals shape {gt.shape} does not match points {pts.shape}"
                )
            norms = np.linalg.norm(gt, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("gt_normals must be unit vectors")
            gt.setflags(write=False)
            object.__setattr__(self, "gt_normals", gt)

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.gt_normals, self.name)


@dataclass(frozen=True)
class SpatialIndex:
    """k-d tree over the positions of a cloud."""

    points: np.ndarray
    tree: cKDTree = field(repr=False)

    def knn(self, q, k: int) -> np.ndarray:
        """Indices of the ``min(k, N)`` nearest points to ``q``, nearest first."""
        k = min(int(k), len(self.points))
        _, idx = self.tree.query(np.asarray(q, dtype=np.float64), k=k)
        return np.atleast_1d(idx).astype(np.int64)

    def knn_all(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batched k-NN of every indexed point: (distances, indices), each (N, k)."""
        k = min(int(k), len(self.points))
        dist, idx = self.tree.query(self.points, k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        return dist, idx.astype(np.int64)

    def ball(self, q, r: float) -> np.ndarray:
        """Sorted indices of all points within distance ``r`` of ``q``."""
        idx = self.tree.query_ball_point(np.asarray(q, dtype=np.float64), r)
        return np.array(sorted(idx), dtype=np.int64)

    def ball_all(self, r: float, queries: np.ndarray | None = None) -> list[np.ndarray]:
        qs = self.points if queries is None else np.asarray(queries, dtype=np.float64)
        lists = self.tree.query_ball_point(qs, r)
        return [np.array(sorted(lst), dtype=np.int64) for lst in lists]


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points, cKDTree(cloud.points))


def to_csr(lists: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Pack a list of index arrays into (offsets, flat) CSR arrays."""
    lengths = np.fromiter((len(a) for a in lists), dtype=np.int64, count=len(lists))
    offsets = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    flat = np.concatenate(lists).astype(np.int64) if lists else np.zeros(0, np.int64)
    return offsets, flat


def _sorted_eigh(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # eigh already returns ascending eigenvalues; the stable argsort keeps
    # eigenvector order fixed for exact ties
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    return w, v


def covariance(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=-2, keepdims=True)
    return np.einsum("...ki,...kj->...ij", centered, centered) / points.shape[-2]


def pca_normal(cloud: PointCloud, nbhd) -> np.ndarray:
    """Unit normal of the best-fit plane through ``cloud.points[nbhd]``.

    The sign is left as returned by the eigensolver.
    """
    nbhd = np.asarray(nbhd, dtype=np.int64)
    if len(nbhd) < 3:
        raise DegenerateNeighborhood(f"need at least 3 points, got {len(nbhd)}")
    w, v = _sorted_eigh(covariance(cloud.points[nbhd]))
    scale = max(w[2], np.finfo(float).tiny)
    if w[1] <= 1e-12 * scale or w[2] <= 0.0:
        raise DegenerateNeighborhood("neighborhood covariance has rank < 2")
    n = v[:, 0]
    return n / np.linalg.norm(n)


def pca_normals(cloud: PointCloud, index: SpatialIndex, k: int) -> np.ndarray:
    """PCA normal of every point from its ``k`` nearest neighbors, shape (N, 3)."""
    _, idx = index.knn_all(k)
    w, v = _sorted_eigh(covariance(cloud.points[idx]))
    scale = np.maximum(w[:, 2], np.finfo(float).tiny)
    if np.any(w[:, 1] <= 1e-12 * scale):
        bad = int(np.flatnonzero(w[:, 1] <= 1e-12 * scale)[0])
        raise DegenerateNeighborhood(f"neighborhood of point {bad} has rank < 2")
    n = v[:, :, 0]
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def surface_variation(cloud: PointCloud, index: SpatialIndex, k: int) -> np.ndarray:
    """Per-point ratio lambda_min / sum(lambda) of the k-NN covariance."""
    _, idx = index.knn_all(k)
    w, _ = _sorted_eigh(covariance(cloud.points[idx]))
    total = w.sum(axis=1)
    if np.any(total <= 0.0):
        bad = int(np.flatnonzero(total <= 0.0)[0])
        raise DegenerateNeighborhood(f"neighborhood of point {bad} is a single point")
    return np.clip(w[:, 0], 0.0, None) / total


def classify_points(cloud: PointCloud, index: SpatialIndex, k: int = 100,
                    tau: float = 0.05) -> np.ndarray:
    """Tag each point CANDIDATE (near a sharp feature) or SMOOTH.

    A point is a candidate when its surface variation exceeds ``tau``.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    var = surface_variation(cloud, index, k)
    return np.where(var > tau, CANDIDATE, SMOOTH).astype(np.int8)


def bbox_diagonal(cloud_or_points) -> float:
    pts = cloud_or_points.points if isinstance(cloud_or_points, PointCloud) else np.asarray(cloud_or_points)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
