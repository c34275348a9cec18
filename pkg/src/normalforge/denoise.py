"""Normal-guided point position update.

Each iteration moves every point by

    d_i = 1 / (3 |N_i|) * sum_j  w(n_i, n_j) (n_i . e_ij) n_i + lam (n_j . e_ij) n_j,

with e_ij = p_j - p_i and w(a, b) = exp(-|a - b|^2 / sigma^2). Each term
projects the neighbor offset onto a normal direction (the outer-product
reading of the update). Neighborhoods are taken once from the input
positions and never recomputed; normals stay fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import PointCloud, SpatialIndex, bbox_diagonal, build_index, to_csr


@dataclass
class DenoiseParams:
    lam: float = 0.5
    iterations: int = 20
    sigma: float = 0.3
    radius_frac: float = 0.03  # ball radius as a fraction of the bbox diagonal

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.sigma <= 0 or self.radius_frac <= 0:
            raise ValueError("sigma and radius_frac must be positive")


def frozen_neighborhoods(cloud: PointCloud, params: DenoiseParams,
                         index: SpatialIndex | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Ball neighbors (self excluded) of the input positions, in CSR form."""
    index = build_index(cloud) if index is None else index
    radius = params.radius_frac * bbox_diagonal(cloud)
    lists = [ids[ids != i] for i, ids in enumerate(index.ball_all(radius))]
    return to_csr(lists)


def point_update(cloud: PointCloud, normals, params: DenoiseParams | None = None,
                 index: SpatialIndex | None = None, backend=None) -> PointCloud:
    """Run ``params.iterations`` Jacobi updates and return the moved cloud.

    Points without neighbors stay where they are.
    """
    params = params or DenoiseParams()
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != cloud.points.shape:
        raise ValueError("need one normal per point")
    if params.iterations == 0:
        return cloud
    offsets, flat = frozen_neighborhoods(cloud, params, index)
    pts = np.array(cloud.points, dtype=np.float64)
    for _ in range(params.iterations):
        pts = _kernels.point_step(pts, normals, offsets, flat, params.lam, params.sigma, backend)
    return cloud.with_points(pts)
