"""Per-point network inputs: canonical local patches and height maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .filtering import FilterParams, multi_scale_filter, reorient_all
from .geometry import PointCloud, SpatialIndex, bbox_diagonal, to_csr


@dataclass
class FeatureParams:
    patch_radius_frac: float = 0.05
    max_pts: int = 300
    m: int = 7
    sigma_d_factor: float = 1.0  # x bin spacing
    ball_factor: float = 1.5  # x bin spacing

    def __post_init__(self):
        if self.m < 3 or self.m % 2 == 0:
            raise ValueError("m must be odd and >= 3")
        if self.max_pts < 8:
            raise ValueError("max_pts must be >= 8")
        if self.patch_radius_frac <= 0 or self.sigma_d_factor <= 0 or self.ball_factor <= 0:
            raise ValueError("patch radius and bin bandwidths must be positive")

    def radius(self, diag: float) -> float:
        return self.patch_radius_frac * diag

    def bin_spacing(self, diag: float) -> float:
        return 2.0 * self.radius(diag) / self.m


@dataclass
class LocalPatch:
    coords: np.ndarray  # (max_pts, 3), zero padded
    valid_count: int


@dataclass
class BranchInputs:
    """Network inputs for every point of a cloud.

    normals (N, X, 3) canonical filtered normals; frames (N, 3, 3);
    patches (N, max_pts, 3); valid_counts (N,); hmps (N, X, m, m);
    filtered (N, X, 3) world-frame filtered normals.
    """

    normals: np.ndarray
    frames: np.ndarray
    patches: np.ndarray
    valid_counts: np.ndarray
    hmps: np.ndarray
    filtered: np.ndarray

    def __len__(self) -> int:
        return len(self.normals)

    @property
    def descriptors(self) -> np.ndarray:
        """Flattened canonical normals, the clustering feature (N, 3X)."""
        return self.normals.reshape(len(self.normals), -1)

    def subset(self, idx) -> "BranchInputs":
        return BranchInputs(self.normals[idx], self.frames[idx], self.patches[idx],
                            self.valid_counts[idx], self.hmps[idx], self.filtered[idx])


def _patch_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(i)])


def _patch_from_ball(points, center, ball_ids, frame, radius, max_pts, seed, i):
    if len(ball_ids) > max_pts:
        pick = _patch_rng(seed, i).choice(len(ball_ids), max_pts, replace=False)
        ball_ids = ball_ids[np.sort(pick)]
    coords = np.zeros((max_pts, 3))
    rel = (points[ball_ids] - center) @ frame / radius
    coords[:len(ball_ids)] = rel
    return LocalPatch(coords, len(ball_ids))


def extract_patch(cloud: PointCloud, index: SpatialIndex, i: int, frame: np.ndarray,
                  params: FeatureParams, seed: int = 0) -> LocalPatch:
    """Points within the patch radius of point ``i`` in its canonical frame.

    Coordinates are centered on the point, expressed in the frame basis and
    divided by the radius. Oversized patches are down-sampled with a
    generator seeded by (seed, i).
    """
    radius = params.radius(bbox_diagonal(cloud))
    center = cloud.points[i]
    return _patch_from_ball(cloud.points, center, index.ball(center, radius), frame,
                            radius, params.max_pts, seed, i)


def hmp_frames(filtered: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Tangent frames (x axis, y axis, normal) for every filtered normal.

    Each normal is flipped onto the e3 side; the x axis is e1 projected onto
    the tangent plane (e2 when e1 is parallel to the normal).
    """
    filtered = np.asarray(filtered, dtype=np.float64)
    single = filtered.ndim == 2
    if single:
        filtered, frames = filtered[None], frames[None]
    e1 = frames[:, None, :, 0]
    e2 = frames[:, None, :, 1]
    e3 = frames[:, None, :, 2]
    n = np.where(np.sum(filtered * e3, axis=-1, keepdims=True) < 0.0, -filtered, filtered)
    x = e1 - np.sum(e1 * n, axis=-1, keepdims=True) * n
    xn = np.linalg.norm(x, axis=-1, keepdims=True)
    alt = e2 - np.sum(e2 * n, axis=-1, keepdims=True) * n
    x = np.where(xn > 1e-9, x, alt)
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    y = np.cross(n, x)
    out = np.stack([x, y, n], axis=-2)
    return out[0] if single else out


def _hmp_query_radius(params: FeatureParams, diag: float) -> float:
    spacing = params.bin_spacing(diag)
    corner = (params.m - 1) / 2.0 * spacing * np.sqrt(2.0)
    return corner + params.ball_factor * spacing


def build_hmp(cloud: PointCloud, index: SpatialIndex, i: int, n_t, frame: np.ndarray,
              params: FeatureParams, backend=None) -> np.ndarray:
    """m x m height map of point ``i`` on the tangent plane of ``n_t``."""
    n_t = np.asarray(n_t, dtype=np.float64)
    if abs(np.linalg.norm(n_t) - 1.0) > 1e-9:
        raise ValueError("n_t must be a unit vector")
    diag = bbox_diagonal(cloud)
    nb = index.ball(cloud.points[i], _hmp_query_radius(params, diag))
    fr = hmp_frames(n_t[None], frame)[None]
    offsets = np.array([0, len(nb)], dtype=np.int64)
    spacing = params.bin_spacing(diag)
    out = _kernels.hmp(cloud.points, cloud.points[i][None], fr, offsets, nb,
                       params.radius(diag), params.m, params.ball_factor * spacing,
                       params.sigma_d_factor * spacing, backend)
    return out[0, 0]


def build_hmp_naive(points: np.ndarray, center: np.ndarray, tangent_frame: np.ndarray,
                    radius: float, m: int, ball_r: float, sigma_d: float) -> np.ndarray:
    """Direct double loop over bins and all points; reference for ``build_hmp``."""
    out = np.zeros((m, m))
    spacing = 2.0 * radius / m
    x_axis, y_axis, normal = tangent_frame
    for row in range(m):
        for col in range(m):
            b = center + (col - (m - 1) / 2.0) * spacing * x_axis + (row - (m - 1) / 2.0) * spacing * y_axis
            num = den = 0.0
            for p in points:
                d2 = float(np.dot(p - b, p - b))
                if d2 <= ball_r * ball_r:
                    w = np.exp(-d2 / sigma_d ** 2)
                    num += w * float(np.dot(p - center, normal)) / radius
                    den += w
            if den > 0:
                out[row, col] = num / den
    return out


def build_branch_inputs(cloud: PointCloud, index: SpatialIndex, initial,
                        filter_params: FilterParams, feature_params: FeatureParams,
                        seed: int = 0, backend=None, diag: float | None = None) -> BranchInputs:
    """Filter, canonicalize and featurize every point of ``cloud``.

    All radii scale with ``diag`` (default: the bounding-box diagonal).
    """
    initial = np.asarray(initial, dtype=np.float64)
    if initial.shape != cloud.points.shape:
        raise ValueError("initial normals must match the point array shape")
    diag = bbox_diagonal(cloud) if diag is None else float(diag)
    filtered = multi_scale_filter(cloud, index, initial, filter_params, backend, diag)
    rotated, frames = reorient_all(filtered)
    return inputs_from_filtered(cloud, index, filtered, rotated, frames, feature_params, seed, backend, diag)


def inputs_from_filtered(cloud, index, filtered, rotated, frames, feature_params, seed=0, backend=None,
                         diag=None):
    diag = bbox_diagonal(cloud) if diag is None else float(diag)
    radius = feature_params.radius(diag)
    n = len(cloud)
    patches = np.zeros((n, feature_params.max_pts, 3))
    counts = np.zeros(n, dtype=np.int64)
    for i, ball_ids in enumerate(index.ball_all(radius)):
        patch = _patch_from_ball(cloud.points, cloud.points[i], ball_ids, frames[i], radius,
                                 feature_params.max_pts, seed, i)
        patches[i] = patch.coords
        counts[i] = patch.valid_count
    offsets, flat = to_csr(index.ball_all(_hmp_query_radius(feature_params, diag)))
    spacing = feature_params.bin_spacing(diag)
    hmps = _kernels.hmp(cloud.points, cloud.points, hmp_frames(filtered, frames), offsets, flat,
                        radius, feature_params.m, feature_params.ball_factor * spacing,
                        feature_params.sigma_d_factor * spacing, backend)
    return BranchInputs(rotated, frames, patches, counts, hmps, filtered)
