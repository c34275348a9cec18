"""Synthetic surfaces with analytic normals, plus isotropic Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, bbox_diagonal

KINDS = ("plane", "sphere", "cube", "cylinder", "dihedral")


@dataclass(frozen=True)
class SynthShape:
    kind: str
    count: int = 10000
    noise_frac: float = 0.0
    seed: int = 0
    angle: float = 90.0  # dihedral opening angle in degrees

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape {self.kind!r}; expected one of {KINDS}")
        if self.count < 4:
            raise ValueError("count must be at least 4")
        if self.noise_frac < 0:
            raise ValueError("noise_frac must be >= 0")
        if self.kind == "dihedral" and not 0.0 < self.angle < 360.0:
            raise ValueError("dihedral angle must lie in (0, 360)")


def _plane(rng, n):
    pts = np.column_stack([rng.random(n), rng.random(n), np.zeros(n)])
    return pts, np.tile([0.0, 0.0, 1.0], (n, 1))


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v.copy(), v


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    axis, side = face // 2, (face % 2).astype(float)
    uv = rng.random((n, 2))
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    for ax in range(3):
        sel = axis == ax
        others = [a for a in range(3) if a != ax]
        pts[sel, ax] = side[sel]
        pts[np.ix_(sel, others)] = uv[sel]
        normals[sel, ax] = np.where(side[sel] > 0, 1.0, -1.0)
    return pts, normals


def _cylinder(rng, n, radius=0.5, height=1.0):
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    theta = rng.random(n) * 2 * np.pi
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.random(side.sum()) * height
    normals[side, 0] = np.cos(theta[side])
    normals[side, 1] = np.sin(theta[side])
    for cap, z, nz in ((1, 0.0, -1.0), (2, height, 1.0)):
        sel = part == cap
        rr = radius * np.sqrt(rng.random(sel.sum()))
        pts[sel, 0] = rr * np.cos(theta[sel])
        pts[sel, 1] = rr * np.sin(theta[sel])
        pts[sel, 2] = z
        normals[sel, 2] = nz
    return pts, normals


def dihedral_faces(angle_deg: float):
    """Directions and normals of the two unit half-planes sharing the y axis.

    Face A spans -x from the edge with normal +z; face B is face A rotated
    about the edge so the faces open by ``angle_deg``.
    """
    t = np.radians(angle_deg)
    dir_a = np.array([-1.0, 0.0, 0.0])
    dir_b = np.array([-np.cos(t), 0.0, np.sin(t)])
    n_a = np.array([0.0, 0.0, 1.0])
    n_b = np.cross(dir_b, [0.0, 1.0, 0.0])
    return dir_a, n_a, dir_b, n_b / np.linalg.norm(n_b)


def _dihedral(rng, n, angle):
    dir_a, n_a, dir_b, n_b = dihedral_faces(angle)
    on_b = rng.random(n) < 0.5
    s, y = rng.random(n), rng.random(n)
    d = np.where(on_b[:, None], dir_b, dir_a)
    pts = s[:, None] * d + y[:, None] * np.array([0.0, 1.0, 0.0])
    normals = np.where(on_b[:, None], n_b, n_a)
    return pts, normals


def synth_generate(shape: SynthShape) -> PointCloud:
    """Sample a shape uniformly by area and add Gaussian position noise.

    Noise sigma is ``noise_frac`` times the clean bounding-box diagonal;
    ground-truth normals are those of the clean surface.
    """
    rng = np.random.default_rng(shape.seed)
    n = shape.count
    if shape.kind == "plane":
        pts, normals = _plane(rng, n)
    elif shape.kind == "sphere":
        pts, normals = _sphere(rng, n)
    elif shape.kind == "cube":
        pts, normals = _cube(rng, n)
    elif shape.kind == "cylinder":
        pts, normals = _cylinder(rng, n)
    else:
        pts, normals = _dihedral(rng, n, shape.angle)
    if shape.noise_frac > 0:
        pts = pts + rng.standard_normal(pts.shape) * shape.noise_frac * bbox_diagonal(pts)
    name = f"{shape.kind}_{n}_{shape.noise_frac:g}"
    return PointCloud(pts, normals, name)
