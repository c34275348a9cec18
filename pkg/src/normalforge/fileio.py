"""Plain-text point/normal files and PLY heatmap export.

Text files hold one point per line, whitespace separated, written with
nine significant digits (``%.9g``). A points file has 3 columns, or 6
when ground-truth normals ride along (``x y z nx ny nz``). Normal files
have 3 columns; multi-branch filter output has 3·X columns.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud

FMT = "%.9g"


def _read_table(path) -> np.ndarray:
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            if len(rows[-1]) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def write_table(path, arr) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for row in arr:
            fh.write(" ".join(FMT % v for v in row))
            fh.write("\n")


def read_cloud(path, name: str | None = None) -> PointCloud:
    """Points from columns 1-3; columns 4-6, if present, become gt normals."""
    table = _read_table(path)
    if table.shape[1] not in (3, 6):
        raise ValueError(f"{path}: a points file needs 3 or 6 columns, got {table.shape[1]}")
    gt = None
    if table.shape[1] == 6:
        gt = table[:, 3:]
        gt = gt / np.linalg.norm(gt, axis=1, keepdims=True)
    return PointCloud(table[:, :3], gt, name if name is not None else Path(path).stem)


def write_cloud(path, cloud: PointCloud, with_normals: bool = True) -> None:
    if with_normals and cloud.gt_normals is not None:
        write_table(path, np.hstack([cloud.points, cloud.gt_normals]))
    else:
        write_table(path, cloud.points)


def read_normals(path, normalize: bool = True) -> np.ndarray:
    """Normals from the last three columns (works on 3- and 6-column files)."""
    table = _read_table(path)
    if table.shape[1] not in (3, 6):
        raise ValueError(f"{path}: a normals file needs 3 or 6 columns, got {table.shape[1]}")
    n = table[:, -3:]
    if normalize:
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise ValueError(f"{path}: zero-length normal")
        n = n / norm
    return n


def write_normals(path, normals) -> None:
    write_table(path, np.asarray(normals).reshape(len(normals), -1))


def read_values(path) -> np.ndarray:
    table = _read_table(path)
    if table.shape[1] != 1:
        raise ValueError(f"{path}: expected one value per line")
    return table[:, 0]


def heat_color(errors_deg, max_deg: float = 30.0) -> np.ndarray:
    """Linear blue (0 deg) to red (``max_deg`` and above) as uint8 RGB."""
    t = np.clip(np.asarray(errors_deg, dtype=np.float64) / max_deg, 0.0, 1.0)
    rgb = np.stack([t, np.zeros_like(t), 1.0 - t], axis=-1)
    return np.rint(rgb * 255.0).astype(np.uint8)


def write_heatmap_ply(path, points, normals, errors_deg, max_deg: float = 30.0) -> None:
    """ASCII PLY with per-vertex position, normal and error colour."""
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    errors_deg = np.asarray(errors_deg, dtype=np.float64)
    if not len(points) == len(normals) == len(errors_deg):
        raise ValueError("points, normals and errors must have equal lengths")
    colors = heat_color(errors_deg, max_deg)
    header = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(header) + "\n")
        for p, n, c in zip(points, normals, colors):
            fh.write(" ".join(FMT % v for v in (*p, *n)) + " %d %d %d\n" % tuple(c))


def read_ply_vertices(path) -> dict[str, np.ndarray]:
    """Vertex properties of an ASCII PLY file, keyed by property name."""
    with Path(path).open("r", encoding="utf-8") as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        names, count = [], 0
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                count = int(parts[2])
            elif parts[0] == "property":
                names.append(parts[-1])
            elif parts[0] == "end_header":
                break
        data = np.array([[float(v) for v in fh.readline().split()] for _ in range(count)])
    return {name: data[:, i] for i, name in enumerate(names)}
