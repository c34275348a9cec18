import numpy as np
import pytest

from normalforge import fileio
from normalforge.geometry import PointCloud


def test_cloud_roundtrip_nine_digits(tmp_path, rng):
    pts = rng.standard_normal((50, 3)) * 123.456
    n = rng.standard_normal((50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    path = tmp_path / "c.xyz"
    fileio.write_cloud(path, PointCloud(pts, n))
    back = fileio.read_cloud(path)
    assert np.allclose(back.points, pts, rtol=1e-8, atol=0)
    assert np.allclose(back.gt_normals, n, rtol=1e-8, atol=1e-9)
    text = path.read_text().splitlines()[0].split()
    assert len(text) == 6 and text[0] == "%.9g" % pts[0, 0]
    fileio.write_cloud(path, back)
    assert fileio.read_cloud(path).points.tobytes() == back.points.tobytes()


def test_read_normals_last_three_columns(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("0 0 0 0 0 2\n1 0 0 0 3 0\n")
    assert fileio.read_normals(path).tolist() == [[0, 0, 1], [0, 1, 0]]


def test_malformed_files(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2 3\n4 5\n")
    with pytest.raises(ValueError):
        fileio.read_cloud(p)
    p.write_text("1 2 x\n")
    with pytest.raises(ValueError):
        fileio.read_cloud(p)
    p.write_text("")
    with pytest.raises(ValueError):
        fileio.read_normals(p)
    p.write_text("0 0 0\n")
    with pytest.raises(ValueError):
        fileio.read_normals(p)


def test_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("# header\n\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n")
    assert len(fileio.read_cloud(p)) == 4


def test_heat_color_endpoints():
    c = fileio.heat_color([0.0, 15.0, 30.0, 90.0])
    assert c[0].tolist() == [0, 0, 255]
    assert c[2].tolist() == [255, 0, 0] and c[3].tolist() == [255, 0, 0]
    assert c[1].tolist() == [128, 0, 128]


def test_heatmap_ply_roundtrip(tmp_path, rng):
    pts = rng.random((20, 3))
    n = np.tile([0, 0, 1.0], (20, 1))
    err = np.linspace(0, 40, 20)
    path = tmp_path / "h.ply"
    fileio.write_heatmap_ply(path, pts, n, err)
    v = fileio.read_ply_vertices(path)
    assert set(v) == {"x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"}
    assert np.allclose(v["x"], pts[:, 0], rtol=1e-8)
    assert v["red"][-1] == 255 and v["blue"][0] == 255
    with pytest.raises(ValueError):
        fileio.write_heatmap_ply(path, pts, n, err[:-1])
