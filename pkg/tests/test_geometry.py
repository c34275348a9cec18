import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from normalforge.errors import DegenerateNeighborhood
from normalforge.geometry import (
    CANDIDATE, SMOOTH, PointCloud, bbox_diagonal, build_index, classify_points,
    covariance, pca_normal, pca_normals, surface_variation, to_csr,
)
from normalforge.synth import SynthShape, synth_generate


def brute_knn(points, q, k):
    d = np.linalg.norm(points - q, axis=1)
    return np.argsort(d, kind="stable")[:k]


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0, 0, np.nan]] * 5))
    with pytest.raises(ValueError):
        PointCloud(np.random.rand(5, 3), gt_normals=np.ones((5, 3)))
    c = PointCloud(np.random.rand(5, 3))
    assert not c.points.flags.writeable


def test_knn_and_ball_match_brute_force(rng):
    pts = rng.random((500, 3))
    idx = build_index(PointCloud(pts))
    for q in rng.random((20, 3)):
        got = idx.knn(q, 10)
        want = brute_knn(pts, q, 10)
        assert np.allclose(np.linalg.norm(pts[got] - q, axis=1), np.linalg.norm(pts[want] - q, axis=1))
        ball = idx.ball(q, 0.2)
        assert np.array_equal(ball, np.flatnonzero(np.linalg.norm(pts - q, axis=1) <= 0.2))


def test_knn_all_includes_self_first(small_cloud):
    dist, idx = build_index(small_cloud).knn_all(5)
    assert np.array_equal(idx[:, 0], np.arange(len(small_cloud)))
    assert np.all(dist[:, 0] == 0)
    assert np.all(np.diff(dist, axis=1) >= 0)


def test_to_csr_roundtrip():
    lists = [np.array([1, 2]), np.array([], dtype=np.int64), np.array([5])]
    off, flat = to_csr(lists)
    assert off.tolist() == [0, 2, 2, 3]
    assert flat.tolist() == [1, 2, 5]


def test_pca_normal_plane():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.random(50), rng.random(50), np.zeros(50)])
    n = pca_normal(PointCloud(pts), np.arange(50))
    assert abs(abs(n[2]) - 1) < 1e-12


def test_pca_normal_degenerate():
    pts = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateNeighborhood):
        pca_normal(PointCloud(pts), np.arange(10))
    with pytest.raises(DegenerateNeighborhood):
        pca_normal(PointCloud(pts), [0, 1])


def test_pca_normals_batched_matches_single(noisy_cube):
    idx = build_index(noisy_cube)
    batch = pca_normals(noisy_cube, idx, 30)
    for i in (0, 17, 999):
        single = pca_normal(noisy_cube, idx.knn(noisy_cube.points[i], 30))
        assert abs(abs(single @ batch[i]) - 1) < 1e-10


def test_surface_variation_range_and_classes():
    cube = synth_generate(SynthShape("cube", 3000, 0.0, seed=1))
    idx = build_index(cube)
    sv = surface_variation(cube, idx, 40)
    assert np.all((sv >= 0) & (sv <= 1 / 3 + 1e-12))
    cls = classify_points(cube, idx, 40, 0.05)
    assert set(np.unique(cls)) <= {SMOOTH, CANDIDATE}
    # points at a face center are smooth, points at corners are candidates
    center = np.argmin(np.linalg.norm(cube.points - [0.5, 0.5, 1.0], axis=1))
    corner = np.argmin(np.linalg.norm(cube.points - [1.0, 1.0, 1.0], axis=1))
    assert cls[center] == SMOOTH and cls[corner] == CANDIDATE


def test_classify_rejects_bad_params(small_cloud):
    idx = build_index(small_cloud)
    with pytest.raises(ValueError):
        classify_points(small_cloud, idx, k=2)
    with pytest.raises(ValueError):
        classify_points(small_cloud, idx, tau=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_covariance_translation_invariant_and_psd(seed, scale):
    pts = np.random.default_rng(seed).random((20, 3)) * scale
    c1 = covariance(pts)
    c2 = covariance(pts + np.array([3.0, -1.0, 2.0]))
    assert np.allclose(c1, c2, atol=1e-10 * scale ** 2)
    assert np.all(np.linalg.eigvalsh(c1) >= -1e-12 * scale ** 2)


def test_bbox_diagonal():
    assert bbox_diagonal(np.array([[0, 0, 0], [1, 1, 1.0]])) == pytest.approx(np.sqrt(3))
