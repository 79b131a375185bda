from __future__ import annotations

import numpy as np
import pytest

from conftest import random_rotation, random_unit
from pipefit.errors import DegenerateGeometry
from pipefit.geometry import (
    Plane,
    PointCloud,
    RigidTransform,
    UnitState,
    absolute_orientation,
    angle_between_axes,
    convex_hull_area,
    fit_plane,
    is_rotation,
    point_line_distance,
    rotation_aligning,
)


def test_fit_plane_three_points():
    p = fit_plane([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    np.testing.assert_allclose(p.normal, [0, 0, 1], atol=1e-15)
    assert p.d == pytest.approx(0.0, abs=1e-15)
    assert p.rms == pytest.approx(0.0, abs=1e-15)


def test_fit_plane_exact_sample_has_zero_rms(rng):
    n = random_unit(rng)
    pts = rng.normal(size=(50, 3))
    pts -= np.outer(pts @ n - 0.3, n)
    p = fit_plane(pts)
    assert p.rms < 1e-12
    assert angle_between_axes(p.normal, n) < 1e-9


def test_fit_plane_noisy(rng):
    pts = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200), 0.5 + rng.normal(0, 0.001, 200)])
    p = fit_plane(pts)
    assert np.degrees(angle_between_axes(p.normal, [0, 0, 1])) < 0.5
    assert p.signed_distance(np.array([[0.0, 0.0, 0.5]]))[0] == pytest.approx(0.0, abs=1e-3)


def test_fit_plane_collinear():
    with pytest.raises(DegenerateGeometry):
        fit_plane([[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]])


def test_plane_normalizes():
    p = Plane([0, 0, 2], -2)
    np.testing.assert_allclose(p.normal, [0, 0, 1])
    assert p.d == -1
    with pytest.raises(DegenerateGeometry):
        Plane([0, 0, 0], 1)


def test_rotation_aligning_identity():
    np.testing.assert_allclose(rotation_aligning([0, 0, 1], [0, 0, 1]).rotation, np.eye(3), atol=1e-15)


def test_rotation_aligning_x_to_z():
    rot = rotation_aligning([1, 0, 0], [0, 0, 1]).rotation
    np.testing.assert_allclose(rot @ [1, 0, 0], [0, 0, 1], atol=1e-12)
    # 90 degrees about (0, -1, 0)
    axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    np.testing.assert_allclose(axis / np.linalg.norm(axis), [0, -1, 0], atol=1e-12)
    assert np.degrees(np.arccos((np.trace(rot) - 1) / 2)) == pytest.approx(90.0)


def test_rotation_aligning_antiparallel():
    rot = rotation_aligning([0, 0, 1], [0, 0, -1]).rotation
    np.testing.assert_allclose(rot @ [0, 0, 1], [0, 0, -1], atol=1e-12)
    assert is_rotation(rot)


def test_rotation_aligning_random(rng):
    for _ in range(200):
        v, t = random_unit(rng), random_unit(rng)
        rot = rotation_aligning(v, t).rotation
        assert np.linalg.norm(rot @ v - t) < 1e-10
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)


def test_rigid_transform_inverse_and_compose(rng):
    a = RigidTransform(random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(10, 3))
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))


def test_hull_area_square_and_interior(rng):
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert convex_hull_area(sq) == pytest.approx(1.0)
    assert convex_hull_area(np.vstack([sq, rng.uniform(0, 1, (50, 2))])) == pytest.approx(1.0)


def test_hull_area_disk_monte_carlo(rng):
    r = np.sqrt(rng.uniform(0, 1, 1000))
    phi = rng.uniform(0, 2 * np.pi, 1000)
    pts = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    area = convex_hull_area(pts)
    # Monte-Carlo oracle: fraction of a bounding box falling inside the hull
    from scipy.spatial import Delaunay
    probe = np.random.default_rng(7).uniform(-1, 1, (200_000, 2))
    mc = 4.0 * np.mean(Delaunay(pts).find_simplex(probe) >= 0)
    assert area == pytest.approx(mc, rel=0.02)
    assert area < np.pi and area > 0.95 * np.pi


def test_hull_area_degenerate():
    with pytest.raises(DegenerateGeometry):
        convex_hull_area([[0, 0], [1, 1], [2, 2]])
    with pytest.raises(DegenerateGeometry):
        convex_hull_area([[0, 0], [1, 1]])


def test_absolute_orientation_recovers_similarity(rng):
    src = rng.normal(size=(20, 3))
    rot, t, s = random_rotation(rng), rng.normal(size=3), 2.7
    dst = s * src @ rot.T + t
    tf = absolute_orientation(src, dst)
    assert tf.scale == pytest.approx(s, abs=1e-9)
    np.testing.assert_allclose(tf.rotation, rot, atol=1e-9)
    np.testing.assert_allclose(tf.translation, t, atol=1e-9)


def test_absolute_orientation_collinear():
    src = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateGeometry):
        absolute_orientation(src, src)


def test_point_line_distance():
    d = point_line_distance(np.array([[1.0, 0, 5], [0, 2, -1]]), np.zeros(3), [0, 0, 3])
    np.testing.assert_allclose(d, [1.0, 2.0])


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    c = PointCloud(np.zeros((3, 3)), UnitState.METRIC)
    assert len(c.subset([0, 2])) == 2
