"""Geometric primitives shared across pipefit.

Points are plain ``(N, 3)`` float64 arrays. Internal lengths are meters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateGeometry


class UnitState(str, enum.Enum):
    ARBITRARY = "arbitrary"
    METRIC = "metric"


@dataclass
class PointCloud:
    points: np.ndarray
    unit_state: UnitState = UnitState.ARBITRARY
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.unit_state = UnitState(self.unit_state)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors must have one row per point")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        colors = None if self.colors is None else self.colors[indices]
        return PointCloud(self.points[indices], self.unit_state, colors)


@dataclass
class Plane:
    """Plane ``normal . p + d = 0`` with a unit normal."""

    normal: np.ndarray
    d: float
    rms: float = field(default=0.0, compare=False)

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0:
            raise DegenerateGeometry("plane normal must be non-zero")
        self.normal = n / norm
        self.d = float(self.d) / norm

    @classmethod
    def from_point_normal(cls, point, normal) -> "Plane":
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return cls(n, -float(n @ np.asarray(point, dtype=np.float64)))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal + self.d

    def origin(self) -> np.ndarray:
        """Point of the plane closest to the coordinate origin."""
        return -self.d * self.normal

    def transformed(self, transform: "RigidTransform") -> "Plane":
        return Plane.from_point_normal(transform.apply(self.origin()), transform.rotation @ self.normal)


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not is_rotation(self.rotation):
            raise ValueError("rotation must be orthonormal with determinant +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self o other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass
class SimilarityTransform:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")
        self.scale = float(self.scale)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation


def is_rotation(matrix: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(matrix, dtype=np.float64)
    return (m.shape == (3, 3)
            and np.allclose(m @ m.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(m) - 1.0) <= tol)


def _skew(k: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])


def _perpendicular(v: np.ndarray) -> np.ndarray:
    # Fixed tie-break: cross with the coordinate axis least aligned with v.
    e = np.zeros(3)
    e[int(np.argmin(np.abs(v)))] = 1.0
    p = np.cross(v, e)
    return p / np.linalg.norm(p)


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Right-handed rotation by ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = _skew(k)
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rotation_aligning(v, target) -> RigidTransform:
    """Minimal-angle rotation taking unit vector ``v`` onto ``target``.

    The rotation axis is ``v x target``. For antiparallel inputs the axis is
    ``v x e`` where ``e`` is the coordinate axis least aligned with ``v``.
    """
    rot = align_matrix(v, target)
    # One polar step removes rounding drift from orthonormality.
    u, _, vt = np.linalg.svd(rot)
    return RigidTransform(u @ vt)


def align_matrix(v, target) -> np.ndarray:
    """Unchecked 3x3 matrix of :func:`rotation_aligning` (for inner loops)."""
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    v = v / np.sqrt(v @ v)
    t = t / np.sqrt(t @ t)
    c = float(v @ t)
    if 1.0 + c < 1e-6:
        flip = axis_angle_matrix(_perpendicular(v), np.pi)
        return align_matrix(flip @ v, t) @ flip
    k0 = v[1] * t[2] - v[2] * t[1]
    k1 = v[2] * t[0] - v[0] * t[2]
    k2 = v[0] * t[1] - v[1] * t[0]
    kx = np.array([[0.0, -k2, k1], [k2, 0.0, -k0], [-k1, k0, 0.0]])
    return np.eye(3) + kx + (kx @ kx) / (1.0 + c)


def fit_plane(points) -> Plane:
    """Total-least-squares plane through ``points``.

    The normal is the direction of least spread (smallest singular vector
    of the centered points). Its sign is chosen so the largest-magnitude component
    is positive. ``Plane.rms`` holds the orthogonal residual RMS.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateGeometry("plane fit needs at least 3 points")
    centroid = pts.mean(axis=0)
    q = pts - centroid
    # SVD of the centered points; squaring into a scatter matrix would
    # halve the digits available for the collinearity test.
    _, sv, vt = np.linalg.svd(q, full_matrices=False)
    if sv[0] <= 0.0 or sv[1] / sv[0] < 1e-9:
        raise DegenerateGeometry("points are collinear")
    normal = vt[2]
    if normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    resid = q @ normal
    plane = Plane(normal, -float(normal @ centroid))
    plane.rms = float(np.sqrt(np.mean(resid ** 2)))
    return plane


def convex_hull_area(points2d) -> float:
    """Area of the 2D convex hull of ``points2d``."""
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateGeometry("hull area needs at least 3 points")
    extent = np.ptp(pts, axis=0).max()
    if extent == 0.0:
        raise DegenerateGeometry("all points coincide")
    try:
        area = float(ConvexHull(pts).volume)
    except QhullError as exc:
        raise DegenerateGeometry("points are collinear") from exc
    if area <= 1e-12 * extent * extent:
        raise DegenerateGeometry("points are collinear")
    return area


def absolute_orientation(source, target, with_scale: bool = True) -> SimilarityTransform:
    """Closed-form least-squares similarity mapping ``source`` onto ``target``.

    Solves ``min sum |target_i - (s R source_i + t)|^2`` via the SVD of the
    cross-covariance, with a reflection guard.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst) or len(src) < 3:
        raise DegenerateGeometry("need at least 3 correspondences")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0.0 or sv[1] / sv[0] < 1e-9:
        raise DegenerateGeometry("correspondences are collinear")
    cov = b.T @ a / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    var_s = np.sum(a ** 2) / len(src)
    scale = float(np.trace(np.diag(d) @ sign) / var_s) if with_scale else 1.0
    return SimilarityTransform(scale, rot, mu_d - scale * rot @ mu_s)


def point_line_distance(points, line_point, direction) -> np.ndarray:
    """Perpendicular distance of ``points`` to an infinite line."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    q = np.asarray(points, dtype=np.float64) - line_point
    perp = q - np.outer(q @ d, d)
    return np.sqrt(np.einsum("ij,ij->i", perp, perp))


def angle_between_axes(a, b) -> float:
    """Unsigned angle between two lines (direction sign ignored), radians."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    # atan2 form keeps precision for tiny angles.
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b)))
