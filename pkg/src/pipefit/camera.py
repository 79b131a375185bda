"""Pinhole camera views with optional two-term radial distortion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera
from .geometry import is_rotation


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a scalar-first quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(m) -> np.ndarray:
    """Scalar-first unit quaternion of a rotation matrix, with w >= 0."""
    x, y, z, w = Rotation.from_matrix(np.asarray(m, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


@dataclass
class Intrinsics:
    """Interior orientation. ``distortion`` holds radial k1, k2 on normalized coordinates."""

    intrinsics_id: str
    focal_px: float
    cx: float
    cy: float
    distortion: tuple[float, ...] = ()
    model: str = "PINHOLE"

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ValueError("principal distance must be positive")
        self.distortion = tuple(float(k) for k in self.distortion)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.focal_px, 0, self.cx], [0, self.focal_px, self.cy], [0, 0, 1.0]])


@dataclass
class CameraView:
    """Exterior orientation (world-to-camera rotation, camera center) plus intrinsics."""

    view_id: str
    rotation: np.ndarray
    center: np.ndarray
    intrinsics: Intrinsics
    width: int | None = None
    height: int | None = None
    timestamp: float | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not is_rotation(self.rotation):
            raise ValueError(f"view {self.view_id}: rotation is not orthonormal")

    @classmethod
    def look_at(cls, view_id, center, target, intrinsics: Intrinsics, up=(0.0, 0.0, 1.0),
                width=None, height=None) -> "CameraView":
        """View at ``center`` looking at ``target`` (camera x right, y down, z forward)."""
        center = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(view_id, np.vstack([x, y, z]), center, intrinsics, width, height)

    @property
    def K(self) -> np.ndarray:  # noqa: N802
        return self.intrinsics.matrix

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.center

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center) @ self.rotation.T

    def _distort(self, xy: np.ndarray) -> np.ndarray:
        k = self.intrinsics.distortion
        if not k:
            return xy
        r2 = np.sum(xy * xy, axis=1, keepdims=True)
        f = 1.0 + k[0] * r2 + (k[1] * r2 * r2 if len(k) > 1 else 0.0)
        return xy * f

    def _undistort(self, xy: np.ndarray) -> np.ndarray:
        if not self.intrinsics.distortion:
            return xy
        und = xy.copy()
        for _ in range(50):
            und = und + (xy - self._distort(und))
        return und

    def project(self, points, check: bool = True) -> np.ndarray:
        """Pixel coordinates of world points."""
        pc = self.to_camera(points)
        if check and np.any(pc[:, 2] <= 0):
            raise BehindCamera(f"point behind view {self.view_id}")
        xy = self._distort(pc[:, :2] / pc[:, 2:3])
        f, cx, cy = self.intrinsics.focal_px, self.intrinsics.cx, self.intrinsics.cy
        return np.column_stack([f * xy[:, 0] + cx, f * xy[:, 1] + cy])

    def normalized(self, pixels) -> np.ndarray:
        """Undistorted normalized image coordinates of pixels."""
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        f, cx, cy = self.intrinsics.focal_px, self.intrinsics.cx, self.intrinsics.cy
        return self._undistort(np.column_stack([(px[:, 0] - cx) / f, (px[:, 1] - cy) / f]))

    def undistort_pixels(self, pixels) -> np.ndarray:
        xy = self.normalized(pixels)
        f, cx, cy = self.intrinsics.focal_px, self.intrinsics.cx, self.intrinsics.cy
        return np.column_stack([f * xy[:, 0] + cx, f * xy[:, 1] + cy])

    def rays(self, pixels) -> np.ndarray:
        """Unit world-frame ray directions through pixels."""
        xy = self.normalized(pixels)
        d = np.column_stack([xy, np.ones(len(xy))]) @ self.rotation
        return d / np.linalg.norm(d, axis=1, keepdims=True)
