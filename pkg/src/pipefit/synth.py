"""Ground-truthed synthetic data: cylinder scenes, rendered target boards and a simulated SfM backend.

Randomness comes from Philox generators keyed by ``(seed, unit)`` so that
every cylinder, view or frame draws from its own stream regardless of the
order in which units are generated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraView, Intrinsics
from .errors import ConfigError, OutOfFrustum
from .geometry import Plane, PointCloud, RigidTransform, UnitState, rotation_aligning
from .io import Bundle, Track
from .scale import TargetBoard

LAB_RADII_MM = (8.6, 36.5, 36.5, 57.5, 84.1, 109.5)
CLASS_RADII_MM = (8.6, 36.5, 57.5, 84.1, 109.5, 122.3)
# Dense point counts per minimum-overlap setting, used as relative densities.
OVERLAP_POINT_COUNTS = {0.70: 79_963, 0.75: 220_942, 0.80: 291_176, 0.85: 438_667,
                        0.90: 723_973, 0.95: 976_549}
LAB_DENSITY_95 = 1.0e5
LAB_NOISE_95_M = 0.002
LAB_NOISE_STEP_M = 0.0023


def unit_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox stream for one generation unit."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------- scenes

@dataclass
class CylinderSpec:
    radius_m: float
    axis: np.ndarray
    base_m: np.ndarray
    length_m: float
    arc_deg: float = 360.0
    arc_start_deg: float = 0.0
    density_per_m2: float = 1.0e5
    noise_m: float = 0.0

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.axis = self.axis / np.linalg.norm(self.axis)
        self.base_m = np.asarray(self.base_m, dtype=np.float64)
        if not self.radius_m > 0 or not self.length_m > 0:
            raise ConfigError("cylinder radius and length must be positive")
        if not self.density_per_m2 > 0:
            raise ConfigError("density must be positive")
        if not 0 < self.arc_deg <= 360:
            raise ConfigError("visibility arc must be in (0, 360]")
        if self.noise_m < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def visible_area_m2(self) -> float:
        return self.radius_m * np.radians(self.arc_deg) * self.length_m

    def to_dict(self) -> dict:
        return {"radius_m": self.radius_m, "axis": self.axis.tolist(), "base_m": self.base_m.tolist(),
                "length_m": self.length_m, "arc_deg": self.arc_deg, "arc_start_deg": self.arc_start_deg,
                "density_per_m2": self.density_per_m2, "noise_m": self.noise_m}


@dataclass
class SceneSpec:
    cylinders: list[CylinderSpec]
    outlier_fraction: float = 0.0
    seed: int = 0
    outlier_padding_m: float = 0.2

    def __post_init__(self):
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError("outlier fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - {"cylinders", "outlier_fraction", "seed", "outlier_padding_m"}
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        cyls = []
        for c in d["cylinders"]:
            try:
                cyls.append(CylinderSpec(**c))
            except TypeError as exc:
                raise ConfigError(f"bad cylinder spec: {exc}") from exc
        return cls(cyls, float(d.get("outlier_fraction", 0.0)), int(d.get("seed", 0)),
                   float(d.get("outlier_padding_m", 0.2)))

    def to_dict(self) -> dict:
        return {"cylinders": [c.to_dict() for c in self.cylinders], "outlier_fraction": self.outlier_fraction,
                "seed": self.seed, "outlier_padding_m": self.outlier_padding_m}


@dataclass
class SceneSample:
    cloud: PointCloud
    labels: np.ndarray  # cylinder index, or -1 for outliers
    spec: SceneSpec

    def truth_rows(self) -> list[list]:
        return [[i, c.radius_m * 1000.0, c.length_m] for i, c in enumerate(self.spec.cylinders)]


def sample_cylinder(c: CylinderSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform surface samples on the visible arc with Gaussian radial noise."""
    if n is None:
        n = int(round(c.density_per_m2 * c.visible_area_m2))
    frame = rotation_aligning(np.array([0.0, 0.0, 1.0]), c.axis).rotation
    t = rng.uniform(0.0, c.length_m, n)
    phi = np.radians(c.arc_start_deg) + rng.uniform(0.0, np.radians(c.arc_deg), n)
    r = c.radius_m + (rng.normal(0.0, c.noise_m, n) if c.noise_m > 0 else 0.0)
    local = np.column_stack([r * np.cos(phi), r * np.sin(phi), t])
    return c.base_m + local @ frame.T


def sample_scene(spec: SceneSpec) -> SceneSample:
    """Sample every cylinder, then add ``round(outlier_fraction * N)`` uniform outliers.

    ``N`` is the number of cylinder surface points; outliers fill the
    scene's bounding box grown by ``outlier_padding_m``.
    """
    parts, labels = [], []
    for i, c in enumerate(spec.cylinders):
        p = sample_cylinder(c, unit_rng(spec.seed, 0, i))
        parts.append(p)
        labels.append(np.full(len(p), i))
    pts = np.vstack(parts) if parts else np.zeros((0, 3))
    lab = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    n_out = int(round(spec.outlier_fraction * len(pts)))
    if n_out:
        lo = pts.min(axis=0) - spec.outlier_padding_m
        hi = pts.max(axis=0) + spec.outlier_padding_m
        out = unit_rng(spec.seed, 1).uniform(lo, hi, (n_out, 3))
        pts = np.vstack([pts, out])
        lab = np.concatenate([lab, np.full(n_out, -1)])
    return SceneSample(PointCloud(pts, UnitState.METRIC), lab.astype(np.int64), spec)


def overlap_density(overlap: float) -> float:
    """Surface density emulating a minimum-overlap setting (95% -> LAB_DENSITY_95)."""
    key = min(OVERLAP_POINT_COUNTS, key=lambda k: abs(k - overlap))
    return LAB_DENSITY_95 * OVERLAP_POINT_COUNTS[key] / OVERLAP_POINT_COUNTS[0.95]


def overlap_noise(overlap: float) -> float:
    """Noise sigma rising linearly from 2 mm at 95% overlap by 2.3 mm at 70%."""
    return LAB_NOISE_95_M + LAB_NOISE_STEP_M * (0.95 - overlap) / 0.25


def lab_scene_spec(overlap: float = 0.95, seed: int = 0, outlier_fraction: float = 0.0) -> SceneSpec:
    """Six horizontal-ish pipes side by side, all crossed by the plane x = 0.

    Pipes are seen from one side (visible arcs of 180-240 degrees), spaced
    0.35 m apart along y and tilted up to 15 degrees from the x axis.
    """
    rng = unit_rng(seed, 2)
    density, noise = overlap_density(overlap), overlap_noise(overlap)
    cyls = []
    for i, r_mm in enumerate(LAB_RADII_MM):
        r = r_mm / 1000.0
        tilt = np.radians(rng.uniform(-15.0, 15.0))
        yaw = np.radians(rng.uniform(-10.0, 10.0))
        axis = np.array([np.cos(tilt) * np.cos(yaw), np.cos(tilt) * np.sin(yaw), np.sin(tilt)])
        length = float(rng.uniform(1.0, 1.6))
        center = np.array([0.0, 0.35 * i, 1.0 + rng.uniform(-0.05, 0.05)])
        base = center - axis * length * rng.uniform(0.35, 0.65)
        arc = float(rng.uniform(180.0, 240.0))
        start = float(rng.uniform(0.0, 360.0))
        cyls.append(CylinderSpec(r, axis, base, length, arc, start, density, noise))
    return SceneSpec(cyls, outlier_fraction, seed)


def lab_seed_plane() -> Plane:
    return Plane(np.array([1.0, 0.0, 0.0]), 0.0)


# ---------------------------------------------------------------- boards and views

def default_board(circle_radius_m: float = 0.02) -> TargetBoard:
    """Asymmetric five-circle layout on a 0.30 m x 0.20 m board (z = 0 in the board frame)."""
    # Chosen so every pair of center distances differs by at least 8%.
    centers = np.array([[0.116, 0.063, 0.0], [0.004, 0.059, 0.0], [-0.1, -0.063, 0.0],
                        [-0.037, -0.03, 0.0], [0.109, -0.016, 0.0]])
    return TargetBoard(centers, circle_radius_m, "synthetic-5")


@dataclass
class RenderedBoard:
    image: np.ndarray
    centers_px: np.ndarray
    ellipses: list  # exact image ellipses of each circle (Ellipse2D)


def _circle_homography(view: CameraView, center_w, e1, e2) -> np.ndarray:
    return view.K @ np.column_stack([view.rotation @ e1, view.rotation @ e2,
                                     view.rotation @ (center_w - view.center)])


def render_board(board: TargetBoard, view: CameraView, width: int, height: int,
                 pose: RigidTransform | None = None, supersample: int = 4,
                 background: int = 20, foreground: int = 235) -> RenderedBoard:
    """Anti-aliased raster of the board's circles plus the exact projected circle centers.

    Each subsample is back-projected through the circle's plane homography
    and tested against the circle, so coverage is exact up to the
    ``supersample**2`` quantization. Distortion-free views only.
    """
    from .ellipse import Ellipse2D

    pose = pose or RigidTransform()
    if view.intrinsics.distortion:
        raise ConfigError("render_board supports distortion-free views only")
    coverage = np.zeros((height, width))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    e1 = pose.rotation[:, 0]
    e2 = pose.rotation[:, 1]
    centers_px, ellipses = [], []
    r = board.circle_radius_m
    for p in board.centers:
        cw = pose.apply(p)
        if view.to_camera(cw)[0, 2] <= 0:
            raise OutOfFrustum("target behind the camera")
        h = _circle_homography(view, cw, e1, e2)
        rim = cw + r * np.outer(np.cos(np.linspace(0, 2 * np.pi, 73)), e1) \
            + r * np.outer(np.sin(np.linspace(0, 2 * np.pi, 73)), e2)
        if np.any(view.to_camera(rim)[:, 2] <= 0):
            raise OutOfFrustum("target crosses the camera plane")
        rim_px = view.project(rim)
        x0, y0 = np.floor(rim_px.min(axis=0)).astype(int) - 2
        x1, y1 = np.ceil(rim_px.max(axis=0)).astype(int) + 2
        if x0 < 0 or y0 < 0 or x1 >= width or y1 >= height:
            raise OutOfFrustum("target projects outside the image")
        hinv = np.linalg.inv(h)
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        cov = np.zeros(xs.shape)
        for dy in offs:
            for dx in offs:
                q = hinv @ np.vstack([(xs + dx).ravel(), (ys + dy).ravel(), np.ones(xs.size)])
                uv = q[:2] / q[2]
                cov += (np.sum(uv * uv, axis=0) <= r * r).reshape(xs.shape)
        coverage[y0:y1 + 1, x0:x1 + 1] += cov / supersample ** 2
        centers_px.append(view.project(cw)[0])
        conic = hinv.T @ np.diag([1.0, 1.0, -r * r]) @ hinv
        ellipses.append(Ellipse2D.from_conic(conic / np.abs(conic).max()))
    img = np.clip(background + (foreground - background) * np.clip(coverage, 0, 1), 0, 255)
    return RenderedBoard(np.round(img).astype(np.uint8), np.array(centers_px), ellipses)


def add_salt_noise(image: np.ndarray, fraction: float, seed: int = 0, value: int = 255) -> np.ndarray:
    rng = unit_rng(seed, 3)
    out = image.copy()
    out[rng.random(image.shape) < fraction] = value
    return out


def board_views(n_views: int, seed: int = 0, distance_m: float = 0.6, focal_px: float = 1500.0,
                width: int = 1280, height: int = 960, max_tilt_deg: float = 50.0,
                min_tilt_deg: float = 10.0) -> dict[str, CameraView]:
    """Cameras on a spherical cap above a board at the origin (board normal +z).

    Each view looks at a point jittered around the board center from a
    direction tilted ``min_tilt_deg``-``max_tilt_deg`` away from the board
    normal at a random azimuth.
    """
    intr = Intrinsics("cam", focal_px, (width - 1) / 2.0, (height - 1) / 2.0)
    views = {}
    for i in range(n_views):
        rng = unit_rng(seed, 4, i)
        tilt = np.radians(rng.uniform(min_tilt_deg, max_tilt_deg))
        az = rng.uniform(0.0, 2 * np.pi)
        d = distance_m * rng.uniform(0.9, 1.1)
        c = d * np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)])
        target = np.array([*rng.uniform(-0.02, 0.02, 2), 0.0])
        up = np.array([np.cos(az + np.pi / 2), np.sin(az + np.pi / 2), 0.0])
        vid = f"v{i:03d}"
        views[vid] = CameraView.look_at(vid, c, target, intr, up=up, width=width, height=height)
    return views


def to_arbitrary_frame(views: dict[str, CameraView], s_true: float,
                       transform: RigidTransform | None = None) -> dict[str, CameraView]:
    """Express metric views in a reconstruction frame ``x' = T(x) / s_true``.

    A metric length ``L`` then measures ``L / s_true`` in the new frame, so
    the correct scale factor is ``s_true``.
    """
    transform = transform or RigidTransform()
    out = {}
    for vid, v in views.items():
        rot = v.rotation @ transform.rotation.T
        center = transform.apply(v.center) / s_true
        out[vid] = CameraView(vid, rot, center, v.intrinsics, v.width, v.height)
    return out


# ---------------------------------------------------------------- simulated backend

@dataclass
class SimBackendSpec:
    """Simulated reconstruction of frames sampled from a camera sweep.

    Camera speed (image widths per second) is ``base_speed`` plus a burst of
    ``burst_speed`` during ``burst_s``. A frame's overlap is
    ``1 - k * sqrt(m)`` where ``m`` is the mean image motion to its kept
    neighbors, so overlap never increases with the frame gap.
    """

    duration_s: float = 60.0
    base_speed: float = 0.2
    burst_speed: float = 0.8
    burst_s: tuple[float, float] = (20.0, 26.0)
    k: float = 0.25
    n_features: int = 400
    image_size: tuple[int, int] = (1920, 1080)
    noise_sigma: float = 0.002
    min_registered_overlap: float = 0.3
    native_fps: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.k <= 0 or self.base_speed <= 0 or self.burst_speed < 0:
            raise ConfigError("response curve parameters must be positive")

    def motion(self, t0: float, t1: float) -> float:
        lo, hi = self.burst_s
        t0, t1 = min(t0, t1), max(t0, t1)
        burst = max(0.0, min(t1, hi) - max(t0, lo))
        return self.base_speed * (t1 - t0) + self.burst_speed * burst

    def overlap(self, motion: float) -> float:
        return 1.0 - self.k * np.sqrt(max(motion, 0.0))


@dataclass
class SimulatedBackend:
    spec: SimBackendSpec
    calls: int = field(default=0, init=False)

    def __call__(self, timestamps) -> Bundle:
        self.calls += 1
        return simulate_bundle(self.spec, timestamps)


def simulate_bundle(spec: SimBackendSpec, timestamps) -> Bundle:
    """Fabricate a bundle (views, tracks, keypoints, timestamps, matches) for the given frames."""
    ts = sorted(float(t) for t in timestamps)
    w, h = spec.image_size
    intr = Intrinsics("sim", float(max(w, h)), (w - 1) / 2.0, (h - 1) / 2.0)
    b = Bundle(matches={})
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    center = np.array([w / 2.0, h / 2.0])
    ids = []
    for i, t in enumerate(ts):
        frame_no = int(round(t * spec.native_fps))
        vid = f"f{frame_no:07d}"
        ids.append(vid)
        rng = unit_rng(spec.seed, 5, frame_no)
        motions = []
        if i > 0:
            motions.append(spec.motion(ts[i - 1], t))
        if i + 1 < len(ts):
            motions.append(spec.motion(t, ts[i + 1]))
        m = float(np.mean(motions)) if motions else 0.0
        ov = float(np.clip(spec.overlap(m) + rng.normal(0.0, spec.noise_sigma), 0.02, 1.0))
        feats = np.vstack([corners, rng.uniform([0, 0], [w, h], (spec.n_features - 4, 2))])
        half = np.sqrt(ov) * np.array([w, h]) / 2.0
        inner = (center - half, center + half)
        tie_corners = center + np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * half
        feats = np.vstack([feats, tie_corners])
        inside = np.all((feats >= inner[0] - 1e-9) & (feats <= inner[1] + 1e-9), axis=1)
        pos = spec.motion(0.0, t) * w
        b.views[vid] = CameraView(vid, np.eye(3), [pos / w, 0.0, 0.0], intr, w, h, t)
        b.timestamps[vid] = t
        b.keypoints[vid] = {k: feats[k] for k in range(len(feats))}
        if ov >= spec.min_registered_overlap:
            for k in np.nonzero(inside)[0]:
                b.points[f"{vid}_{k}"] = Track(np.array([pos / w, feats[k][0] / w, feats[k][1] / w]), [(vid, int(k))])
        else:
            del b.views[vid]
    for i in range(len(ts) - 1):
        a, c = sorted((ids[i], ids[i + 1]))
        m = spec.motion(ts[i], ts[i + 1])
        b.matches[(a, c)] = int(round(spec.n_features * max(0.0, 1.0 - m)))
    return b
