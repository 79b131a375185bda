"""Cylinder detection from a point cloud crossed by a seed plane.

The slab of points near the seed plane is projected into the plane, split
into connected segments and each segment is fitted with an ellipse. The
ellipse gives the cylinder radius (semi-minor axis), the axis point in the
plane, and the tilt of the axis from the plane normal (arccos(b/a)) up to a
sign. Both signs are scored on the surrounding points and the better one
seeds a robust 5-parameter cylinder fit.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .ellipse import (
    Ellipse2D,
    EllipseGate,
    connected_components_2d,
    fit_circle,
    fit_ellipse,
    validate_ellipse,
)
from .errors import (
    DegenerateGeometry,
    EmptySlab,
    InsufficientSupport,
    NoConvergence,
    NotAnEllipse,
    PipefitError,
)
from .geometry import (
    Plane,
    PointCloud,
    UnitState,
    align_matrix,
    angle_between_axes,
    axis_angle_matrix,
    fit_plane,
    point_line_distance,
    rotation_aligning,
)
from .robust import fast_median, mad_scale, robust_lm

logger = logging.getLogger(__name__)

Z_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass
class DetectConfig:
    slab_half_thickness_m: float = 0.01
    cell_size_m: float = 0.01
    min_segment_points: int = 30
    gamma_factor: float = 2.0
    gamma_offset_m: float = 0.10
    min_support_points: int = 50
    max_delta_deg: float = 75.0
    merge_angle_deg: float = 2.0
    inlier_k: float = 3.0
    refine_max_iter: int = 100
    refine_tol: float = 1e-8
    trim_rounds: int = 5
    trim_ftol: float = 1e-6
    regate_rounds: int = 3
    circle_fallback: bool = True
    disambiguation_max_points: int = 300
    ellipse_ftol: float = 1e-6
    length_mode: str = "percentile"
    length_percentiles: tuple[float, float] = (1.0, 99.0)
    gate: EllipseGate = field(default_factory=EllipseGate)

    def scaled(self, s: float) -> "DetectConfig":
        """Copy with every length multiplied by ``s``."""
        gate = EllipseGate(**asdict(self.gate))
        for name in ("min_radius_m", "max_radius_m", "inlier_tol_m", "slab_half_thickness_m"):
            setattr(gate, name, getattr(gate, name) * s)
        cfg = DetectConfig(**{**asdict(self), "gate": gate})
        cfg.slab_half_thickness_m *= s
        cfg.cell_size_m *= s
        cfg.gamma_offset_m *= s
        return cfg


@dataclass
class SeedPlaneSpec:
    """Seed plane given explicitly or by three or more non-collinear anchors."""

    plane: Plane | None = None
    anchors: np.ndarray | None = None

    def resolve(self) -> Plane:
        if self.plane is not None:
            return self.plane
        if self.anchors is None:
            raise ValueError("seed plane needs a plane or anchor points")
        return fit_plane(self.anchors)


@dataclass
class CylinderModel:
    axis: np.ndarray
    axis_point: np.ndarray
    radius: float
    length: float = 0.0
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rmse: float = 0.0
    initial_rmse: float = 0.0
    n_iter: int = 0

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.axis = self.axis / np.linalg.norm(self.axis)
        self.axis_point = np.asarray(self.axis_point, dtype=np.float64)
        self.inliers = np.asarray(self.inliers, dtype=np.int64)
        if not self.radius > 0:
            raise DegenerateGeometry("cylinder radius must be positive")

    def to_dict(self, include_inliers: bool = False) -> dict:
        out = {
            "axis": self.axis.tolist(),
            "axis_point_m": self.axis_point.tolist(),
            "radius_m": self.radius,
            "length_m": self.length,
            "rmse_m": self.rmse,
            "n_inliers": int(len(self.inliers)),
        }
        if include_inliers:
            out["inliers"] = self.inliers.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CylinderModel":
        return cls(d["axis"], d["axis_point_m"], d["radius_m"], d.get("length_m", 0.0),
                   d.get("inliers", []), d.get("rmse_m", 0.0))


@dataclass
class EllipseRecovery:
    radius: float
    delta: float
    center: np.ndarray
    candidates: tuple[np.ndarray, np.ndarray]


def plane_rotation(plane: Plane) -> np.ndarray:
    """Rotation taking the plane normal onto +z."""
    return rotation_aligning(plane.normal, Z_AXIS).rotation


def slab_select(cloud: PointCloud | np.ndarray, plane: Plane, d: float = 0.01) -> np.ndarray:
    """Indices of points within distance ``d`` of ``plane``."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise EmptySlab("point cloud is empty")
    idx = np.nonzero(np.abs(plane.signed_distance(pts)) <= d)[0]
    if len(idx) == 0:
        raise EmptySlab("no points within the slab")
    return idx


def project_to_plane(points: np.ndarray, plane: Plane) -> np.ndarray:
    """2D coordinates of ``points`` in the rotated plane frame (parallel projection)."""
    return (np.asarray(points, dtype=np.float64) @ plane_rotation(plane).T)[:, :2]


def intrinsic_frame(xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centroid and principal basis of 2D points; local coords are ``(xy - mean) @ basis``.

    The in-plane orientation of :func:`project_to_plane` depends on how the
    scene sits in world coordinates. Principal axes, with signs fixed by the
    third moment, give a frame that moves with the data, so gridding and
    fitting in it do not depend on the world pose.
    """
    mean = xy.mean(axis=0)
    q = xy - mean
    if len(q) < 2:
        return mean, np.eye(2)
    _, vecs = np.linalg.eigh(q.T @ q)
    basis = vecs[:, ::-1]
    return mean, basis * np.where(np.sum((q @ basis) ** 3, axis=0) < 0, -1.0, 1.0)


def intrinsic_grid_frame(xy: np.ndarray) -> np.ndarray:
    """``xy`` expressed in its :func:`intrinsic_frame`."""
    mean, basis = intrinsic_frame(xy)
    return (xy - mean) @ basis


def _ellipse_from_frame(e: Ellipse2D, mean: np.ndarray, basis: np.ndarray) -> Ellipse2D:
    major = basis @ e.major_dir
    out = Ellipse2D(mean + basis @ e.center, e.a, e.b, float(np.arctan2(major[1], major[0])))
    out.rms = e.rms
    return out


def recover_from_ellipse(e: Ellipse2D, plane: Plane) -> EllipseRecovery:
    """Cylinder radius, tilt, axis point and the two axis candidates of a section ellipse.

    ``candidates[0]`` is the normal turned by +delta about the minor axis,
    ``candidates[1]`` by -delta.
    """
    rot = plane_rotation(plane)
    z0 = -plane.d
    center = rot.T @ np.array([e.center[0], e.center[1], z0])
    delta = float(np.arctan2(np.sqrt((e.a - e.b) * (e.a + e.b)), e.b))
    minor = rot.T @ np.array([*e.minor_dir, 0.0])
    plus = axis_angle_matrix(minor, delta) @ plane.normal
    minus = axis_angle_matrix(minor, -delta) @ plane.normal
    return EllipseRecovery(e.b, delta, center, (plus, minus))


def gamma_radius(radius: float, factor: float = 2.0, offset: float = 0.10) -> float:
    """Interest-point radius around a candidate axis: max(2R, R + 10 cm)."""
    return max(factor * radius, radius + offset)


def gate_interest_points(points: np.ndarray, axis, center, radius: float,
                         config: DetectConfig | None = None) -> np.ndarray:
    """Indices of points within the gamma radius of a candidate axis."""
    config = config or DetectConfig()
    g = gamma_radius(radius, config.gamma_factor, config.gamma_offset_m)
    idx = np.nonzero(point_line_distance(points, center, axis) <= g)[0]
    if len(idx) < config.min_support_points:
        raise InsufficientSupport(f"{len(idx)} points within gamma radius {g:.4f}")
    return idx


@dataclass
class AxisChoice:
    index: int
    axis: np.ndarray
    support: np.ndarray
    rmse: list[float]


def _section_rmse(points: np.ndarray, axis: np.ndarray, center: np.ndarray, radius: float) -> float:
    rot = align_matrix(axis, Z_AXIS)
    p2 = (points - center) @ rot.T
    fit = fit_circle(p2[:, :2], initial=(np.zeros(2), radius), max_iter=40, scale_iters=3)
    return fit.inlier_rmse()


def disambiguate_axis(points: np.ndarray, candidates, center, radius: float,
                      config: DetectConfig | None = None) -> AxisChoice:
    """Pick the axis candidate whose gated points look most like a circle along it.

    Ties go to the first (+delta) candidate.
    """
    config = config or DetectConfig()
    pts = np.asarray(points, dtype=np.float64)
    same = angle_between_axes(candidates[0], candidates[1]) == 0.0
    supports, scores = [], []
    for k, axis in enumerate(candidates):
        if k == 1 and same:
            supports.append(supports[0])
            scores.append(scores[0])
            continue
        try:
            idx = gate_interest_points(pts, axis, center, radius, config)
        except InsufficientSupport:
            supports.append(None)
            scores.append(np.inf)
            continue
        supports.append(idx)
        # An evenly strided subset keeps scoring cheap on dense clouds.
        step = -(-len(idx) // config.disambiguation_max_points)
        scores.append(_section_rmse(pts[idx[::step]], np.asarray(axis), center, radius))
    if supports[0] is None and supports[1] is None:
        raise InsufficientSupport("no candidate axis has enough support")
    k = 0 if scores[0] <= scores[1] else 1
    return AxisChoice(k, np.asarray(candidates[k]), supports[k], scores)


def _cylinder_residuals(points: np.ndarray, origin: np.ndarray, frame: np.ndarray, radius: float):
    q = (points - origin) @ frame
    rho = np.hypot(q[:, 0], q[:, 1])
    safe = np.where(rho == 0, 1e-300, rho)
    jac = np.empty((len(points), 5))
    jac[:, 0] = -q[:, 0] / safe
    jac[:, 1] = -q[:, 1] / safe
    jac[:, 2] = -q[:, 2] * q[:, 0] / safe
    jac[:, 3] = -q[:, 2] * q[:, 1] / safe
    jac[:, 4] = -1.0
    return rho - radius, jac


def refine_cylinder(points: np.ndarray, axis, radius: float, center,
                    config: DetectConfig | None = None, plane: Plane | None = None,
                    indices: np.ndarray | None = None) -> CylinderModel:
    """Robust least-squares cylinder over axis direction (2), axis position (2) and radius.

    ``points`` are the support points; ``indices`` (default ``arange``) maps
    them back to the cloud for the returned inlier set. The axis position is
    reported where the axis meets ``plane`` when one is given. Inliers have
    residual within ``inlier_k`` robust sigmas of the median. The fit is
    repeated on the current inliers until that set stops changing, at most
    ``trim_rounds`` times, so points of neighboring pipes inside the gate
    stop pulling on the solution.
    """
    config = config or DetectConfig()
    pts = np.asarray(points, dtype=np.float64)
    if indices is None:
        indices = np.arange(len(pts))
    if len(pts) < config.min_support_points:
        raise InsufficientSupport(f"{len(pts)} support points")
    axis = np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis)
    frame0 = rotation_aligning(Z_AXIS, axis).rotation
    origin0 = np.asarray(center, dtype=np.float64)
    extent = np.ptp((pts - origin0) @ axis)
    if extent < radius:
        raise DegenerateGeometry("axial extent of support is shorter than the radius")

    def solve(sub, state, ftol):
        centroid = sub.mean(axis=0)

        def recenter(origin, d):
            return origin + ((centroid - origin) @ d) * d

        def fun(st):
            return _cylinder_residuals(sub, st[0], st[1], st[2])

        def update(st, delta):
            origin, frame, r = st
            d_new = frame @ np.array([delta[2], delta[3], 1.0])
            d_new /= np.linalg.norm(d_new)
            origin = origin + frame @ np.array([delta[0], delta[1], 0.0])
            frame = align_matrix(frame[:, 2], d_new) @ frame
            return recenter(origin, d_new), frame, r + delta[4]

        state = (recenter(state[0], state[1][:, 2]), state[1], state[2])
        return robust_lm(fun, state, update, max_iter=config.refine_max_iter,
                         tol=config.refine_tol, ftol=ftol)

    def inliers(state, active):
        resid = _cylinder_residuals(pts, *state)[0]
        sigma = mad_scale(resid[active])
        thresh = max(config.inlier_k * sigma, 1e-9 * state[2])
        return resid, np.nonzero(np.abs(resid - fast_median(resid[active])) <= thresh)[0]

    init_state = (origin0, frame0, float(radius))
    state = init_state
    active = np.arange(len(pts))
    n_iter = 0
    # Coarse passes settle the inlier set; a final pass meets the step tolerance.
    for _ in range(config.trim_rounds):
        res = solve(pts[active], state, config.trim_ftol)
        n_iter += res.n_iter
        if not res.state[2] > 0:
            raise DegenerateGeometry("refined radius is not positive")
        state = res.state
        _, keep = inliers(state, active)
        if len(keep) < config.min_support_points:
            raise InsufficientSupport(f"{len(keep)} inliers after trimming")
        if np.array_equal(keep, active):
            break
        active = keep
    res = solve(pts[active], state, 0.0)
    n_iter += res.n_iter
    if not res.converged:
        raise NoConvergence(f"no convergence after {res.n_iter} iterations")
    state = res.state
    if not state[2] > 0:
        raise DegenerateGeometry("refined radius is not positive")
    resid, keep = inliers(state, active)
    if len(keep) < config.min_support_points:
        raise InsufficientSupport(f"{len(keep)} inliers after trimming")
    init_resid = _cylinder_residuals(pts, *init_state)[0]
    origin, frame, r = state
    d = frame[:, 2]
    inl = np.zeros(len(pts), dtype=bool)
    inl[keep] = True
    if plane is not None and abs(plane.normal @ d) > 1e-12:
        t = -(plane.normal @ origin + plane.d) / (plane.normal @ d)
        point = origin + t * d
    else:
        point = origin
    model = CylinderModel(d, point, r, 0.0, indices[inl],
                          float(np.sqrt(np.mean(resid[inl] ** 2))),
                          float(np.sqrt(np.mean(init_resid[inl] ** 2))), n_iter)
    model.length = measure_length(model, pts[inl], local=True, mode=config.length_mode,
                                  percentiles=config.length_percentiles)
    return model


def measure_length(model: CylinderModel, points: np.ndarray, local: bool = False,
                   mode: str = "percentile", percentiles=(1.0, 99.0)) -> float:
    """Axial extent of the inliers: 1st-99th percentile span, or min-max with ``mode='minmax'``.

    ``points`` is the full cloud (indexed by ``model.inliers``) unless
    ``local`` is set, in which case it already holds only the inliers.
    """
    pts = np.asarray(points, dtype=np.float64)
    if not local:
        pts = pts[model.inliers]
    if len(pts) == 0:
        return 0.0
    t = (pts - model.axis_point) @ model.axis
    if mode == "minmax":
        return float(t.max() - t.min())
    if mode != "percentile":
        raise ValueError(f"unknown length mode {mode!r}")
    lo, hi = np.percentile(t, percentiles)
    return float(hi - lo)


@dataclass
class SegmentDiagnostic:
    segment: int
    n_points: int
    status: str
    reason: str = ""
    ellipse: dict | None = None


@dataclass
class DetectionResult:
    cylinders: list[CylinderModel]
    diagnostics: list[SegmentDiagnostic]
    n_slab_points: int = 0

    def __iter__(self):
        return iter(self.cylinders)

    def __len__(self):
        return len(self.cylinders)

    def diagnostics_dict(self) -> dict:
        return {"n_slab_points": self.n_slab_points,
                "segments": [asdict(d) for d in self.diagnostics]}


def detect_segment(points: np.ndarray, seg_points2d: np.ndarray, plane: Plane,
                   config: DetectConfig) -> CylinderModel:
    """Run ellipse fit, recovery, disambiguation and refinement for one slab segment.

    When the ellipse is rejected for its size or elongation and
    ``circle_fallback`` is set, a circle fit of the segment is tried as a
    perpendicular-section hypothesis; the 3D refinement then recovers the
    tilt. This rescues thin pipes whose noisy sections give unstable conics.
    """
    mean, basis = intrinsic_frame(seg_points2d)
    local = (seg_points2d - mean) @ basis
    # The section ellipse only seeds the 3D fit, so a looser stop suffices.
    e = fit_ellipse(local, ftol=config.ellipse_ftol)
    check = validate_ellipse(e, local, config.gate)
    if not check.accepted and config.circle_fallback and check.reason in ("out-of-range", "eccentricity"):
        circ = fit_circle(local)
        alt = Ellipse2D(circ.center, circ.radius, circ.radius)
        alt_check = validate_ellipse(alt, local, config.gate)
        if alt_check.accepted:
            e, check = alt, alt_check
    e = _ellipse_from_frame(e, mean, basis)
    if not check.accepted:
        raise _Rejected(check.reason, e)
    rec = recover_from_ellipse(e, plane)
    if np.degrees(rec.delta) > config.max_delta_deg:
        raise _Rejected("grazing-section", e)
    choice = disambiguate_axis(points, rec.candidates, rec.center, rec.radius, config)
    support = choice.support
    model = refine_cylinder(points[support], choice.axis, rec.radius, rec.center,
                            config, plane, support)
    # The gate around the seed axis can miss the far ends of a tilted pipe;
    # re-gate around the refined axis until the support stops changing.
    for _ in range(config.regate_rounds):
        regated = gate_interest_points(points, model.axis, model.axis_point, model.radius, config)
        if np.array_equal(regated, support):
            break
        support = regated
        model = refine_cylinder(points[support], model.axis, model.radius, model.axis_point,
                                config, plane, support)
    if not config.gate.min_radius_m <= model.radius <= config.gate.max_radius_m:
        raise _Rejected("refined-out-of-range", e)
    return model


class _Rejected(Exception):
    def __init__(self, reason: str, ellipse: Ellipse2D | None = None):
        super().__init__(reason)
        self.reason = reason
        self.ellipse = ellipse


def merge_duplicates(models: list[CylinderModel], points: np.ndarray,
                     config: DetectConfig) -> list[CylinderModel]:
    """Merge models with near-parallel axes whose axis separation is below the radius.

    The model with more inliers survives and absorbs the other's inliers.
    """
    kept: list[CylinderModel] = []
    for m in sorted(models, key=lambda m: -len(m.inliers)):
        for k in kept:
            angle = np.degrees(angle_between_axes(k.axis, m.axis))
            sep = point_line_distance(m.axis_point[None], k.axis_point, k.axis)[0]
            if angle < config.merge_angle_deg and sep < k.radius:
                k.inliers = np.union1d(k.inliers, m.inliers)
                k.length = measure_length(k, points, mode=config.length_mode,
                                          percentiles=config.length_percentiles)
                break
        else:
            kept.append(m)
    order = {id(m): i for i, m in enumerate(models)}
    return sorted(kept, key=lambda m: order[id(m)])


def detect_all(cloud: PointCloud, seed: SeedPlaneSpec | Plane,
               config: DetectConfig | None = None) -> DetectionResult:
    """Detect every cylinder crossed by the seed plane."""
    config = config or DetectConfig()
    if cloud.unit_state == UnitState.ARBITRARY:
        logger.warning("detecting cylinders in an arbitrarily scaled cloud; "
                       "metric thresholds may not apply")
    plane = seed.resolve() if isinstance(seed, SeedPlaneSpec) else seed
    pts = cloud.points
    slab = slab_select(pts, plane, config.slab_half_thickness_m)
    xy = project_to_plane(pts[slab], plane)
    segments = connected_components_2d(intrinsic_grid_frame(xy), config.cell_size_m)
    models, diags = [], []
    for i, seg in enumerate(segments):
        if seg.count < config.min_segment_points:
            diags.append(SegmentDiagnostic(i, seg.count, "rejected", "too-few-points"))
            continue
        try:
            model = detect_segment(pts, xy[seg.indices], plane, config)
        except _Rejected as rej:
            diags.append(SegmentDiagnostic(i, seg.count, "rejected", rej.reason,
                                           rej.ellipse.to_dict() if rej.ellipse else None))
            continue
        except (NotAnEllipse, DegenerateGeometry, InsufficientSupport, NoConvergence) as exc:
            diags.append(SegmentDiagnostic(i, seg.count, "rejected", type(exc).__name__))
            continue
        models.append(model)
        diags.append(SegmentDiagnostic(i, seg.count, "accepted"))
    merged = merge_duplicates(models, pts, config)
    return DetectionResult(merged, diags, int(len(slab)))


__all__ = [
    "CylinderModel", "DetectConfig", "DetectionResult", "EllipseRecovery", "SeedPlaneSpec",
    "detect_all", "detect_segment", "disambiguate_axis", "gamma_radius", "gate_interest_points",
    "intrinsic_frame", "intrinsic_grid_frame",
    "measure_length", "merge_duplicates", "project_to_plane", "recover_from_ellipse",
    "refine_cylinder", "slab_select",
]
