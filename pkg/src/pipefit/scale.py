"""Metric scale from a five-circle target board observed in several calibrated views.

Pipeline: detect bright elliptical blobs per raster, match them across
views and to the board layout, move each ellipse center onto the image of
the true circle center, triangulate, and take the ratio of the board's
centroid spread to the triangulated spread.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares
from skimage.filters import threshold_otsu
from skimage.measure import find_contours

from .camera import CameraView
from .ellipse import Ellipse2D, fit_ellipse
from .errors import (
    AlreadyMetric,
    AmbiguousMatch,
    BehindCamera,
    ConfigError,
    DegenerateGeometry,
    IllConditioned,
    InsufficientViews,
    NoTargetsFound,
    NotAnEllipse,
    PipefitError,
)
from .geometry import PointCloud, UnitState, fit_plane

logger = logging.getLogger(__name__)

N_TARGETS = 5
MAX_MATCH_RMS_PX = 2.0
AMBIGUITY_RATIO = 1.1
MIN_PARALLAX_DEG = 1.0


@dataclass
class TargetBoard:
    """Five circle centers in the board frame (meters) and the common circle radius."""

    centers: np.ndarray
    circle_radius_m: float
    board_id: str = "board"

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        if len(self.centers) != N_TARGETS:
            raise ConfigError(f"board needs exactly {N_TARGETS} centers, got {len(self.centers)}")
        if not self.circle_radius_m > 0:
            raise ConfigError("circle radius must be positive")
        q = self.centers - self.centers.mean(axis=0)
        sv = np.linalg.svd(q, compute_uv=False)
        if sv[0] == 0 or sv[1] / sv[0] < 1e-6:
            raise ConfigError("board centers are collinear")

    def pairwise_distances(self) -> np.ndarray:
        i, j = np.triu_indices(N_TARGETS, 1)
        return np.linalg.norm(self.centers[i] - self.centers[j], axis=1)

    def separation(self) -> float:
        """Smallest relative gap between any two pairwise center distances."""
        d = np.sort(self.pairwise_distances())
        return float(np.min(np.diff(d) / d[1:]))

    @classmethod
    def from_dict(cls, data: dict, allow_symmetric: bool = False) -> "TargetBoard":
        unknown = set(data) - {"board_id", "circle_radius_m", "centers_m"}
        if unknown:
            raise ConfigError(f"unknown board keys: {sorted(unknown)}")
        try:
            board = cls(data["centers_m"], float(data["circle_radius_m"]), str(data.get("board_id", "board")))
        except KeyError as exc:
            raise ConfigError(f"board definition lacks {exc}") from exc
        if not allow_symmetric and board.separation() < 0.02:
            raise ConfigError("board layout is too symmetric for unambiguous matching "
                              f"(min distance separation {board.separation():.3%} < 2%)")
        return board

    def to_dict(self) -> dict:
        return {"board_id": self.board_id, "circle_radius_m": self.circle_radius_m,
                "centers_m": self.centers.tolist()}


@dataclass
class TargetObservation:
    view_id: str
    ellipse: Ellipse2D
    corrected_center: np.ndarray | None = None
    target_index: int | None = None

    @property
    def center(self) -> np.ndarray:
        return self.ellipse.center if self.corrected_center is None else self.corrected_center

    @property
    def correction_px(self) -> float:
        if self.corrected_center is None:
            return 0.0
        return float(np.linalg.norm(self.corrected_center - self.ellipse.center))


# ---------------------------------------------------------------- detection

def detect_target_ellipses(image: np.ndarray, min_area_px: int = 12, max_area_fraction: float = 0.25,
                           fill_range: tuple[float, float] = (0.8, 1.25)) -> list[Ellipse2D]:
    """Find bright elliptical blobs on a dark background.

    Blobs come from an Otsu threshold followed by a 3x3 opening; each blob's
    boundary is the sub-pixel iso-contour halfway between the background and
    foreground levels, which is then ellipse-fitted. Blobs whose pixel area
    disagrees with the fitted ellipse area are dropped. Results are sorted by
    center (x, then y).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2D grayscale raster")
    if img.max() - img.min() < 16:
        raise NoTargetsFound("raster has no contrast")
    t = threshold_otsu(img)
    raw_mask = img > t
    mask = ndimage.binary_opening(raw_mask, structure=np.ones((3, 3), bool))
    lo, hi = img[~raw_mask].mean(), img[raw_mask].mean()
    level = 0.5 * (lo + hi)
    speckle = np.count_nonzero(raw_mask & ~mask) / raw_mask.size
    contour_img = ndimage.median_filter(img, size=3) if speckle > 1e-3 else img
    labels, n = ndimage.label(mask)
    out = []
    max_area = max_area_fraction * img.size
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        area = int(np.count_nonzero(labels[sl] == k))
        if area < min_area_px or area > max_area:
            continue
        r0 = max(sl[0].start - 3, 0)
        c0 = max(sl[1].start - 3, 0)
        r1 = min(sl[0].stop + 3, img.shape[0])
        c1 = min(sl[1].stop + 3, img.shape[1])
        crop = contour_img[r0:r1, c0:c1].copy()
        # Keep other blobs out of the crop.
        other = (labels[r0:r1, c0:c1] != k) & (labels[r0:r1, c0:c1] > 0)
        crop[ndimage.binary_dilation(other, iterations=1)] = lo
        contours = [c for c in find_contours(crop, level) if np.allclose(c[0], c[-1])]
        if not contours:
            continue
        boundary = max(contours, key=len)[:-1]
        if len(boundary) < 6:
            continue
        pts = np.column_stack([boundary[:, 1] + c0, boundary[:, 0] + r0])
        try:
            e = fit_ellipse(pts)
        except (NotAnEllipse, DegenerateGeometry):
            continue
        fill = area / (np.pi * e.a * e.b)
        if not fill_range[0] <= fill <= fill_range[1]:
            continue
        out.append(e)
    if not out:
        raise NoTargetsFound("no elliptical targets passed the gates")
    out.sort(key=lambda e: (e.center[0], e.center[1]))
    return out


# ---------------------------------------------------------------- triangulation

def _projection(view: CameraView) -> np.ndarray:
    return np.hstack([view.rotation, view.translation[:, None]])


def _dlt(views: list[CameraView], norm_xy: np.ndarray) -> np.ndarray:
    """Linear triangulation from normalized coordinates; ``norm_xy`` is (..., n_views, 2)."""
    rows = []
    for i, v in enumerate(views):
        p = _projection(v)
        x = norm_xy[..., i, 0:1]
        y = norm_xy[..., i, 1:2]
        rows.append(x * p[2] - p[0])
        rows.append(y * p[2] - p[1])
    a = np.stack(rows, axis=-2)
    _, _, vt = np.linalg.svd(a)
    h = vt[..., -1, :]
    w = np.where(np.abs(h[..., 3:]) < 1e-300, 1e-300, h[..., 3:])
    return h[..., :3] / w


def _reproj_sq(view: CameraView, xyz: np.ndarray, pixels: np.ndarray):
    """Squared pinhole reprojection error and depth for undistorted pixel observations."""
    pc = (xyz - view.center) @ view.rotation.T
    z = pc[..., 2]
    safe = np.where(np.abs(z) < 1e-300, 1e-300, z)
    f, cx, cy = view.intrinsics.focal_px, view.intrinsics.cx, view.intrinsics.cy
    u = f * pc[..., 0] / safe + cx
    v = f * pc[..., 1] / safe + cy
    return (u - pixels[..., 0]) ** 2 + (v - pixels[..., 1]) ** 2, z


@dataclass
class Triangulation:
    points: dict[int, np.ndarray]
    rms_px: dict[int, float]
    n_views: dict[int, int]

    def stacked(self, labels=None):
        labels = sorted(self.points) if labels is None else labels
        return np.array([self.points[k] for k in labels])


def triangulate_point(views: list[CameraView], pixels: np.ndarray, refine: bool = True):
    """Triangulate one point from undistorted pixel observations in two or more views."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(views) < 2:
        raise InsufficientViews("triangulation needs at least two views")
    rays = np.array([_ray(v, p) for v, p in zip(views, pixels)])
    cosang = np.clip(rays @ rays.T, -1.0, 1.0)
    parallax = np.degrees(np.arccos(cosang.min()))
    if parallax < MIN_PARALLAX_DEG:
        raise IllConditioned(f"max ray parallax {parallax:.3f} deg < {MIN_PARALLAX_DEG} deg")
    norm = np.array([_pix_to_norm(v, p) for v, p in zip(views, pixels)])
    x = _dlt(views, norm[None])[0]
    if refine:
        def fun(p):
            res = []
            for v, obs in zip(views, pixels):
                pc = v.rotation @ (p - v.center)
                f, cx, cy = v.intrinsics.focal_px, v.intrinsics.cx, v.intrinsics.cy
                res.extend([f * pc[0] / pc[2] + cx - obs[0], f * pc[1] / pc[2] + cy - obs[1]])
            return np.array(res)
        sol = least_squares(fun, x, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        x = sol.x
    sq = np.array([_reproj_sq(v, x, p)[0] for v, p in zip(views, pixels)])
    depth = np.array([(v.rotation @ (x - v.center))[2] for v in views])
    if np.any(depth <= 0):
        raise BehindCamera("triangulated point lies behind a camera")
    return x, float(np.sqrt(np.mean(sq / 2.0)))


def _pix_to_norm(view: CameraView, pixel) -> np.ndarray:
    f, cx, cy = view.intrinsics.focal_px, view.intrinsics.cx, view.intrinsics.cy
    return np.array([(pixel[0] - cx) / f, (pixel[1] - cy) / f])


def _ray(view: CameraView, pixel) -> np.ndarray:
    d = view.rotation.T @ np.array([*_pix_to_norm(view, pixel), 1.0])
    return d / np.linalg.norm(d)


def triangulate_centers(observations: dict[str, list[TargetObservation]],
                        views: dict[str, CameraView], use_corrected: bool = True) -> Triangulation:
    """Triangulate every labeled target seen in two or more views.

    Observation centers are taken as undistorted pixels. Each point is the
    linear solution refined by Gauss-Newton on reprojection error.
    """
    by_label: dict[int, list[tuple[CameraView, np.ndarray]]] = {}
    for vid in sorted(observations):
        for ob in observations[vid]:
            if ob.target_index is None:
                continue
            c = ob.center if use_corrected else ob.ellipse.center
            by_label.setdefault(ob.target_index, []).append((views[vid], c))
    pts, rms, nv = {}, {}, {}
    for label in sorted(by_label):
        entries = by_label[label]
        if len(entries) < 2:
            continue
        x, r = triangulate_point([e[0] for e in entries], np.array([e[1] for e in entries]))
        pts[label], rms[label], nv[label] = x, r, len(entries)
    if len(pts) < 2:
        raise InsufficientViews("fewer than two targets are seen in two or more views")
    return Triangulation(pts, rms, nv)


# ---------------------------------------------------------------- matching

def _pair_costs(va: CameraView, vb: CameraView, ca: np.ndarray, cb: np.ndarray):
    """Two-view triangulation cost for every (a, b) center pairing."""
    na = np.array([_pix_to_norm(va, c) for c in ca])
    nb = np.array([_pix_to_norm(vb, c) for c in cb])
    pair = np.stack(np.broadcast_arrays(na[:, None, :], nb[None, :, :]), axis=-2)
    x = _dlt([va, vb], pair)
    ea, za = _reproj_sq(va, x, ca[:, None, :])
    eb, zb = _reproj_sq(vb, x, cb[None, :, :])
    cost = (ea + eb) / 2.0
    cost[(za <= 0) | (zb <= 0) | ~np.isfinite(cost)] = np.inf
    return cost


def _best_two(costs: dict[tuple, float]):
    ranked = sorted(costs.items(), key=lambda kv: (kv[1], kv[0]))
    best = ranked[0]
    second = ranked[1][1] if len(ranked) > 1 else np.inf
    return best[0], best[1], second


def _score_assignments(cost: np.ndarray) -> dict[tuple, float]:
    """RMS pixel error of each injective assignment of columns (this view) to rows (reference)."""
    n_ref, n_v = cost.shape
    out = {}
    cols = np.arange(n_v)
    for perm in itertools.permutations(range(n_ref), n_v):
        out[perm] = float(np.sqrt(np.mean(cost[list(perm), cols])))
    return out


def match_targets(observations: dict[str, list[Ellipse2D]], board: TargetBoard,
                  views: dict[str, CameraView]) -> dict[str, list[TargetObservation]]:
    """Assign board labels 1..5 to the ellipses of each view.

    The view with the most ellipses is the reference. Every other view is
    matched to it by scoring all injective assignments on two-view
    triangulation reprojection RMS; assignments above 2 px are rejected.
    Views whose best and second-best scores are within 10% are resolved
    against the consensus points of the unambiguous views. The consensus
    points are then labeled against the board by comparing normalized
    inter-center distance matrices over all assignments.
    """
    usable = {vid: obs for vid, obs in observations.items() if vid in views and len(obs) >= 4}
    if len(usable) < 2:
        raise InsufficientViews(f"{len(usable)} view(s) with at least 4 target candidates")
    ref_id = min(usable, key=lambda v: (-len(usable[v]), v))
    ref = usable[ref_id]
    ref_c = np.array([e.center for e in ref])
    if len(ref) > N_TARGETS:
        raise AmbiguousMatch(f"reference view {ref_id} has {len(ref)} candidates")
    assign: dict[str, tuple] = {ref_id: tuple(range(len(ref)))}
    ambiguous: dict[str, np.ndarray] = {}
    for vid in sorted(usable):
        if vid == ref_id:
            continue
        obs = usable[vid]
        if len(obs) > len(ref):
            continue
        centers = np.array([e.center for e in obs])
        cost = _pair_costs(views[ref_id], views[vid], ref_c, centers)
        scores = _score_assignments(cost)
        perm, best, second = _best_two(scores)
        if best > MAX_MATCH_RMS_PX:
            logger.warning("view %s: no assignment below %.1f px (best %.2f); dropped",
                           vid, MAX_MATCH_RMS_PX, best)
            continue
        if second <= AMBIGUITY_RATIO * best:
            ambiguous[vid] = centers
        else:
            assign[vid] = perm
    if len(assign) < 2:
        if ambiguous:
            raise AmbiguousMatch("no view matches the reference unambiguously")
        raise InsufficientViews("fewer than two views could be matched")
    consensus = _consensus(usable, views, assign)
    for vid, centers in ambiguous.items():
        view = views[vid]
        scores = {}
        for perm in itertools.permutations(sorted(consensus), len(centers)):
            x = np.array([consensus[p] for p in perm])
            sq, z = _reproj_sq(view, x, centers)
            scores[perm] = np.inf if np.any(z <= 0) else float(np.sqrt(np.mean(sq / 2.0)))
        perm, best, second = _best_two(scores)
        if best > MAX_MATCH_RMS_PX:
            continue
        if second <= AMBIGUITY_RATIO * best:
            raise AmbiguousMatch(f"view {vid}: assignments {best:.3g} and {second:.3g} px are within 10%")
        assign[vid] = perm
    consensus = _consensus(usable, views, assign)
    labels = label_against_board(consensus, board)
    out: dict[str, list[TargetObservation]] = {}
    for vid in sorted(assign):
        out[vid] = [TargetObservation(vid, usable[vid][k], None, labels[ref_idx])
                    for k, ref_idx in enumerate(assign[vid]) if ref_idx in labels]
    return out


def _consensus(usable, views, assign) -> dict[int, np.ndarray]:
    tracks: dict[int, list] = {}
    for vid, perm in assign.items():
        for k, ref_idx in enumerate(perm):
            tracks.setdefault(ref_idx, []).append((views[vid], usable[vid][k].center))
    out = {}
    for ref_idx, entries in tracks.items():
        if len(entries) >= 2:
            vs = [e[0] for e in entries]
            norm = np.array([_pix_to_norm(v, c) for v, c in entries])
            out[ref_idx] = _dlt(vs, norm[None])[0]
    return out


def label_against_board(points: dict[int, np.ndarray], board: TargetBoard) -> dict[int, int]:
    """Map consensus point ids to 1-based board labels by distance-matrix agreement."""
    ids = sorted(points)
    if len(ids) < 4:
        raise InsufficientViews(f"only {len(ids)} targets triangulated")
    x = np.array([points[i] for i in ids])
    iu, ju = np.triu_indices(len(ids), 1)
    dx = np.linalg.norm(x[iu] - x[ju], axis=1)
    dx = dx / np.sqrt(np.mean(dx ** 2))
    scores = {}
    for perm in itertools.permutations(range(N_TARGETS), len(ids)):
        p = board.centers[list(perm)]
        dp = np.linalg.norm(p[iu] - p[ju], axis=1)
        dp = dp / np.sqrt(np.mean(dp ** 2))
        scores[perm] = float(np.sqrt(np.mean((dx - dp) ** 2)))
    perm, best, second = _best_two(scores)
    if second <= AMBIGUITY_RATIO * best:
        raise AmbiguousMatch(f"board labeling is ambiguous (scores {best:.3g} and {second:.3g})")
    return {i: perm[k] + 1 for k, i in enumerate(ids)}


# ---------------------------------------------------------------- eccentricity

def correct_eccentricity(obs: TargetObservation, view: CameraView, circle_radius_m: float,
                         plane_normal) -> np.ndarray:
    """Image of the true circle center: the pole of the plane's vanishing line w.r.t. the ellipse.

    For a circle on a plane with world normal ``n``, the vanishing line of
    the plane is ``l = K^-T R n`` and the projected circle center is
    ``C^-1 l`` where ``C`` is the image conic. The result is exact for a
    pinhole camera and needs no circle radius; ``circle_radius_m`` only
    feeds the plausibility check. Falls back to the ellipse center (with a
    warning) when the plane estimate is degenerate.
    """
    e = obs.ellipse
    n = None if plane_normal is None else np.asarray(plane_normal, dtype=np.float64)
    if n is None or not np.all(np.isfinite(n)) or np.linalg.norm(n) < 1e-12 or not circle_radius_m > 0:
        logger.warning("view %s: degenerate plane estimate; keeping ellipse center", obs.view_id)
        return e.center.copy()
    line = np.linalg.inv(view.K).T @ (view.rotation @ (n / np.linalg.norm(n)))
    pole = np.linalg.solve(e.conic(), line)
    if abs(pole[2]) < 1e-12 * np.linalg.norm(pole):
        logger.warning("view %s: plane seen edge-on; keeping ellipse center", obs.view_id)
        return e.center.copy()
    c = pole[:2] / pole[2]
    if np.linalg.norm(c - e.center) > 2.0 * e.a:
        logger.warning("view %s: implausible center correction; keeping ellipse center", obs.view_id)
        return e.center.copy()
    return c


def apply_corrections(matched: dict[str, list[TargetObservation]], views: dict[str, CameraView],
                      board: TargetBoard, plane_normal) -> None:
    for vid, obs in matched.items():
        for ob in obs:
            ob.corrected_center = correct_eccentricity(ob, views[vid], board.circle_radius_m, plane_normal)


# ---------------------------------------------------------------- scale

def compute_scale(board_points, triangulated) -> float:
    """Ratio of centroid spreads: sqrt(sum |P - mean P|^2 / sum |Q - mean Q|^2)."""
    p = np.asarray(board_points, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(triangulated, dtype=np.float64).reshape(-1, 3)
    if len(p) != len(q) or len(p) < 2:
        raise DegenerateGeometry("need at least two matched center pairs")
    sp = float(np.sum((p - p.mean(axis=0)) ** 2))
    sq = float(np.sum((q - q.mean(axis=0)) ** 2))
    if sq < 1e-18:
        raise DegenerateGeometry("triangulated centers coincide")
    return float(np.sqrt(sp / sq))


def apply_scale(cloud: PointCloud, s: float) -> PointCloud:
    if cloud.unit_state == UnitState.METRIC:
        raise AlreadyMetric("cloud is already metric")
    if not s > 0:
        raise ValueError("scale must be positive")
    return PointCloud(cloud.points * s, UnitState.METRIC, cloud.colors)


@dataclass
class ScaleResult:
    scale: float
    rms_px: dict[int, float]
    views_used: list[str]
    eccentricity_corrected: bool
    plane_normal: np.ndarray | None = None
    corrections_px: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "s": self.scale,
            "per_target_reprojection_rms_px": {str(k): v for k, v in sorted(self.rms_px.items())},
            "views_used": self.views_used,
            "eccentricity_corrected": self.eccentricity_corrected,
            "target_plane_normal": None if self.plane_normal is None else self.plane_normal.tolist(),
            "center_corrections_px": self.corrections_px,
        }


def scale_from_matches(matched: dict[str, list[TargetObservation]], views: dict[str, CameraView],
                       board: TargetBoard, eccentricity: bool = True) -> ScaleResult:
    """Triangulate matched centers (optionally eccentricity-corrected) and compute the scale."""
    pre = triangulate_centers(matched, views, use_corrected=False)
    normal = None
    if eccentricity:
        try:
            normal = fit_plane(pre.stacked()).normal
        except DegenerateGeometry:
            normal = None
        apply_corrections(matched, views, board, normal)
        tri = triangulate_centers(matched, views, use_corrected=True)
    else:
        for obs in matched.values():
            for ob in obs:
                ob.corrected_center = None
        tri = pre
    labels = sorted(tri.points)
    s = compute_scale(board.centers[np.array(labels) - 1], tri.stacked(labels))
    corr = {vid: [ob.correction_px for ob in obs] for vid, obs in sorted(matched.items())}
    return ScaleResult(s, tri.rms_px, sorted(matched), eccentricity, normal, corr)


def detect_and_match(images: dict[str, np.ndarray], views: dict[str, CameraView],
                     board: TargetBoard) -> dict[str, list[TargetObservation]]:
    """Detect targets in every raster and label them. Views without targets are skipped."""
    detected = {}
    for vid in sorted(images):
        if vid not in views:
            logger.warning("raster %s has no matching view; skipped", vid)
            continue
        try:
            ells = detect_target_ellipses(images[vid])
        except NoTargetsFound:
            logger.warning("view %s: no targets found", vid)
            continue
        if views[vid].intrinsics.distortion:
            ells = [_undistort_ellipse(e, views[vid]) for e in ells]
        detected[vid] = ells
    return match_targets(detected, board, views)


def define_scale(images: dict[str, np.ndarray], views: dict[str, CameraView], board: TargetBoard,
                 eccentricity: bool = True) -> ScaleResult:
    """Full raster-to-scale pipeline."""
    return scale_from_matches(detect_and_match(images, views, board), views, board, eccentricity)


def _undistort_ellipse(e: Ellipse2D, view: CameraView) -> Ellipse2D:
    # Refit the ellipse to its undistorted outline; exact only to first order.
    pts = view.undistort_pixels(e.sample(np.linspace(0, 2 * np.pi, 64, endpoint=False)))
    return fit_ellipse(pts, robust=False)


@dataclass
class SweepRow:
    k: int
    n_ok: int
    n_failed: int
    mean_error_corrected_m: float | None
    mean_error_uncorrected_m: float | None
    std_error_corrected_m: float | None
    std_error_uncorrected_m: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def view_count_sweep(matched: dict[str, list[TargetObservation]], views: dict[str, CameraView],
                     board: TargetBoard, k_values, n_combinations: int = 50, seed: int = 0,
                     noise_px: float = 0.0, reference_radius_m: float = 0.05,
                     true_scale: float = 1.0) -> list[SweepRow]:
    """Radius error of a reference pipe against the number of views used for scale.

    For each ``k``, ``n_combinations`` random view subsets are drawn. Each
    subset gets independent Gaussian noise on its ellipse centers, then the
    scale is computed with and without eccentricity correction. The pipe's
    radius in reconstruction units is ``reference_radius_m / true_scale``;
    the reported error is ``|s * r_arb - r_true|``. Failed subsets are
    counted and skipped.
    """
    ids = sorted(matched)
    k_values = list(k_values)
    if len(ids) < max(k_values):
        raise InsufficientViews(f"{len(ids)} views available, sweep needs {max(k_values)}")
    rng = np.random.Generator(np.random.Philox(seed))
    r_arb = reference_radius_m / true_scale
    rows = []
    for k in k_values:
        errs = {True: [], False: []}
        failed = 0
        for _ in range(n_combinations):
            subset = sorted(rng.choice(len(ids), size=k, replace=False))
            noisy = {}
            for i in subset:
                vid = ids[i]
                noisy[vid] = []
                for ob in matched[vid]:
                    shift = rng.normal(0.0, noise_px, 2) if noise_px > 0 else np.zeros(2)
                    e = Ellipse2D(ob.ellipse.center + shift, ob.ellipse.a, ob.ellipse.b, ob.ellipse.theta)
                    noisy[vid].append(TargetObservation(vid, e, None, ob.target_index))
            try:
                res = {ecc: scale_from_matches(noisy, views, board, ecc).scale for ecc in (True, False)}
            except PipefitError:
                failed += 1
                continue
            for ecc, s in res.items():
                errs[ecc].append(abs(s * r_arb - reference_radius_m))
        rows.append(SweepRow(
            k, len(errs[True]), failed,
            float(np.mean(errs[True])) if errs[True] else None,
            float(np.mean(errs[False])) if errs[False] else None,
            float(np.std(errs[True])) if errs[True] else None,
            float(np.std(errs[False])) if errs[False] else None,
        ))
    return rows
