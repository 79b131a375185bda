"""2D region growing and robust ellipse/circle fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateGeometry, NotAnEllipse
from .robust import fast_median, mad_scale, robust_lm

CIRCLE_TOL = 1e-12


@dataclass
class Ellipse2D:
    """Ellipse with semi-axes ``a >= b > 0`` and major-axis angle in [0, pi)."""

    center: np.ndarray
    a: float
    b: float
    theta: float = 0.0
    rms: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        a, b, theta = float(self.a), float(self.b), float(self.theta)
        if not (a > 0 and b > 0):
            raise NotAnEllipse("semi-axes must be positive")
        if b > a:
            a, b, theta = b, a, theta + np.pi / 2
        if a - b <= CIRCLE_TOL * a:
            theta = 0.0
        self.a, self.b = a, b
        self.theta = float(np.mod(theta, np.pi))

    @property
    def major_dir(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta)])

    @property
    def minor_dir(self) -> np.ndarray:
        return np.array([-np.sin(self.theta), np.cos(self.theta)])

    def sample(self, t) -> np.ndarray:
        """Points at eccentric anomaly ``t`` (radians)."""
        t = np.asarray(t, dtype=np.float64)
        local = np.stack([self.a * np.cos(t), self.b * np.sin(t)], axis=-1)
        c, s = np.cos(self.theta), np.sin(self.theta)
        return local @ np.array([[c, s], [-s, c]]) + self.center

    def conic(self) -> np.ndarray:
        """Symmetric 3x3 matrix ``Q`` with ``x^T Q x = 0`` on the ellipse (negative inside)."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        m = rot @ np.diag([1.0 / self.a ** 2, 1.0 / self.b ** 2]) @ rot.T
        x0 = self.center
        q = np.empty((3, 3))
        q[:2, :2] = m
        q[:2, 2] = q[2, :2] = -m @ x0
        q[2, 2] = x0 @ m @ x0 - 1.0
        return q

    @classmethod
    def from_conic(cls, q: np.ndarray) -> "Ellipse2D":
        q = 0.5 * (np.asarray(q, dtype=np.float64) + np.asarray(q, dtype=np.float64).T)
        m = q[:2, :2]
        try:
            center = np.linalg.solve(m, -q[:2, 2])
        except np.linalg.LinAlgError as exc:
            raise NotAnEllipse("conic has no center") from exc
        f0 = q[2, 2] + q[2, :2] @ center
        evals, evecs = np.linalg.eigh(m)
        if evals[0] * evals[1] <= 0 or f0 * evals[0] >= 0:
            raise NotAnEllipse("conic is not a real ellipse")
        axes = np.sqrt(-f0 / evals)
        # eigh sorts ascending by signed value; the major axis has the smallest |lambda|.
        i_major = int(np.argmax(axes))
        v = evecs[:, i_major]
        return cls(center, axes[i_major], axes[1 - i_major], float(np.arctan2(v[1], v[0])))

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "a": self.a, "b": self.b,
                "theta": self.theta, "rms": self.rms}


@dataclass
class Segment2D:
    indices: np.ndarray
    bbox: tuple[float, float, float, float]

    @property
    def count(self) -> int:
        return int(len(self.indices))


def connected_components_2d(points2d, cell_size: float, min_points: int = 1) -> list[Segment2D]:
    """Group 2D points whose occupancy-grid cells touch (8-connectivity).

    Segments are returned ordered by their lowest point index. Segments with
    fewer than ``min_points`` members are dropped; with the default of 1 the
    output partitions the input.
    """
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return []
    cells = np.floor((pts - pts.min(axis=0)) / cell_size).astype(np.int64)
    width = int(cells[:, 1].max()) + 3
    keys = (cells[:, 0] + 1) * width + (cells[:, 1] + 1)
    ukeys, inverse = np.unique(keys, return_inverse=True)
    rows, cols = [], []
    for di, dj in ((1, -1), (1, 0), (1, 1), (0, 1)):
        probe = ukeys + di * width + dj
        pos = np.searchsorted(ukeys, probe)
        pos_c = np.minimum(pos, len(ukeys) - 1)
        hit = ukeys[pos_c] == probe
        rows.append(np.nonzero(hit)[0])
        cols.append(pos_c[hit])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ukeys), len(ukeys)))
    _, cell_label = connected_components(graph, directed=False)
    labels = cell_label[inverse.ravel()]
    order = np.argsort(labels, kind="stable")
    splits = np.nonzero(np.diff(labels[order]))[0] + 1
    segments = []
    for idx in np.split(order, splits):
        if len(idx) < min_points:
            continue
        p = pts[idx]
        lo, hi = p.min(axis=0), p.max(axis=0)
        segments.append(Segment2D(np.sort(idx), (lo[0], lo[1], hi[0], hi[1])))
    segments.sort(key=lambda s: int(s.indices[0]))
    return segments


def _normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    mean = pts.mean(axis=0)
    scale = float(np.sqrt(np.mean(np.sum((pts - mean) ** 2, axis=1))))
    if scale == 0.0:
        raise DegenerateGeometry("all points coincide")
    return (pts - mean) / scale, mean, scale


def direct_ellipse_fit(points2d) -> Ellipse2D:
    """Ellipse-specific algebraic least squares (numerically stable form).

    Coordinates are centered and scaled before building the scatter
    matrices; the conic is the generalized eigenvector satisfying
    ``4AC - B^2 > 0``.
    """
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 5:
        raise DegenerateGeometry("ellipse fit needs at least 5 points")
    p, mean, scale = _normalize(pts)
    x, y = p[:, 0], p[:, 1]
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    sv = np.linalg.svd(d2, compute_uv=False)
    if sv[-1] < 1e-10 * sv[0]:
        raise DegenerateGeometry("points are collinear")
    t = -np.linalg.solve(s3, s2.T)
    m = s1 + s2 @ t
    m = np.vstack([m[2] / 2.0, -m[1], m[0] / 2.0])
    evals, evecs = np.linalg.eig(m)
    evals, evecs = evals.real, evecs.real
    cond = 4.0 * evecs[0] * evecs[2] - evecs[1] ** 2
    ok = np.nonzero(cond > 0)[0]
    if len(ok) == 0:
        raise NotAnEllipse("no ellipse-constrained solution")
    k = ok[np.argmin(np.abs(evals[ok]))]
    a1 = evecs[:, k]
    a2 = t @ a1
    A, B, C = a1
    D, E, F = a2
    q = np.array([[A, B / 2, D / 2], [B / 2, C, E / 2], [D / 2, E / 2, F]])
    e = Ellipse2D.from_conic(q)
    return Ellipse2D(mean + scale * e.center, scale * e.a, scale * e.b, e.theta)


def ellipse_distance(points2d, center, a, b, theta, with_jacobian: bool = False):
    """Signed orthogonal distance (positive outside) from points to an ellipse.

    Foot points are found by monotone Newton iteration on the secular
    equation of the closest-point problem. With ``with_jacobian`` the
    derivative of the distance with respect to ``(cx, cy, a, b, theta)`` is
    returned too (foot parameter held fixed at the optimum).
    """
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    c, s = np.cos(theta), np.sin(theta)
    rel = pts - center
    u = rel[:, 0] * c + rel[:, 1] * s
    v = -rel[:, 0] * s + rel[:, 1] * c
    # Work in the first quadrant with e0 >= e1.
    swap = b > a
    e0, e1 = (b, a) if swap else (a, b)
    y0, y1 = (np.abs(v), np.abs(u)) if swap else (np.abs(u), np.abs(v))
    x0 = np.empty_like(y0)
    x1 = np.empty_like(y1)

    gen = (y1 > 0) & (y0 > 0)
    if np.any(gen):
        z0 = y0[gen] / e0
        z1 = y1[gen] / e1
        r0 = (e0 / e1) ** 2
        n0 = r0 * z0
        s_lo = np.maximum(z1 - 1.0, n0 - r0)
        # One Newton step from s=0 lands left of the root (F is convex and
        # decreasing); from there the iteration is monotone.
        g0 = z0 * z0 + z1 * z1 - 1.0
        dg0 = -2.0 * (n0 * n0 / r0 ** 3 + z1 * z1)
        sv = np.maximum(s_lo, -g0 / dg0)
        for _ in range(60):
            t0 = n0 / (sv + r0)
            t1 = z1 / (sv + 1.0)
            f = t0 * t0 + t1 * t1 - 1.0
            df = -2.0 * (t0 * t0 / (sv + r0) + t1 * t1 / (sv + 1.0))
            step = f / df
            sv = np.maximum(sv - step, s_lo)
            if np.all(np.abs(step) <= 1e-11 * np.maximum(1.0, np.abs(sv))):
                break
        x0[gen] = r0 * y0[gen] / (sv + r0)
        x1[gen] = y1[gen] / (sv + 1.0)
    on_minor = (y0 == 0) & (y1 > 0)
    x0[on_minor] = 0.0
    x1[on_minor] = e1
    on_major = y1 == 0
    if np.any(on_major):
        denom = e0 * e0 - e1 * e1
        numer = e0 * y0[on_major]
        inner = numer < denom
        xde = np.where(inner, numer / denom if denom > 0 else 0.0, 1.0)
        x0[on_major] = np.where(inner, e0 * xde, e0)
        x1[on_major] = np.where(inner, e1 * np.sqrt(np.maximum(0.0, 1 - xde * xde)), 0.0)

    dist = np.hypot(x0 - y0, x1 - y1)
    outside = (y0 / e0) ** 2 + (y1 / e1) ** 2 > 1.0
    signed = np.where(outside, dist, -dist)
    if not with_jacobian:
        return signed

    # Undo the quadrant fold and axis swap to get the foot in ellipse-local (u, v).
    fx0 = np.copysign(x0, v if swap else u)
    fx1 = np.copysign(x1, u if swap else v)
    fu, fv = (fx1, fx0) if swap else (fx0, fx1)
    nu, nv = fu / (a * a), fv / (b * b)
    nn = np.hypot(nu, nv)
    nu, nv = nu / nn, nv / nn
    cos_t, sin_t = fu / a, fv / b
    jac = np.empty((len(pts), 5))
    jac[:, 0] = -(nu * c - nv * s)
    jac[:, 1] = -(nu * s + nv * c)
    jac[:, 2] = -nu * cos_t
    jac[:, 3] = -nv * sin_t
    jac[:, 4] = nu * b * sin_t - nv * a * cos_t
    return signed, jac


def fit_ellipse(points2d, refine: bool = True, robust: bool = True, max_iter: int = 50,
                ftol: float = 1e-9) -> Ellipse2D:
    """Fit an ellipse to 2D points.

    A direct algebraic fit seeds a Levenberg-Marquardt refinement of the
    orthogonal distances with Huber weights (MAD scale). ``rms`` on the
    result is the RMS orthogonal residual.
    """
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 6:
        raise DegenerateGeometry("ellipse fit needs at least 6 points")
    init = direct_ellipse_fit(pts)
    if not refine:
        init.rms = float(np.sqrt(np.mean(ellipse_distance(pts, init.center, init.a, init.b, init.theta) ** 2)))
        return init

    # Refine in normalized coordinates for conditioning.
    _, mean, scale = _normalize(pts)
    p = (pts - mean) / scale
    x0 = np.array([*(init.center - mean) / scale, init.a / scale, init.b / scale, init.theta])

    def fun(x):
        return ellipse_distance(p, x[:2], x[2], x[3], x[4], with_jacobian=True)

    def update(x, delta):
        y = x + delta
        if y[2] <= 0 or y[3] <= 0:
            return np.full(5, np.nan)
        return y

    def safe_fun(x):
        if np.any(np.isnan(x)):
            return np.full(len(p), np.nan), np.zeros((len(p), 5))
        # Wild trial steps can overflow; the LM rejects non-finite costs.
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fun(x)

    res = robust_lm(safe_fun, x0, update, max_iter=max_iter, robust=robust, min_scale=1e-12, ftol=ftol)
    x = res.state
    out = Ellipse2D(mean + scale * x[:2], scale * abs(x[2]), scale * abs(x[3]), x[4])
    out.rms = float(scale * np.sqrt(np.mean(res.residuals ** 2)))
    return out


@dataclass
class CircleFit:
    center: np.ndarray
    radius: float
    residuals: np.ndarray
    scale: float

    def inlier_rmse(self, k: float = 3.0) -> float:
        r = self.residuals
        sigma = mad_scale(r)
        inl = np.abs(r - fast_median(r)) <= k * sigma if sigma > 0 else np.ones(len(r), bool)
        return float(np.sqrt(np.mean(r[inl] ** 2)))


def fit_circle(points2d, initial: tuple | None = None, robust: bool = True,
               max_iter: int = 100, scale_iters: int = 10) -> CircleFit:
    """Robust geometric circle fit.

    Starts from ``initial = (center, radius)`` when given, otherwise from the
    algebraic (Kasa) solution.
    """
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateGeometry("circle fit needs at least 3 points")
    p, mean, scale = _normalize(pts)
    if initial is None:
        a = np.column_stack([p, np.ones(len(p))])
        rhs = np.sum(p * p, axis=1)
        sol, *_ = np.linalg.lstsq(a, rhs, rcond=None)
        c0 = sol[:2] / 2
        r0 = np.sqrt(max(sol[2] + c0 @ c0, 1e-12))
    else:
        c0 = (np.asarray(initial[0], dtype=np.float64) - mean) / scale
        r0 = float(initial[1]) / scale

    def fun(x):
        d = p - x[:2]
        rho = np.hypot(d[:, 0], d[:, 1])
        rho = np.where(rho == 0, 1e-300, rho)
        jac = np.column_stack([-d[:, 0] / rho, -d[:, 1] / rho, -np.ones(len(p))])
        return rho - x[2], jac

    res = robust_lm(fun, np.array([*c0, r0]), max_iter=max_iter, robust=robust, min_scale=1e-12,
                    ftol=1e-9, scale_iters=scale_iters)
    x = res.state
    return CircleFit(mean + scale * x[:2], float(scale * abs(x[2])), scale * res.residuals, scale * res.scale)


@dataclass
class EllipseValidation:
    accepted: bool
    reason: str
    inlier_ratio: float


@dataclass
class EllipseGate:
    """Acceptance gates for candidate section ellipses."""

    min_radius_m: float = 0.0043
    max_radius_m: float = 0.2446
    min_inlier_ratio: float = 0.5
    max_eccentricity: float = 4.0
    inlier_tol_m: float = 0.006
    slab_half_thickness_m: float = 0.01

    @classmethod
    def from_class_radii(cls, radii, **kwargs) -> "EllipseGate":
        radii = np.asarray(radii, dtype=np.float64)
        return cls(min_radius_m=radii.min() / 2, max_radius_m=2 * radii.max(), **kwargs)


def validate_ellipse(e: Ellipse2D, points2d, gate: EllipseGate) -> EllipseValidation:
    """Accept or reject a fitted section ellipse.

    Inliers lie within ``inlier_tol_m`` of the ellipse, widened by the
    along-axis smear a tilted cylinder produces inside the slab.
    """
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if not gate.min_radius_m <= e.b <= gate.max_radius_m:
        return EllipseValidation(False, "out-of-range", 0.0)
    if e.a / e.b > gate.max_eccentricity:
        return EllipseValidation(False, "eccentricity", 0.0)
    tan_delta = np.sqrt(max(e.a * e.a - e.b * e.b, 0.0)) / e.b
    tol = max(gate.inlier_tol_m, gate.slab_half_thickness_m * tan_delta)
    dist = ellipse_distance(pts, e.center, e.a, e.b, e.theta)
    ratio = float(np.mean(np.abs(dist) <= tol)) if len(pts) else 0.0
    if ratio < gate.min_inlier_ratio:
        return EllipseValidation(False, "low-support", ratio)
    return EllipseValidation(True, "ok", ratio)
