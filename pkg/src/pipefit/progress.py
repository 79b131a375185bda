"""Pipe classification by planned radius, accuracy metrics, and progress reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import ConfigError, ZeroTruth
from .geometry import PointCloud, SimilarityTransform, absolute_orientation, point_line_distance
from .io import read_csv_rows, read_json, rows_to_csv

KMEANS_MAX_ITER = 100
CLOUD_CUTOFF_M = 0.10


@dataclass(frozen=True)
class PipeClass:
    class_id: int
    label: str
    outer_radius_m: float
    material: str = ""


@dataclass
class PipeClassTable:
    classes: list[PipeClass]

    def __post_init__(self):
        if not self.classes:
            raise ConfigError("class table is empty")
        radii = [c.outer_radius_m for c in self.classes]
        if any(r <= 0 for r in radii):
            raise ConfigError("class radii must be positive")
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ConfigError("class radii must be strictly increasing")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConfigError("class ids must be unique")

    @property
    def radii(self) -> np.ndarray:
        return np.array([c.outer_radius_m for c in self.classes])

    @property
    def ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    def by_id(self, class_id: int) -> PipeClass:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(class_id)

    @classmethod
    def from_radii_mm(cls, radii_mm, labels=None) -> "PipeClassTable":
        labels = labels or [f"R{r:g}" for r in radii_mm]
        return cls([PipeClass(i + 1, lab, r / 1000.0) for i, (r, lab) in enumerate(zip(radii_mm, labels))])

    @classmethod
    def from_dict(cls, d: dict) -> "PipeClassTable":
        try:
            rows = d["classes"]
            classes = [PipeClass(int(c["id"]), str(c.get("label", c["id"])), float(c["outer_radius_mm"]) / 1000.0,
                                 str(c.get("material", ""))) for c in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed class table: {exc}") from exc
        return cls(sorted(classes, key=lambda c: c.outer_radius_m))

    @classmethod
    def load(cls, path) -> "PipeClassTable":
        return cls.from_dict(read_json(path))

    def to_dict(self) -> dict:
        return {"classes": [{"id": c.class_id, "label": c.label, "outer_radius_mm": c.outer_radius_m * 1000.0,
                             "material": c.material} for c in self.classes]}


def _nearest(values: np.ndarray, means: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. the smaller class on ties
    return np.argmin(np.abs(values[:, None] - means[None, :]), axis=1)


def kmeans_1d(values, seeds, max_iter: int = KMEANS_MAX_ITER) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations on scalars from fixed seeds; empty clusters keep their mean.

    Returns (cluster index per value, final means).
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    means = np.asarray(seeds, dtype=np.float64).copy()
    labels = _nearest(x, means)
    for _ in range(max_iter):
        for k in range(len(means)):
            members = x[labels == k]
            if len(members):
                means[k] = members.mean()
        new = _nearest(x, means)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, means


def classify_kmeans(radii, table: PipeClassTable) -> list[int]:
    """Class id per estimated radius, with k-means seeded at the planned radii."""
    x = np.asarray(radii, dtype=np.float64).ravel()
    if len(x) == 0:
        return []
    idx, _ = kmeans_1d(x, table.radii)
    ids = table.ids
    return [ids[i] for i in idx]


def radius_rmse(estimated, truth) -> float:
    """Root mean squared difference between estimated and true radii."""
    e = np.asarray(estimated, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if len(e) != len(t) or len(e) == 0:
        raise ValueError("need equally sized, non-empty inputs")
    return float(np.sqrt(np.mean((e - t) ** 2)))


def length_percent_error(estimated: float, truth: float) -> float:
    """Relative length error in percent."""
    if not truth > 0:
        raise ZeroTruth("true length must be positive")
    return abs(1.0 - estimated / truth) * 100.0


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def detection_quality(tp: int, fp: int, fn: int, tn: int | None = None) -> dict[str, float | None]:
    """Precision, recall, accuracy and F-measure; undefined values are None.

    Accuracy needs the true-negative count and is None without it.
    """
    if min(tp, fp, fn, 0 if tn is None else tn) < 0:
        raise ValueError("counts must be non-negative")
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f = None if p is None or r is None or p + r == 0 else 2 * p * r / (p + r)
    acc = None if tn is None else _ratio(tp + tn, tp + tn + fp + fn)
    return {"precision": p, "recall": r, "accuracy": acc, "f_measure": f}


@dataclass
class CloudAccuracy:
    mean_m: float
    rmse_m: float
    n_used: int
    n_total: int
    transform: SimilarityTransform | None

    def to_dict(self) -> dict:
        d = {"mean_m": self.mean_m, "rmse_m": self.rmse_m, "n_used": self.n_used, "n_total": self.n_total}
        if self.transform is not None:
            d["scale"] = self.transform.scale
            d["rotation"] = self.transform.rotation.tolist()
            d["translation"] = self.transform.translation.tolist()
        return d


def cloud_accuracy(source: PointCloud | np.ndarray, reference: PointCloud | np.ndarray,
                   correspondences: tuple[np.ndarray, np.ndarray] | None = None,
                   cutoff: float = CLOUD_CUTOFF_M, subset=None, register: bool = True) -> CloudAccuracy:
    """Distances from source points to their nearest reference points.

    With ``correspondences`` (source points, reference points) the source is
    first registered by a closed-form similarity. Distances above
    ``cutoff`` are dropped. ``subset`` restricts evaluation to fixed source
    indices so different clouds can be compared on the same region.
    """
    src = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    ref = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, dtype=np.float64)
    tf = None
    if register and correspondences is not None:
        tf = absolute_orientation(correspondences[0], correspondences[1], with_scale=True)
        src = tf.apply(src)
    if subset is not None:
        src = src[np.asarray(subset)]
    dist, _ = cKDTree(ref).query(src, k=1)
    keep = dist <= cutoff
    d = dist[keep]
    if len(d) == 0:
        return CloudAccuracy(float("nan"), float("nan"), 0, len(src), tf)
    return CloudAccuracy(float(d.mean()), float(np.sqrt(np.mean(d * d))), int(len(d)), len(src), tf)


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class GroundTruthEntry:
    pipe_id: str
    radius_m: float
    length_m: float
    class_id: int
    position: tuple[float, float, float] | None = None  # any point on the pipe axis

    def __post_init__(self):
        if not (self.radius_m > 0 and self.length_m > 0):
            raise ConfigError(f"ground truth {self.pipe_id}: values must be positive")


def read_ground_truth(path) -> list[GroundTruthEntry]:
    """Rows of ``pipe_id,true_radius_mm,true_length_m,class_id``.

    Optional ``x_m,y_m,z_m`` columns give a point on each pipe axis, used to
    pair detections with truth pipes of the same class.
    """
    out = []
    for i, row in enumerate(read_csv_rows(path), 2):
        try:
            pos = None
            if row.get("x_m") not in (None, ""):
                pos = (float(row["x_m"]), float(row["y_m"]), float(row["z_m"]))
            out.append(GroundTruthEntry(row["pipe_id"], float(row["true_radius_mm"]) / 1000.0,
                                        float(row["true_length_m"]), int(row["class_id"]), pos))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{i}: malformed ground truth row ({exc})") from exc
    return out


@dataclass
class ClassifiedPipe:
    pipe_id: str
    radius_m: float
    length_m: float
    class_id: int
    residual_m: float
    axis: np.ndarray | None = None
    axis_point: np.ndarray | None = None


@dataclass
class ClassRow:
    class_id: int
    label: str
    planned_radius_mm: float
    detected: int = 0
    total_length_m: float = 0.0
    mean_radius_mm: float | None = None
    truth_count: int | None = None
    tp: int | None = None
    fp: int | None = None
    fn: int | None = None
    mean_radius_error_mm: float | None = None
    radius_rmse_mm: float | None = None
    mean_length_error_pct: float | None = None

    FIELDS = ("class_id", "label", "planned_radius_mm", "detected", "total_length_m", "mean_radius_mm",
              "truth_count", "tp", "fp", "fn", "mean_radius_error_mm", "radius_rmse_mm",
              "mean_length_error_pct")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class ProgressReport:
    classes: list[ClassRow]
    pipes: list[ClassifiedPipe]
    overall: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "classes": [c.to_dict() for c in self.classes],
            "pipes": [{"pipe_id": p.pipe_id, "radius_m": p.radius_m, "length_m": p.length_m,
                       "class_id": p.class_id, "residual_m": p.residual_m} for p in self.pipes],
            "overall": self.overall,
            "metadata": self.metadata,
        }

    def to_csv(self) -> str:
        return rows_to_csv(list(ClassRow.FIELDS), [[getattr(c, k) for k in ClassRow.FIELDS] for c in self.classes])


def _pipe_values(p) -> tuple[str, float, float, np.ndarray | None, np.ndarray | None]:
    if isinstance(p, dict):
        axis = np.asarray(p["axis"], dtype=np.float64) if "axis" in p else None
        point = np.asarray(p["axis_point_m"], dtype=np.float64) if "axis_point_m" in p else None
        return (str(p.get("id", p.get("pipe_id", ""))), float(p["radius_m"]), float(p.get("length_m", 0.0)),
                axis, point)
    return str(getattr(p, "pipe_id", "")), float(p.radius), float(p.length), p.axis, p.axis_point


def pair_within_class(members: list[ClassifiedPipe], truth: list[GroundTruthEntry]):
    """Matched (detection, truth) pairs; ``min(len)`` of them.

    Uses a minimum-cost assignment on axis distance when every truth entry
    has a position and every detection an axis, and otherwise pairs by
    sorted radius.
    """
    n = min(len(members), len(truth))
    if n == 0:
        return []
    located = all(g.position is not None for g in truth) and all(p.axis is not None for p in members)
    if not located:
        ms = sorted(members, key=lambda p: p.radius_m)
        gs = sorted(truth, key=lambda g: g.radius_m)
        return list(zip(ms[:n], gs[:n]))
    pos = np.array([g.position for g in truth])
    cost = np.array([point_line_distance(pos, p.axis_point, p.axis) for p in members])
    rows, cols = linear_sum_assignment(cost)
    return [(members[i], truth[j]) for i, j in zip(rows, cols)]


def build_report(pipes, table: PipeClassTable, truth: list[GroundTruthEntry] | None = None,
                 tn: int | None = None, metadata: dict | None = None) -> ProgressReport:
    """Per-class counts and lengths, with error metrics when ground truth is given.

    Detections and truth pipes are matched by count within each class:
    ``min(detected, truth)`` true positives, the surplus on either side as
    false positives or negatives. Pairs come from ``pair_within_class``.
    """
    vals = [_pipe_values(p) for p in pipes]
    ids = classify_kmeans([v[1] for v in vals], table) if vals else []
    classified = []
    for i, ((pid, r, length, axis, point), cid) in enumerate(zip(vals, ids)):
        classified.append(ClassifiedPipe(pid or f"p{i:04d}", r, length, cid,
                                         r - table.by_id(cid).outer_radius_m, axis, point))

    rows = []
    tot_tp = tot_fp = tot_fn = 0
    all_est, all_true, all_len_err = [], [], []
    for c in table.classes:
        members = sorted((p for p in classified if p.class_id == c.class_id), key=lambda p: p.radius_m)
        row = ClassRow(c.class_id, c.label, c.outer_radius_m * 1000.0, len(members),
                       float(sum(p.length_m for p in members)))
        if members:
            row.mean_radius_mm = float(np.mean([p.radius_m for p in members]) * 1000.0)
        if truth is not None:
            gts = [g for g in truth if g.class_id == c.class_id]
            pairs = pair_within_class(members, gts)
            tp = len(pairs)
            row.truth_count, row.tp, row.fp, row.fn = len(gts), tp, len(members) - tp, len(gts) - tp
            tot_tp, tot_fp, tot_fn = tot_tp + tp, tot_fp + row.fp, tot_fn + row.fn
            if tp:
                est = np.array([p.radius_m for p, _ in pairs])
                tru = np.array([g.radius_m for _, g in pairs])
                len_err = [length_percent_error(p.length_m, g.length_m) for p, g in pairs]
                row.mean_radius_error_mm = float(np.mean(est - tru) * 1000.0)
                row.radius_rmse_mm = radius_rmse(est, tru) * 1000.0
                row.mean_length_error_pct = float(np.mean(len_err))
                all_est.extend(est)
                all_true.extend(tru)
                all_len_err.extend(len_err)
        rows.append(row)

    overall: dict = {"detected": len(classified), "total_length_m": float(sum(p.length_m for p in classified))}
    if truth is not None:
        overall.update({"tp": tot_tp, "fp": tot_fp, "fn": tot_fn, "tn": tn})
        overall.update(detection_quality(tot_tp, tot_fp, tot_fn, tn))
        overall["radius_rmse_mm"] = radius_rmse(all_est, all_true) * 1000.0 if all_est else None
        overall["mean_length_error_pct"] = float(np.mean(all_len_err)) if all_len_err else None
    return ProgressReport(rows, classified, overall, dict(metadata or {}))
