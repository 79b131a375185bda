"""File formats: PLY clouds, PGM rasters, sparse-model bundles, JSON and CSV outputs."""

from __future__ import annotations

import csv
import io as _io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from .camera import CameraView, Intrinsics, matrix_to_quat, quat_to_matrix
from .errors import ConfigError
from .geometry import PointCloud, UnitState

VIEWS_FILE = "views.txt"
INTRINSICS_FILE = "intrinsics.txt"
POINTS_FILE = "points.txt"
KEYPOINTS_FILE = "keypoints.txt"
FRAMES_FILE = "frames.txt"
MATCHES_FILE = "matches.txt"


# ---------------------------------------------------------------- PLY

def read_ply(path, unit_state: UnitState | str | None = None) -> PointCloud:
    """Read x, y, z (and red, green, blue when present) from a PLY file.

    The unit state comes from a ``comment unit_state metric`` header line
    unless given explicitly; it defaults to arbitrary.
    """
    ply = PlyData.read(str(path))
    if "vertex" not in ply:
        raise ConfigError(f"{path}: no vertex element")
    v = ply["vertex"].data
    names = v.dtype.names
    for axis in "xyz":
        if axis not in names:
            raise ConfigError(f"{path}: vertex element lacks '{axis}'")
    pts = np.column_stack([np.asarray(v[a], dtype=np.float64) for a in "xyz"])
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.column_stack([np.asarray(v[c]) for c in ("red", "green", "blue")]).astype(np.uint8)
    if unit_state is None:
        unit_state = UnitState.ARBITRARY
        for c in ply.comments:
            parts = c.split()
            if len(parts) == 2 and parts[0] == "unit_state":
                unit_state = UnitState(parts[1])
    return PointCloud(pts, unit_state, colors)


def write_ply(path, cloud: PointCloud, binary: bool = True, comments: list[str] | None = None) -> None:
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.empty(len(cloud), dtype=fields)
    for i, a in enumerate("xyz"):
        arr[a] = cloud.points[:, i]
    if cloud.colors is not None:
        for i, c in enumerate(("red", "green", "blue")):
            arr[c] = cloud.colors[:, i]
    all_comments = [f"unit_state {cloud.unit_state.value}"] + list(comments or [])
    PlyData([PlyElement.describe(arr, "vertex")], text=not binary,
            comments=all_comments).write(str(path))


# ---------------------------------------------------------------- PGM

def read_pgm(path) -> np.ndarray:
    """Read an 8-bit grayscale raster."""
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "1"):
            img = img.convert("L")
        return np.asarray(img.convert("L"), dtype=np.uint8).copy()


def write_pgm(path, image: np.ndarray) -> None:
    """Write a binary (P5) 8-bit PGM."""
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(str(path), format="PPM")


# ---------------------------------------------------------------- bundle

def _lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


@dataclass
class Track:
    xyz: np.ndarray
    observations: list[tuple[str, int]]


@dataclass
class Bundle:
    """Sparse reconstruction: camera views, 3D tracks, and optional frame metadata."""

    views: dict[str, CameraView] = field(default_factory=dict)
    points: dict[str, Track] = field(default_factory=dict)
    keypoints: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    timestamps: dict[str, float] = field(default_factory=dict)
    matches: dict[tuple[str, str], int] | None = None

    def tie_keypoints(self) -> dict[str, set[int]]:
        """Keypoint indices per view that take part in a 3D track."""
        out: dict[str, set[int]] = {v: set() for v in self.views}
        for track in self.points.values():
            for view_id, kp in track.observations:
                out.setdefault(view_id, set()).add(kp)
        return out

    def covisibility(self) -> dict[tuple[str, str], int]:
        """Number of tracks shared by each unordered view pair."""
        counts: dict[tuple[str, str], int] = {}
        for track in self.points.values():
            ids = sorted({v for v, _ in track.observations})
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    counts[(ids[i], ids[j])] = counts.get((ids[i], ids[j]), 0) + 1
        return counts


def read_bundle(directory) -> Bundle:
    """Parse a bundle directory. Keypoint, frame and match files are optional."""
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"bundle directory not found: {d}")
    intr: dict[str, Intrinsics] = {}
    for lineno, tok in _lines(d / INTRINSICS_FILE):
        if len(tok) < 5:
            raise ConfigError(f"{INTRINSICS_FILE}:{lineno}: expected id model f cx cy [k...]")
        intr[tok[0]] = Intrinsics(tok[0], float(tok[2]), float(tok[3]), float(tok[4]),
                                  tuple(float(t) for t in tok[5:]), tok[1])
    b = Bundle()
    for lineno, tok in _lines(d / VIEWS_FILE):
        if len(tok) != 9:
            raise ConfigError(f"{VIEWS_FILE}:{lineno}: expected id qw qx qy qz px py pz intrinsics_id")
        if tok[8] not in intr:
            raise ConfigError(f"{VIEWS_FILE}:{lineno}: unknown intrinsics id {tok[8]}")
        q = [float(t) for t in tok[1:5]]
        b.views[tok[0]] = CameraView(tok[0], quat_to_matrix(q), [float(t) for t in tok[5:8]], intr[tok[8]])
    pts_path = d / POINTS_FILE
    if pts_path.exists():
        for lineno, tok in _lines(pts_path):
            if len(tok) < 4 or (len(tok) - 4) % 2:
                raise ConfigError(f"{POINTS_FILE}:{lineno}: expected id x y z (view kp)*")
            obs = [(tok[i], int(tok[i + 1])) for i in range(4, len(tok), 2)]
            b.points[tok[0]] = Track(np.array([float(t) for t in tok[1:4]]), obs)
    kp_path = d / KEYPOINTS_FILE
    if kp_path.exists():
        for lineno, tok in _lines(kp_path):
            if len(tok) != 4:
                raise ConfigError(f"{KEYPOINTS_FILE}:{lineno}: expected view kp x y")
            b.keypoints.setdefault(tok[0], {})[int(tok[1])] = np.array([float(tok[2]), float(tok[3])])
    fr_path = d / FRAMES_FILE
    if fr_path.exists():
        for lineno, tok in _lines(fr_path):
            if len(tok) != 2:
                raise ConfigError(f"{FRAMES_FILE}:{lineno}: expected view timestamp")
            b.timestamps[tok[0]] = float(tok[1])
    m_path = d / MATCHES_FILE
    if m_path.exists():
        b.matches = {}
        for lineno, tok in _lines(m_path):
            if len(tok) != 3:
                raise ConfigError(f"{MATCHES_FILE}:{lineno}: expected view_a view_b count")
            a, c = sorted(tok[:2])
            b.matches[(a, c)] = int(tok[2])
    return b


def _num(x) -> str:
    return repr(float(x))


def write_bundle(directory, bundle: Bundle) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    intr: dict[str, Intrinsics] = {}
    with open(d / VIEWS_FILE, "w", encoding="utf-8") as fh:
        fh.write("# view_id qw qx qy qz px py pz intrinsics_id\n")
        for vid, v in bundle.views.items():
            intr[v.intrinsics.intrinsics_id] = v.intrinsics
            q = matrix_to_quat(v.rotation)
            fh.write(" ".join([vid, *(_num(x) for x in q), *(_num(x) for x in v.center),
                               v.intrinsics.intrinsics_id]) + "\n")
    with open(d / INTRINSICS_FILE, "w", encoding="utf-8") as fh:
        fh.write("# id model f cx cy [k1 k2]\n")
        for i in intr.values():
            fh.write(" ".join([i.intrinsics_id, i.model, _num(i.focal_px), _num(i.cx), _num(i.cy),
                               *(_num(k) for k in i.distortion)]) + "\n")
    with open(d / POINTS_FILE, "w", encoding="utf-8") as fh:
        fh.write("# point_id x y z (view_id kp_idx)*\n")
        for pid, t in bundle.points.items():
            obs = " ".join(f"{v} {k}" for v, k in t.observations)
            fh.write(f"{pid} {_num(t.xyz[0])} {_num(t.xyz[1])} {_num(t.xyz[2])} {obs}\n")
    if bundle.keypoints:
        with open(d / KEYPOINTS_FILE, "w", encoding="utf-8") as fh:
            fh.write("# view_id kp_idx x y\n")
            for vid, kps in bundle.keypoints.items():
                for k in sorted(kps):
                    fh.write(f"{vid} {k} {_num(kps[k][0])} {_num(kps[k][1])}\n")
    if bundle.timestamps:
        with open(d / FRAMES_FILE, "w", encoding="utf-8") as fh:
            fh.write("# view_id timestamp_s\n")
            for vid, t in bundle.timestamps.items():
                fh.write(f"{vid} {_num(t)}\n")
    if bundle.matches is not None:
        with open(d / MATCHES_FILE, "w", encoding="utf-8") as fh:
            fh.write("# view_a view_b count\n")
            for (a, c), n in sorted(bundle.matches.items()):
                fh.write(f"{a} {c} {n}\n")


# ---------------------------------------------------------------- JSON / CSV

def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps_json(obj) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True, default=_default, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    text = dumps_json(obj)
    if str(path) == "-":
        print(text, end="")
        return
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def rows_to_csv(header: list[str], rows: list[list]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def read_csv_rows(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
