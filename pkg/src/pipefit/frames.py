"""Video frame selection driven by per-image network overlap.

A frame's overlap is the convex-hull area of its tie points (features that
made it into the sparse model) over the hull area of all its features.
Each planning round adds a frame next to every under-covered frame and
thins long runs of over-covered frames, until every frame sits inside the
target band.
"""

from __future__ import annotations

import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    BackendFailure,
    BandUnreachable,
    ConfigError,
    DegenerateGeometry,
    PipefitError,
    Unregistered,
)
from .geometry import convex_hull_area
from .io import Bundle, read_bundle

logger = logging.getLogger(__name__)

DEFAULT_BAND_WIDTH = 0.025
MIN_REMOVAL_RUN = 4


@dataclass
class FrameRecord:
    frame_id: str
    timestamp: float
    features: np.ndarray
    tie_indices: np.ndarray
    registered: bool = True

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, 2)
        self.tie_indices = np.unique(np.asarray(self.tie_indices, dtype=np.int64))
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")
        if len(self.tie_indices) and (self.tie_indices[0] < 0 or self.tie_indices[-1] >= len(self.features)):
            raise ValueError(f"frame {self.frame_id}: tie index outside the feature set")


@dataclass
class VideoManifest:
    video_id: str
    native_fps: float
    duration_s: float
    initial_fps: float = 0.5

    def __post_init__(self):
        if not (self.native_fps > 0 and self.duration_s > 0 and self.initial_fps > 0):
            raise ConfigError("manifest rates and duration must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "VideoManifest":
        unknown = set(d) - {"video_id", "native_fps", "duration_s", "initial_fps"}
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        try:
            return cls(str(d["video_id"]), float(d["native_fps"]), float(d["duration_s"]),
                       float(d.get("initial_fps", 0.5)))
        except KeyError as exc:
            raise ConfigError(f"manifest lacks {exc}") from exc

    def initial_timestamps(self) -> list[float]:
        step = max(1, int(round(self.native_fps / self.initial_fps)))
        n_frames = int(np.floor(self.duration_s * self.native_fps + 1e-9))
        return [k / self.native_fps for k in range(0, n_frames + 1, step)]


class PlanStatus(str, Enum):
    IN_PROGRESS = "InProgress"
    CONVERGED = "Converged"
    ITERATION_CAP = "IterationCap"
    BAND_UNREACHABLE = "BandUnreachable"


@dataclass(frozen=True)
class FrameAction:
    kind: str  # "add" or "remove"
    frame_id: str | None = None
    between: tuple[str, str] | None = None
    timestamp: float | None = None

    def to_dict(self) -> dict:
        if self.kind == "add":
            return {"action": "add", "between": list(self.between), "timestamp": self.timestamp}
        return {"action": "remove", "frame_id": self.frame_id, "timestamp": self.timestamp}


@dataclass
class FramePlan:
    actions: list[FrameAction]
    iteration: int = 0
    status: PlanStatus = PlanStatus.IN_PROGRESS

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "status": self.status.value,
                "actions": [a.to_dict() for a in self.actions]}

    def signature(self) -> tuple:
        return tuple((a.kind, a.frame_id, a.between, a.timestamp) for a in self.actions)


def network_overlap(frame: FrameRecord) -> float:
    """Tie-point hull area over feature hull area, clamped to [0, 1]."""
    if not frame.registered:
        raise Unregistered(f"frame {frame.frame_id} is not registered")
    area_f = convex_hull_area(frame.features)
    if len(frame.tie_indices) < 3:
        return 0.0
    try:
        area_t = convex_hull_area(frame.features[frame.tie_indices])
    except DegenerateGeometry:
        return 0.0
    return float(min(max(area_t / area_f, 0.0), 1.0))


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def snap_between(t_a: float, t_b: float, native_fps: float) -> float:
    """Native-grid timestamp strictly between two frames, nearest their midpoint.

    Raises BandUnreachable when no native frame lies strictly between them.
    """
    lo, hi = min(t_a, t_b), max(t_a, t_b)
    i_lo = int(np.floor(lo * native_fps + 1e-6)) + 1
    i_hi = int(np.ceil(hi * native_fps - 1e-6)) - 1
    if i_lo > i_hi:
        raise BandUnreachable(f"no native frame between {lo:.4f}s and {hi:.4f}s")
    mid = 0.5 * (lo + hi) * native_fps
    k = int(np.floor(mid + 0.5))
    k = min(max(k, i_lo), i_hi)
    return k / native_fps


def plan_iteration(frames: list[FrameRecord], similarities: dict[tuple[str, str], int],
                   ov_min: float, ov_max: float | None = None, native_fps: float = 60.0,
                   iteration: int = 0, overlaps: dict[str, float] | None = None) -> FramePlan:
    """One round of add/remove decisions.

    * A registered frame with overlap below ``ov_min`` gets one new frame
      between itself and whichever consecutive neighbor shares fewer
      matched features with it (earlier neighbor on ties).
    * An unregistered frame gets one new frame on each side.
    * In every maximal run of more than three consecutive frames with
      overlap above ``ov_max``, frames at even 1-based run positions are
      removed, except frames that bound a new frame in this plan.

    Adds are snapped to the native frame grid; duplicates are merged.
    """
    ov_max = ov_min + DEFAULT_BAND_WIDTH if ov_max is None else ov_max
    if not ov_min < ov_max:
        raise ConfigError("ov_min must be below ov_max")
    frames = sorted(frames, key=lambda f: f.timestamp)
    if overlaps is None:
        overlaps = {f.frame_id: network_overlap(f) for f in frames if f.registered}
    n = len(frames)
    add_pairs: list[tuple[int, int]] = []

    def want_add(i: int, j: int):
        pair = (min(i, j), max(i, j))
        if pair not in add_pairs:
            add_pairs.append(pair)

    for i, f in enumerate(frames):
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < n]
        if not nbrs:
            continue
        if not f.registered:
            for j in nbrs:
                want_add(i, j)
            continue
        if overlaps[f.frame_id] >= ov_min:
            continue
        counts = [similarities.get(_pair(f.frame_id, frames[j].frame_id), 0) for j in nbrs]
        want_add(i, nbrs[int(np.argmin(counts))])

    actions: list[FrameAction] = []
    touched: set[int] = set()
    for i, j in sorted(add_pairs):
        t = snap_between(frames[i].timestamp, frames[j].timestamp, native_fps)
        actions.append(FrameAction("add", between=(frames[i].frame_id, frames[j].frame_id), timestamp=t))
        touched.update((i, j))

    run: list[int] = []
    for i in range(n + 1):
        high = (i < n and frames[i].registered and overlaps[frames[i].frame_id] > ov_max)
        if high:
            run.append(i)
            continue
        if len(run) >= MIN_REMOVAL_RUN:
            for pos, k in enumerate(run, start=1):
                if pos % 2 == 0 and k not in touched:
                    actions.append(FrameAction("remove", frame_id=frames[k].frame_id,
                                               timestamp=frames[k].timestamp))
        run = []
    status = PlanStatus.CONVERGED if not actions else PlanStatus.IN_PROGRESS
    return FramePlan(actions, iteration, status)


def apply_plan(timestamps: list[float], plan: FramePlan) -> list[float]:
    removed = {a.timestamp for a in plan.actions if a.kind == "remove"}
    added = {a.timestamp for a in plan.actions if a.kind == "add"}
    return sorted((set(timestamps) - removed) | added)


# ---------------------------------------------------------------- backends

def frames_from_bundle(bundle: Bundle) -> tuple[list[FrameRecord], dict[tuple[str, str], int]]:
    """Frame records and pairwise match counts from a bundle with frame extensions.

    Frames listed with a timestamp but absent from the views are
    unregistered. Without a matches file, co-visible track counts stand in
    for matched-feature counts.
    """
    ties = bundle.tie_keypoints()
    ids = list(bundle.timestamps) if bundle.timestamps else list(bundle.views)
    frames = []
    for vid in ids:
        kps = bundle.keypoints.get(vid, {})
        keys = sorted(kps)
        pos = {k: i for i, k in enumerate(keys)}
        feats = np.array([kps[k] for k in keys]) if keys else np.zeros((0, 2))
        tie = [pos[k] for k in ties.get(vid, ()) if k in pos]
        ts = bundle.timestamps.get(vid)
        if ts is None:
            ts = bundle.views[vid].timestamp
        if ts is None:
            raise ConfigError(f"frame {vid} has no timestamp")
        frames.append(FrameRecord(vid, float(ts), feats, tie, vid in bundle.views))
    sims = bundle.matches if bundle.matches is not None else bundle.covisibility()
    return frames, dict(sims)


Backend = Callable[[list[float]], Bundle]


@dataclass
class CommandBackend:
    """Runs ``CMD <timestamps_file> <bundle_dir>`` and reads the bundle it writes."""

    command: str
    workdir: str | None = None
    timeout_s: float | None = None

    def __call__(self, timestamps: list[float]) -> Bundle:
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            ts_file = Path(tmp) / "timestamps.txt"
            ts_file.write_text("".join(f"{float(t)!r}\n" for t in timestamps), encoding="utf-8")
            out_dir = Path(tmp) / "bundle"
            out_dir.mkdir()
            argv = shlex.split(self.command) + [str(ts_file), str(out_dir)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout_s,
                                      env=dict(os.environ))
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise BackendFailure(f"backend command failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise BackendFailure(f"backend exited with {proc.returncode}: {proc.stderr.strip()[-500:]}")
            return read_bundle(out_dir)


@dataclass
class OptimizeResult:
    timestamps: list[float]
    status: PlanStatus
    log: list[dict] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.log)

    def to_dict(self) -> dict:
        return {"status": self.status.value, "iterations": self.iterations,
                "timestamps": self.timestamps, "log": self.log}


def optimize_frames(backend: Backend, manifest: VideoManifest, ov_min: float, ov_max: float | None = None,
                    max_iters: int = 20, initial_timestamps: list[float] | None = None) -> OptimizeResult:
    """Alternate backend reconstruction and planning until the plan is empty.

    Stops with IterationCap after ``max_iters`` backend calls or when the
    loop revisits an earlier frame set with the same plan (an add/remove
    oscillation), and with BandUnreachable when a
    needed frame does not exist on the native grid.
    """
    ov_max = ov_min + DEFAULT_BAND_WIDTH if ov_max is None else ov_max
    ts = sorted(initial_timestamps) if initial_timestamps is not None else manifest.initial_timestamps()
    log: list[dict] = []
    seen: set[tuple] = set()
    for it in range(1, max_iters + 1):
        try:
            bundle = backend(list(ts))
            frames, sims = frames_from_bundle(bundle)
        except BackendFailure as exc:
            raise BackendFailure(str(exc), it) from exc
        except PipefitError as exc:
            raise BackendFailure(f"{type(exc).__name__}: {exc}", it) from exc
        overlaps = {f.frame_id: network_overlap(f) for f in frames if f.registered}
        entry = {"iteration": it, "n_frames": len(frames),
                 "n_unregistered": sum(not f.registered for f in frames),
                 "min_overlap": min(overlaps.values()) if overlaps else None,
                 "max_overlap": max(overlaps.values()) if overlaps else None}
        try:
            plan = plan_iteration(frames, sims, ov_min, ov_max, manifest.native_fps, it, overlaps)
        except BandUnreachable as exc:
            entry["error"] = str(exc)
            log.append(entry)
            return OptimizeResult(ts, PlanStatus.BAND_UNREACHABLE, log)
        entry["n_add"] = sum(a.kind == "add" for a in plan.actions)
        entry["n_remove"] = sum(a.kind == "remove" for a in plan.actions)
        log.append(entry)
        if not plan.actions:
            return OptimizeResult(ts, PlanStatus.CONVERGED, log)
        key = (tuple(ts), plan.signature())
        if key in seen:
            logger.warning("plan repeated at iteration %d; stopping", it)
            return OptimizeResult(ts, PlanStatus.ITERATION_CAP, log)
        seen.add(key)
        ts = apply_plan(ts, plan)
    return OptimizeResult(ts, PlanStatus.ITERATION_CAP, log)
