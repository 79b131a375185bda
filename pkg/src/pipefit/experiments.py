"""Synthetic experiment sweeps: views used for scale, and minimum overlap versus detection quality."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cylinder import DetectConfig, detect_all
from .ellipse import EllipseGate
from .geometry import RigidTransform, axis_angle_matrix
from .progress import GroundTruthEntry, PipeClassTable, build_report
from .scale import SweepRow, detect_and_match, view_count_sweep
from .synth import (
    CLASS_RADII_MM,
    board_views,
    default_board,
    lab_scene_spec,
    lab_seed_plane,
    render_board,
    sample_scene,
    to_arbitrary_frame,
)

logger = logging.getLogger(__name__)

SCALE_K_VALUES = (2, 3, 4, 5, 10, 20, 35)
OVERLAP_LEVELS = (0.70, 0.75, 0.80, 0.85, 0.90, 0.95)


def scale_views_sweep(seed: int = 0, n_views: int = 35, k_values=SCALE_K_VALUES, n_combinations: int = 50,
                      noise_px: float = 0.1, circle_radius_m: float = 0.02, true_scale: float = 4.0,
                      reference_radius_m: float = 0.05) -> list[SweepRow]:
    """Pipe radius error against the number of board views used for scale.

    Renders ``n_views`` views of the default board, moves the cameras into
    an arbitrary similarity frame, detects and matches targets, then runs
    the view-count sweep with and without eccentricity correction.
    """
    board = default_board(circle_radius_m)
    views = board_views(n_views, seed=seed)
    images = {vid: render_board(board, v, v.width, v.height).image for vid, v in views.items()}
    tf = RigidTransform(axis_angle_matrix(np.array([1.0, 2.0, 3.0]), 0.7), np.array([0.3, -1.0, 2.0]))
    arbitrary = to_arbitrary_frame(views, true_scale, tf)
    matched = detect_and_match(images, arbitrary, board)
    return view_count_sweep(matched, arbitrary, board, k_values, n_combinations, seed=seed + 1,
                            noise_px=noise_px, reference_radius_m=reference_radius_m, true_scale=true_scale)


def lab_class_table() -> PipeClassTable:
    return PipeClassTable.from_radii_mm(CLASS_RADII_MM)


def lab_detect_config() -> DetectConfig:
    return DetectConfig(gate=EllipseGate.from_class_radii(np.array(CLASS_RADII_MM) / 1000.0))


def lab_ground_truth(spec, table: PipeClassTable) -> list[GroundTruthEntry]:
    radii = table.radii
    return [GroundTruthEntry(f"c{i}", c.radius_m, c.length_m,
                             table.ids[int(np.argmin(np.abs(radii - c.radius_m)))],
                             tuple(float(v) for v in c.base_m))
            for i, c in enumerate(spec.cylinders)]


@dataclass
class OverlapRow:
    overlap: float
    n_scenes: int
    n_points_mean: float
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    f_measure: float | None
    radius_rmse_mm: float | None
    mean_length_error_pct: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_lab_scene(overlap: float, seed: int, config: DetectConfig | None = None,
                  table: PipeClassTable | None = None):
    """Detect and report on one synthetic six-pipe scene."""
    table = table or lab_class_table()
    spec = lab_scene_spec(overlap, seed)
    sample = sample_scene(spec)
    result = detect_all(sample.cloud, lab_seed_plane(), config or lab_detect_config())
    report = build_report(result.cylinders, table, lab_ground_truth(spec, table))
    return sample, result, report


def overlap_detection_sweep(seed: int = 0, n_scenes: int = 3, levels=OVERLAP_LEVELS) -> list[OverlapRow]:
    """Detection quality, radius RMSE and length error per emulated minimum overlap.

    Scenes at each level reuse the same seeds, so only point density and
    noise change between levels.
    """
    table = lab_class_table()
    config = lab_detect_config()
    rows = []
    for ov in levels:
        tp = fp = fn = 0
        n_pts, sq, n_sq, len_errs = [], 0.0, 0, []
        for k in range(n_scenes):
            sample, _, report = run_lab_scene(ov, seed + k, config, table)
            n_pts.append(len(sample.cloud))
            o = report.overall
            tp, fp, fn = tp + o["tp"], fp + o["fp"], fn + o["fn"]
            for c in report.classes:
                if c.tp:
                    sq += c.radius_rmse_mm ** 2 * c.tp
                    n_sq += c.tp
                    len_errs.extend([c.mean_length_error_pct] * c.tp)
        p = tp / (tp + fp) if tp + fp else None
        r = tp / (tp + fn) if tp + fn else None
        f = 2 * p * r / (p + r) if p is not None and r is not None and p + r > 0 else None
        rows.append(OverlapRow(ov, n_scenes, float(np.mean(n_pts)), tp, fp, fn, p, r, f,
                               float(np.sqrt(sq / n_sq)) if n_sq else None,
                               float(np.mean(len_errs)) if len_errs else None))
        logger.info("overlap %.2f: F=%s", ov, f)
    return rows
