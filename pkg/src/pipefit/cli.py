"""``pipefit`` command-line interface.

Exit codes: 0 on success, 2 on a clean but empty or unmet result (no
cylinders found, frame band not reached), 1 on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .cylinder import SeedPlaneSpec, detect_all
from .ellipse import EllipseGate
from .errors import BackendFailure, ConfigError, PipefitError
from .frames import (
    CommandBackend,
    PlanStatus,
    VideoManifest,
    frames_from_bundle,
    network_overlap,
    optimize_frames,
    plan_iteration,
)
from .geometry import Plane, UnitState
from .io import read_bundle, read_json, read_pgm, read_ply, rows_to_csv, write_bundle, write_json, write_pgm, write_ply
from .progress import PipeClassTable, build_report, classify_kmeans, read_ground_truth

logger = logging.getLogger("pipefit")

EXIT_OK, EXIT_ERROR, EXIT_EMPTY = 0, 1, 2


# ---------------------------------------------------------------- helpers

def _floats(text: str, n: int | None = None, what: str = "value") -> list[float]:
    try:
        vals = [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what} {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what} needs {n} comma-separated numbers, got {len(vals)}")
    return vals


def parse_plane(text: str) -> Plane:
    """``"nx,ny,nz,d"`` for the plane ``n . p + d = 0``."""
    nx, ny, nz, d = _floats(text, 4, "plane")
    return Plane(np.array([nx, ny, nz]), d)


def parse_anchors(text: str) -> np.ndarray:
    """``"x,y,z;x,y,z;x,y,z[;...]"``."""
    pts = [_floats(p, 3, "anchor") for p in text.split(";") if p.strip()]
    if len(pts) < 3:
        raise ConfigError("need at least three anchor points")
    return np.array(pts)


def _meta(args, cfg: RunConfig, **extra) -> dict:
    return {"tool": "pipefit", "version": __version__, "command": args.command_path,
            "config_hash": cfg.hash(), "seed": cfg.seed, **extra}


def _config(args, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig.load(args.config, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _load_cylinders(path) -> list[dict]:
    data = read_json(path)
    cyls = data.get("cylinders") if isinstance(data, dict) else data
    if not isinstance(cyls, list):
        raise ConfigError(f"{path}: expected a 'cylinders' list")
    for i, c in enumerate(cyls):
        if "radius_m" not in c:
            raise ConfigError(f"{path}: cylinder {i} lacks radius_m")
        c.setdefault("id", f"p{i:04d}")
    return cyls


def _read_rasters(directory, view_ids) -> dict[str, np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"raster directory not found: {d}")
    images = {}
    for vid in view_ids:
        for ext in (".pgm", ".png"):
            p = d / f"{vid}{ext}"
            if p.exists():
                images[vid] = read_pgm(p)
                break
    return images


# ---------------------------------------------------------------- commands

def cmd_detect(args) -> int:
    cfg = _config(args, {"detect": json.loads(args.overrides)} if args.overrides else None)
    if args.classes:
        table = PipeClassTable.load(args.classes)
        gate = EllipseGate.from_class_radii(table.radii)
        gate.slab_half_thickness_m = cfg.detect.slab_half_thickness_m
        cfg.detect.gate = gate
    if (args.plane is None) == (args.anchors is None):
        raise ConfigError("give exactly one of --plane or --anchors")
    seed = SeedPlaneSpec(plane=parse_plane(args.plane)) if args.plane else SeedPlaneSpec(anchors=parse_anchors(args.anchors))
    cloud = read_ply(args.cloud, UnitState(args.unit_state) if args.unit_state else None)
    result = detect_all(cloud, seed, cfg.detect)
    plane = seed.resolve()
    out = {
        "meta": _meta(args, cfg, cloud=str(args.cloud), n_points=len(cloud), unit_state=cloud.unit_state.value,
                      seed_plane={"normal": plane.normal.tolist(), "d": plane.d}),
        "cylinders": [{"id": f"p{i:04d}", **m.to_dict()} for i, m in enumerate(result.cylinders)],
        "diagnostics": result.diagnostics_dict(),
    }
    write_json(args.out, out)
    logger.info("%d cylinders", len(result))
    return EXIT_OK if len(result) else EXIT_EMPTY


def cmd_classify(args) -> int:
    cfg = _config(args)
    table = PipeClassTable.load(args.classes)
    cyls = _load_cylinders(args.cylinders)
    ids = classify_kmeans([c["radius_m"] for c in cyls], table)
    rows = []
    for c, cid in zip(cyls, ids):
        cls = table.by_id(cid)
        rows.append({"id": c["id"], "radius_m": c["radius_m"], "class_id": cid, "label": cls.label,
                     "residual_mm": (c["radius_m"] - cls.outer_radius_m) * 1000.0})
    write_json(args.out, {"meta": _meta(args, cfg), "assignments": rows})
    return EXIT_OK if rows else EXIT_EMPTY


def cmd_report(args) -> int:
    cfg = _config(args)
    table = PipeClassTable.load(args.classes)
    cyls = _load_cylinders(args.cylinders)
    truth = read_ground_truth(args.truth) if args.truth else None
    report = build_report(cyls, table, truth, args.tn, _meta(args, cfg))
    write_json(args.out, report.to_dict())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_scale(args) -> int:
    from .scale import TargetBoard, apply_scale, define_scale

    cfg = _config(args)
    bundle = read_bundle(args.bundle)
    board = TargetBoard.from_dict(read_json(args.board), allow_symmetric=args.allow_symmetric)
    images = _read_rasters(args.rasters, sorted(bundle.views))
    eccentricity = cfg.scale.eccentricity and not args.no_eccentricity
    result = define_scale(images, bundle.views, board, eccentricity)
    out = {"meta": _meta(args, cfg, board_id=board.board_id, n_rasters=len(images)), **result.to_dict()}
    if args.cloud:
        scaled = apply_scale(read_ply(args.cloud), result.scale)
        if not args.cloud_out:
            raise ConfigError("--cloud needs --cloud-out")
        write_ply(args.cloud_out, scaled, comments=[f"scale {float(result.scale)!r}", f"config_hash {cfg.hash()}"])
        out["cloud_out"] = str(args.cloud_out)
    write_json(args.out, out)
    return EXIT_OK


def cmd_frames_plan(args) -> int:
    cfg = _config(args)
    manifest = VideoManifest.from_dict(read_json(args.manifest))
    ov_min = args.ov_min if args.ov_min is not None else cfg.frames.ov_min
    ov_max = args.ov_max if args.ov_max is not None else cfg.frames.ov_max
    frames, sims = frames_from_bundle(read_bundle(args.bundle))
    overlaps = {f.frame_id: network_overlap(f) for f in frames if f.registered}
    plan = plan_iteration(frames, sims, ov_min, ov_max, manifest.native_fps, 1, overlaps)
    out = {"meta": _meta(args, cfg, video_id=manifest.video_id), "overlaps": overlaps,
           "unregistered": [f.frame_id for f in frames if not f.registered], **plan.to_dict()}
    write_json(args.out, out)
    return EXIT_OK


def cmd_frames_optimize(args) -> int:
    from .synth import SimBackendSpec, SimulatedBackend

    cfg = _config(args)
    manifest = VideoManifest.from_dict(read_json(args.manifest))
    ov_min = args.ov_min if args.ov_min is not None else cfg.frames.ov_min
    ov_max = args.ov_max if args.ov_max is not None else cfg.frames.ov_max
    if (args.backend_cmd is None) == (not args.simulated):
        raise ConfigError("give exactly one of --backend-cmd or --simulated")
    if args.simulated:
        backend = SimulatedBackend(SimBackendSpec(duration_s=manifest.duration_s, native_fps=manifest.native_fps,
                                                  seed=cfg.seed))
    else:
        backend = CommandBackend(args.backend_cmd)
    max_iters = args.max_iters if args.max_iters is not None else cfg.frames.max_iters
    result = optimize_frames(backend, manifest, ov_min, ov_max, max_iters)
    write_json(args.out, {"meta": _meta(args, cfg, video_id=manifest.video_id, ov_min=ov_min, ov_max=ov_max),
                          **result.to_dict()})
    if args.timestamps_out:
        Path(args.timestamps_out).write_text("".join(f"{float(t)!r}\n" for t in result.timestamps), encoding="utf-8")
    return EXIT_OK if result.status == PlanStatus.CONVERGED else EXIT_EMPTY


def cmd_synth_scene(args) -> int:
    from .experiments import lab_class_table, lab_ground_truth
    from .synth import SceneSpec, lab_scene_spec, sample_scene

    cfg = _config(args)
    if (args.spec is None) == (args.lab is None):
        raise ConfigError("give exactly one of --spec or --lab")
    if args.spec:
        spec = SceneSpec.from_dict(read_json(args.spec))
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = lab_scene_spec(args.lab, cfg.seed, args.outlier_fraction)
    sample = sample_scene(spec)
    write_ply(args.out, sample.cloud, binary=not args.ascii,
              comments=[f"seed {spec.seed}", f"generator pipefit {__version__}"])
    table = PipeClassTable.load(args.classes) if args.classes else lab_class_table()
    if args.truth:
        truth = lab_ground_truth(spec, table)
        rows = [[g.pipe_id, g.radius_m * 1000.0, g.length_m, g.class_id, *g.position] for g in truth]
        Path(args.truth).write_text(rows_to_csv(
            ["pipe_id", "true_radius_mm", "true_length_m", "class_id", "x_m", "y_m", "z_m"], rows), encoding="utf-8")
    if args.labels:
        np.savetxt(args.labels, sample.labels, fmt="%d")
    if args.spec_out:
        write_json(args.spec_out, {"meta": _meta(args, cfg, seed=spec.seed), **spec.to_dict()})
    return EXIT_OK


def cmd_synth_board(args) -> int:
    from .geometry import RigidTransform, axis_angle_matrix
    from .io import Bundle
    from .synth import add_salt_noise, board_views, default_board, render_board, to_arbitrary_frame

    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    board = default_board(args.circle_radius_m)
    views = board_views(args.views, seed=cfg.seed, distance_m=args.distance_m)
    for vid, v in views.items():
        img = render_board(board, v, v.width, v.height).image
        if args.salt > 0:
            img = add_salt_noise(img, args.salt, seed=cfg.seed)
        write_pgm(out / f"{vid}.pgm", img)
    tf = RigidTransform(axis_angle_matrix(np.array([1.0, 2.0, 3.0]), 0.7), np.array([0.3, -1.0, 2.0]))
    write_bundle(out / "bundle", Bundle(views=to_arbitrary_frame(views, args.true_scale, tf)))
    write_json(out / "board.json", board.to_dict())
    write_json(out / "truth.json", {"meta": _meta(args, cfg), "s": args.true_scale})
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import overlap_detection_sweep, scale_views_sweep

    cfg = _config(args)
    if args.name == "scale-views":
        rows = [r.to_dict() for r in scale_views_sweep(seed=cfg.seed, n_combinations=args.n or 50,
                                                        noise_px=args.noise_px)]
    else:
        rows = [r.to_dict() for r in overlap_detection_sweep(seed=cfg.seed, n_scenes=args.n or 3)]
    write_json(args.out, {"meta": _meta(args, cfg, experiment=args.name), "rows": rows})
    if args.csv and rows:
        header = list(rows[0])
        Path(args.csv).write_text(rows_to_csv(header, [[r[k] for k in header] for r in rows]), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (overrides config)")
    common.add_argument("--json-errors", action="store_true", help="report errors as JSON lines on stderr")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="pipefit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pipefit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    fr = sub.add_parser("frames", help="video frame selection")
    frs = fr.add_subparsers(dest="action", required=True)
    plan = frs.add_parser("plan", parents=[common], help="one add/remove plan from a bundle")
    plan.add_argument("--bundle", required=True)
    plan.add_argument("--manifest", required=True)
    plan.add_argument("--ov-min", type=float)
    plan.add_argument("--ov-max", type=float)
    plan.add_argument("--out", default="-")
    plan.set_defaults(func=cmd_frames_plan)
    opt = frs.add_parser("optimize", parents=[common], help="iterate backend and planner to the overlap band")
    opt.add_argument("--manifest", required=True)
    opt.add_argument("--backend-cmd", help="invoked as CMD <timestamps_file> <bundle_dir>")
    opt.add_argument("--simulated", action="store_true", help="use the built-in simulated backend")
    opt.add_argument("--ov-min", type=float)
    opt.add_argument("--ov-max", type=float)
    opt.add_argument("--max-iters", type=int)
    opt.add_argument("--timestamps-out")
    opt.add_argument("--out", default="-")
    opt.set_defaults(func=cmd_frames_optimize)

    sc = sub.add_parser("scale", parents=[common], help="metric scale from circular targets")
    sc.add_argument("--bundle", required=True)
    sc.add_argument("--rasters", required=True, help="directory of <view_id>.pgm images")
    sc.add_argument("--board", required=True)
    sc.add_argument("--no-eccentricity", action="store_true", help="use uncorrected ellipse centers")
    sc.add_argument("--allow-symmetric", action="store_true")
    sc.add_argument("--cloud", help="arbitrary-scale PLY to rescale")
    sc.add_argument("--cloud-out")
    sc.add_argument("--out", default="-")
    sc.set_defaults(func=cmd_scale)

    de = sub.add_parser("detect", parents=[common], help="cylinders crossing a seed plane")
    de.add_argument("--cloud", required=True)
    de.add_argument("--plane", help='"nx,ny,nz,d" for n . p + d = 0')
    de.add_argument("--anchors", help='"x,y,z;x,y,z;x,y,z" points on the seed plane')
    de.add_argument("--classes", help="class table; sets the radius gate from its radii")
    de.add_argument("--unit-state", choices=[u.value for u in UnitState])
    de.add_argument("--overrides", help="JSON object of detect settings")
    de.add_argument("--out", default="-")
    de.set_defaults(func=cmd_detect)

    cl = sub.add_parser("classify", parents=[common], help="assign detected pipes to classes")
    cl.add_argument("--cylinders", required=True)
    cl.add_argument("--classes", required=True)
    cl.add_argument("--out", default="-")
    cl.set_defaults(func=cmd_classify)

    rp = sub.add_parser("report", parents=[common], help="per-class progress report")
    rp.add_argument("--cylinders", required=True)
    rp.add_argument("--classes", required=True)
    rp.add_argument("--truth", help="ground truth CSV")
    rp.add_argument("--tn", type=int, help="true negative count, enables accuracy")
    rp.add_argument("--out", default="-")
    rp.add_argument("--csv")
    rp.set_defaults(func=cmd_report)

    sy = sub.add_parser("synth", help="synthetic data")
    sys_ = sy.add_subparsers(dest="action", required=True)
    ss = sys_.add_parser("scene", parents=[common], help="cylinder scene as PLY")
    ss.add_argument("--spec", help="SceneSpec JSON")
    ss.add_argument("--lab", type=float, metavar="OVERLAP", help="six-pipe lab scene at this overlap level")
    ss.add_argument("--outlier-fraction", type=float, default=0.0)
    ss.add_argument("--classes")
    ss.add_argument("--out", required=True)
    ss.add_argument("--truth")
    ss.add_argument("--labels")
    ss.add_argument("--spec-out")
    ss.add_argument("--ascii", action="store_true")
    ss.set_defaults(func=cmd_synth_scene)
    sb = sys_.add_parser("board", parents=[common], help="rendered target-board views and bundle")
    sb.add_argument("--views", type=int, default=5)
    sb.add_argument("--circle-radius-m", type=float, default=0.02)
    sb.add_argument("--distance-m", type=float, default=0.6)
    sb.add_argument("--true-scale", type=float, default=4.0)
    sb.add_argument("--salt", type=float, default=0.0)
    sb.add_argument("--out-dir", required=True)
    sb.set_defaults(func=cmd_synth_board)

    ex = sub.add_parser("experiment", parents=[common], help="synthetic sweeps")
    ex.add_argument("name", choices=["scale-views", "overlap-detection"])
    ex.add_argument("--n", type=int, help="combinations (scale-views) or scenes per level")
    ex.add_argument("--noise-px", type=float, default=0.1)
    ex.add_argument("--out", default="-")
    ex.add_argument("--csv")
    ex.set_defaults(func=cmd_experiment)
    return p


def _report_error(args, exc: BaseException) -> None:
    if getattr(args, "json_errors", False):
        payload = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, BackendFailure) and exc.iteration is not None:
            payload["iteration"] = exc.iteration
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    else:
        print(f"pipefit: error: {type(exc).__name__}: {exc}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.command_path = " ".join(x for x in (args.command, getattr(args, "action", None)) if x)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (PipefitError, OSError, ValueError, json.JSONDecodeError) as exc:
        _report_error(args, exc)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
