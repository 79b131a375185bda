from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from pipefit.cli import main, parse_anchors, parse_plane
from pipefit.errors import ConfigError
from pipefit.experiments import lab_class_table
from pipefit.io import write_json


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    d = tmp_path_factory.mktemp("lab")
    write_json(d / "classes.json", lab_class_table().to_dict())
    rc = main(["synth", "scene", "--lab", "0.95", "--out", str(d / "scene.ply"), "--truth", str(d / "truth.csv"),
               "--labels", str(d / "labels.txt"), "--spec-out", str(d / "spec.json")])
    assert rc == 0
    return d


def run(argv, capsys):
    rc = main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_parse_helpers():
    p = parse_plane("0,0,2,-1")
    np.testing.assert_allclose(p.normal, [0, 0, 1])
    assert p.d == pytest.approx(-0.5)
    p = parse_plane("0,0,1,-1.2")
    np.testing.assert_allclose(p.normal, [0, 0, 1])
    assert p.d == pytest.approx(-1.2)
    assert parse_anchors("0,0,0; 1,0,0; 0,1,0").shape == (3, 3)
    with pytest.raises(ConfigError):
        parse_plane("1,2,3")
    with pytest.raises(ConfigError):
        parse_anchors("0,0,0;1,0,0")


def test_detect_report_pipeline(lab, capsys):
    cyl = lab / "cyl.json"
    rc, _, _ = run(["detect", "--cloud", lab / "scene.ply", "--plane", "1,0,0,0",
                    "--classes", lab / "classes.json", "--out", cyl], capsys)
    assert rc == 0
    det = json.loads(cyl.read_text())
    assert len(det["cylinders"]) == 6
    assert det["meta"]["tool"] == "pipefit" and len(det["meta"]["config_hash"]) == 16
    radii = sorted(c["radius_m"] * 1000 for c in det["cylinders"])
    np.testing.assert_allclose(radii, [8.6, 36.5, 36.5, 57.5, 84.1, 109.5], atol=1.5)

    rc, out, _ = run(["classify", "--cylinders", cyl, "--classes", lab / "classes.json"], capsys)
    assert rc == 0
    assert sorted(a["class_id"] for a in json.loads(out)["assignments"]) == [1, 2, 2, 3, 4, 5]

    rc, out, _ = run(["report", "--cylinders", cyl, "--classes", lab / "classes.json",
                      "--truth", lab / "truth.csv", "--csv", lab / "report.csv"], capsys)
    assert rc == 0
    rep = json.loads(out)
    assert rep["overall"]["f_measure"] == 1.0 and rep["overall"]["accuracy"] is None
    assert (lab / "report.csv").read_text().startswith("class_id,label")


def test_detect_is_deterministic(lab, capsys):
    outs = []
    for _ in range(2):
        rc, out, _ = run(["detect", "--cloud", lab / "scene.ply", "--plane", "1,0,0,0",
                          "--classes", lab / "classes.json"], capsys)
        outs.append(out)
    assert outs[0] == outs[1]


def test_detect_empty_and_errors(lab, capsys):
    rc, out, _ = run(["detect", "--cloud", lab / "scene.ply", "--plane", "0,0,1,-50"], capsys)
    assert rc == 1
    rc, _, err = run(["detect", "--cloud", lab / "nope.ply", "--plane", "1,0,0,0", "--json-errors"], capsys)
    assert rc == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "FileNotFoundError"
    rc, _, err = run(["detect", "--cloud", lab / "scene.ply"], capsys)
    assert rc == 1 and "ConfigError" in err
    rc, _, err = run(["detect", "--cloud", lab / "scene.ply", "--plane", "1,0,0,0",
                      "--overrides", '{"bogus": 1}'], capsys)
    assert rc == 1 and "bogus" in err


def test_detect_without_cylinders_exits_2(tmp_path, capsys):
    spec = {"cylinders": [{"radius_m": 0.05, "axis": [0, 0, 1], "base_m": [0, 0, -0.5], "length_m": 1.0,
                           "density_per_m2": 20000}], "seed": 1}
    write_json(tmp_path / "spec.json", spec)
    assert main(["synth", "scene", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "s.ply")]) == 0
    # the plane is parallel to the pipe axis, so the slab holds no usable section
    rc, out, _ = run(["detect", "--cloud", tmp_path / "s.ply", "--plane", "1,0,0,-0.05"], capsys)
    assert rc == 2 and json.loads(out)["cylinders"] == []


def test_scale_from_synthetic_board(tmp_path, capsys):
    d = tmp_path / "board"
    assert main(["synth", "board", "--views", "5", "--out-dir", str(d)]) == 0
    rc, out, _ = run(["scale", "--bundle", d / "bundle", "--rasters", d, "--board", d / "board.json"], capsys)
    assert rc == 0
    assert json.loads(out)["s"] == pytest.approx(4.0, rel=3e-3)
    rc, out, _ = run(["scale", "--bundle", d / "bundle", "--rasters", d, "--board", d / "board.json",
                      "--no-eccentricity"], capsys)
    assert rc == 0 and json.loads(out)["eccentricity_corrected"] is False

    # scaling a metric cloud is refused
    assert main(["synth", "scene", "--lab", "0.95", "--out", str(tmp_path / "m.ply")]) == 0
    rc, _, err = run(["scale", "--bundle", d / "bundle", "--rasters", d, "--board", d / "board.json",
                      "--cloud", tmp_path / "m.ply", "--cloud-out", tmp_path / "o.ply"], capsys)
    assert rc == 1 and "AlreadyMetric" in err


def test_frames_commands(tmp_path, capsys):
    write_json(tmp_path / "m.json", {"video_id": "v", "native_fps": 60, "duration_s": 60})
    rc, out, _ = run(["frames", "optimize", "--manifest", tmp_path / "m.json", "--simulated",
                      "--timestamps-out", tmp_path / "ts.txt"], capsys)
    res = json.loads(out)
    assert rc == 0 and res["status"] == "Converged" and res["iterations"] <= 10
    assert len((tmp_path / "ts.txt").read_text().split()) == len(res["timestamps"])

    rc, out, _ = run(["frames", "optimize", "--manifest", tmp_path / "m.json", "--simulated",
                      "--max-iters", "1"], capsys)
    assert rc == 2 and json.loads(out)["status"] == "IterationCap"

    rc, _, err = run(["frames", "optimize", "--manifest", tmp_path / "m.json",
                      "--backend-cmd", "false", "--json-errors"], capsys)
    payload = json.loads(err.strip().splitlines()[-1])
    assert rc == 1 and payload["error"] == "BackendFailure" and payload["iteration"] == 1

    from pipefit.io import write_bundle
    from pipefit.synth import SimBackendSpec, simulate_bundle
    write_bundle(tmp_path / "bd", simulate_bundle(SimBackendSpec(), [0.0, 2.0, 4.0, 6.0]))
    rc, out, _ = run(["frames", "plan", "--bundle", tmp_path / "bd", "--manifest", tmp_path / "m.json"], capsys)
    plan = json.loads(out)
    assert rc == 0 and plan["status"] == "InProgress"
    assert {a["action"] for a in plan["actions"]} == {"add"}


def test_config_file_and_seed(tmp_path, capsys):
    write_json(tmp_path / "c.json", {"frames": {"ov_min": 0.5}})
    write_json(tmp_path / "m.json", {"video_id": "v", "native_fps": 60, "duration_s": 10})
    rc, out, _ = run(["frames", "optimize", "--manifest", tmp_path / "m.json", "--simulated",
                      "--config", tmp_path / "c.json", "--seed", "3"], capsys)
    meta = json.loads(out)["meta"]
    assert meta["ov_min"] == 0.5 and meta["seed"] == 3


def test_installed_executable(tmp_path):
    exe = shutil.which("pipefit")
    cmd = [exe] if exe else [sys.executable, "-m", "pipefit.cli"]
    proc = subprocess.run([*cmd, "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("pipefit ")
    proc = subprocess.run([*cmd, "classify", "--cylinders", str(tmp_path / "x.json"), "--classes", "y"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
