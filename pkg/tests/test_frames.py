from __future__ import annotations

import itertools
import sys
import textwrap

import numpy as np
import pytest

from pipefit.errors import BackendFailure, BandUnreachable, ConfigError, Unregistered
from pipefit.frames import (
    CommandBackend,
    FrameAction,
    FramePlan,
    FrameRecord,
    PlanStatus,
    VideoManifest,
    apply_plan,
    frames_from_bundle,
    network_overlap,
    optimize_frames,
    plan_iteration,
    snap_between,
)
from pipefit.synth import SimBackendSpec, SimulatedBackend, simulate_bundle

OV_MIN, OV_MAX = 0.90, 0.925
LEVELS = {"low": 0.80, "mid": 0.91, "high": 0.97, "unreg": None}


def square(side=100.0):
    return np.array([[0, 0], [side, 0], [side, side], [0, side]], dtype=float)


# ---------------------------------------------------------------- overlap

def test_network_overlap_values():
    inner = square(50.0) + 25.0
    feats = np.vstack([square(), inner])
    assert network_overlap(FrameRecord("a", 0.0, feats, [4, 5, 6, 7])) == pytest.approx(0.25)
    assert network_overlap(FrameRecord("a", 0.0, feats, range(8))) == pytest.approx(1.0)
    assert network_overlap(FrameRecord("a", 0.0, feats, [0, 1])) == 0.0
    line = np.vstack([square(), [[10, 10], [20, 20], [30, 30]]])
    assert network_overlap(FrameRecord("a", 0.0, line, [4, 5, 6])) == 0.0
    with pytest.raises(Unregistered):
        network_overlap(FrameRecord("a", 0.0, feats, [], registered=False))


def test_frame_record_validation():
    with pytest.raises(ValueError):
        FrameRecord("a", -1.0, square(), [])
    with pytest.raises(ValueError):
        FrameRecord("a", 0.0, square(), [4])


# ---------------------------------------------------------------- snapping

def test_snap_between():
    assert snap_between(0.0, 1.0, 60) == pytest.approx(0.5)
    assert snap_between(1.0, 0.0, 60) == pytest.approx(0.5)
    assert snap_between(0.0, 2 / 60, 60) == pytest.approx(1 / 60)
    assert snap_between(0.0, 3 / 60, 60) in (pytest.approx(1 / 60), pytest.approx(2 / 60))
    with pytest.raises(BandUnreachable):
        snap_between(0.0, 1 / 60, 60)
    with pytest.raises(BandUnreachable):
        snap_between(0.0, 0.5, 2)


# ---------------------------------------------------------------- planning oracle

def oracle_plan(states, sims, ov_min=OV_MIN, ov_max=OV_MAX):
    """Straightforward restatement of the add/remove rules on index pairs."""
    n = len(states)
    adds = set()
    for i, s in enumerate(states):
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < n]
        if not nbrs:
            continue
        if s == "unreg":
            adds.update((min(i, j), max(i, j)) for j in nbrs)
        elif LEVELS[s] < ov_min:
            best = min(nbrs, key=lambda j: (sims.get((min(i, j), max(i, j)), 0), j))
            adds.add((min(i, best), max(i, best)))
    touched = {k for pair in adds for k in pair}
    removes = set()
    i = 0
    while i < n:
        if states[i] != "unreg" and LEVELS[states[i]] > ov_max:
            j = i
            while j < n and states[j] != "unreg" and LEVELS[states[j]] > ov_max:
                j += 1
            if j - i >= 4:
                removes.update(k for k in range(i + 1, j, 2) if k not in touched)
            i = j
        else:
            i += 1
    return adds, removes


def run_plan(states, sims):
    frames = [FrameRecord(f"f{i}", float(i), np.zeros((0, 2)), [], s != "unreg")
              for i, s in enumerate(states)]
    overlaps = {f"f{i}": LEVELS[s] for i, s in enumerate(states) if s != "unreg"}
    named = {(f"f{a}", f"f{b}"): c for (a, b), c in sims.items()}
    plan = plan_iteration(frames, named, OV_MIN, OV_MAX, native_fps=10.0, overlaps=overlaps)
    adds = {tuple(sorted(int(x[1:]) for x in a.between)) for a in plan.actions if a.kind == "add"}
    removes = {int(a.frame_id[1:]) for a in plan.actions if a.kind == "remove"}
    return plan, adds, removes


def test_plan_matches_oracle_exhaustively():
    rng = np.random.default_rng(0)
    n_cases = 0
    for n in range(1, 7):
        for states in itertools.product(LEVELS, repeat=n):
            sims = {(i, i + 1): int(rng.integers(0, 3)) for i in range(n - 1)}
            plan, adds, removes = run_plan(states, sims)
            want_adds, want_removes = oracle_plan(states, sims)
            assert adds == want_adds, states
            assert removes == want_removes, states
            assert len(plan.actions) == len(adds) + len(removes)
            assert (plan.status == PlanStatus.CONVERGED) == (not plan.actions)
            for a in plan.actions:
                if a.kind == "add":
                    lo, hi = sorted(int(x[1:]) for x in a.between)
                    assert lo < a.timestamp < hi
            n_cases += 1
    assert n_cases == sum(4 ** n for n in range(1, 7))


def test_plan_long_high_run_removes_even_positions():
    states = ["high"] * 7
    _, adds, removes = run_plan(states, {})
    assert not adds and removes == {1, 3, 5}
    _, _, removes = run_plan(["high"] * 3, {})
    assert not removes


def test_plan_tie_goes_to_earlier_neighbor():
    _, adds, _ = run_plan(["mid", "low", "mid"], {(0, 1): 5, (1, 2): 5})
    assert adds == {(0, 1)}
    _, adds, _ = run_plan(["mid", "low", "mid"], {(0, 1): 6, (1, 2): 5})
    assert adds == {(1, 2)}


def test_plan_rejects_bad_band():
    with pytest.raises(ConfigError):
        plan_iteration([], {}, 0.9, 0.9)


def test_plan_serialization_and_apply():
    plan = FramePlan([FrameAction("add", between=("a", "b"), timestamp=0.5),
                      FrameAction("remove", frame_id="c", timestamp=2.0)], 3)
    d = plan.to_dict()
    assert d["iteration"] == 3 and d["status"] == "InProgress"
    assert d["actions"][0] == {"action": "add", "between": ["a", "b"], "timestamp": 0.5}
    assert apply_plan([0.0, 1.0, 2.0, 3.0], plan) == [0.0, 0.5, 1.0, 3.0]


# ---------------------------------------------------------------- manifest and bundles

def test_manifest():
    m = VideoManifest.from_dict({"video_id": "v", "native_fps": 30, "duration_s": 10})
    assert m.initial_timestamps() == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]
    with pytest.raises(ConfigError):
        VideoManifest.from_dict({"video_id": "v", "native_fps": 30, "duration_s": 10, "fps": 1})
    with pytest.raises(ConfigError):
        VideoManifest.from_dict({"video_id": "v", "native_fps": 30})
    with pytest.raises(ConfigError):
        VideoManifest("v", 0, 10)


def test_frames_from_simulated_bundle():
    spec = SimBackendSpec(min_registered_overlap=0.75)
    ts = [0.0, 0.5, 1.0, 22.0, 30.0]
    frames, sims = frames_from_bundle(simulate_bundle(spec, ts))
    assert [f.timestamp for f in frames] == ts
    ov = {f.frame_id: network_overlap(f) for f in frames if f.registered}
    assert ov["f0000030"] == pytest.approx(spec.overlap(0.1), abs=0.01)
    assert not frames[3].registered
    assert sims[("f0000000", "f0000030")] > sims[("f0000060", "f0001320")]


# ---------------------------------------------------------------- optimization loop

def test_optimize_converges_inside_band():
    spec = SimBackendSpec()
    man = VideoManifest("v", 60.0, 60.0)
    res = optimize_frames(SimulatedBackend(spec), man, OV_MIN)
    assert res.status == PlanStatus.CONVERGED and res.iterations <= 10
    frames, _ = frames_from_bundle(simulate_bundle(spec, res.timestamps))
    ov = np.array([network_overlap(f) for f in frames])
    assert np.all(ov >= OV_MIN)
    assert res.to_dict()["iterations"] == res.iterations


def test_optimize_band_unreachable_on_coarse_grid():
    res = optimize_frames(SimulatedBackend(SimBackendSpec(native_fps=2.0)),
                          VideoManifest("v", 2.0, 60.0), 0.95)
    assert res.status == PlanStatus.BAND_UNREACHABLE
    assert "error" in res.log[-1]


def test_optimize_iteration_cap():
    backend = SimulatedBackend(SimBackendSpec())
    res = optimize_frames(backend, VideoManifest("v", 60.0, 60.0), 0.90, max_iters=2)
    assert res.status == PlanStatus.ITERATION_CAP and backend.calls == 2


def test_optimize_wraps_backend_errors():
    def broken(ts):
        raise BackendFailure("boom")

    with pytest.raises(BackendFailure) as info:
        optimize_frames(broken, VideoManifest("v", 60.0, 10.0), 0.9)
    assert info.value.iteration == 1


def test_command_backend(tmp_path):
    script = tmp_path / "be.py"
    script.write_text(textwrap.dedent("""
        import sys
        from pipefit.io import write_bundle
        from pipefit.synth import SimBackendSpec, simulate_bundle
        ts = [float(x) for x in open(sys.argv[1]).read().split()]
        write_bundle(sys.argv[2], simulate_bundle(SimBackendSpec(), ts))
    """))
    backend = CommandBackend(f"{sys.executable} {script}")
    bundle = backend([0.0, 0.5, 1.0])
    assert sorted(bundle.timestamps.values()) == [0.0, 0.5, 1.0]
    with pytest.raises(BackendFailure):
        CommandBackend(f"{sys.executable} -c 'raise SystemExit(3)'")([0.0])
    with pytest.raises(BackendFailure):
        CommandBackend("/nonexistent/backend")([0.0])
