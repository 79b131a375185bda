from __future__ import annotations

import numpy as np
import pytest

from conftest import random_rotation
from pipefit.camera import CameraView
from pipefit.errors import (
    AlreadyMetric,
    AmbiguousMatch,
    ConfigError,
    DegenerateGeometry,
    IllConditioned,
    InsufficientViews,
    NoTargetsFound,
)
from pipefit.geometry import PointCloud, RigidTransform, UnitState
from pipefit.scale import (
    TargetBoard,
    TargetObservation,
    apply_scale,
    compute_scale,
    correct_eccentricity,
    define_scale,
    detect_and_match,
    detect_target_ellipses,
    label_against_board,
    scale_from_matches,
    triangulate_point,
    view_count_sweep,
)
from pipefit.synth import add_salt_noise, board_views, default_board, render_board, to_arbitrary_frame


@pytest.fixture(scope="module")
def scene():
    board = default_board()
    views = board_views(6, seed=0)
    rendered = {vid: render_board(board, v, v.width, v.height) for vid, v in views.items()}
    return board, views, rendered


def test_board_validation():
    board = default_board()
    assert board.separation() >= 0.08
    with pytest.raises(ConfigError):
        TargetBoard(np.zeros((4, 3)), 0.02)
    with pytest.raises(ConfigError):
        TargetBoard(np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)]), 0.02)
    with pytest.raises(ConfigError):
        TargetBoard(board.centers, 0.0)
    # a regular pentagon repeats its distances
    ang = np.linspace(0, 2 * np.pi, 5, endpoint=False)
    d = {"centers_m": np.column_stack([np.cos(ang), np.sin(ang), np.zeros(5)]).tolist(),
         "circle_radius_m": 0.02}
    with pytest.raises(ConfigError):
        TargetBoard.from_dict(d)
    assert TargetBoard.from_dict(d, allow_symmetric=True).separation() < 1e-9
    with pytest.raises(ConfigError):
        TargetBoard.from_dict({**d, "extra": 1}, allow_symmetric=True)
    back = TargetBoard.from_dict(board.to_dict())
    np.testing.assert_array_equal(back.centers, board.centers)


def test_compute_scale_recovers_similarity(rng):
    p = rng.normal(size=(5, 3))
    q = (p @ random_rotation(rng).T) / 3.7 + rng.normal(size=3)
    assert compute_scale(p, q) == pytest.approx(3.7, rel=1e-12)
    with pytest.raises(DegenerateGeometry):
        compute_scale(p, np.ones((5, 3)))
    with pytest.raises(DegenerateGeometry):
        compute_scale(p[:1], q[:1])


def test_apply_scale():
    cloud = PointCloud(np.ones((3, 3)))
    out = apply_scale(cloud, 2.5)
    assert out.unit_state == UnitState.METRIC
    np.testing.assert_allclose(out.points, 2.5)
    with pytest.raises(AlreadyMetric):
        apply_scale(out, 2.0)
    with pytest.raises(ValueError):
        apply_scale(cloud, 0.0)


def test_eccentricity_correction_is_exact(scene):
    board, views, rendered = scene
    for vid, r in rendered.items():
        for k, e in enumerate(r.ellipses):
            ob = TargetObservation(vid, e)
            c = correct_eccentricity(ob, views[vid], board.circle_radius_m, [0, 0, 1])
            np.testing.assert_allclose(c, r.centers_px[k], atol=1e-6)
    bias = max(np.linalg.norm(e.center - r.centers_px[k])
               for r in rendered.values() for k, e in enumerate(r.ellipses))
    assert bias > 0.01


def test_eccentricity_degenerate_normal_keeps_center(scene):
    board, views, rendered = scene
    e = rendered["v000"].ellipses[0]
    c = correct_eccentricity(TargetObservation("v000", e), views["v000"], 0.02, None)
    np.testing.assert_array_equal(c, e.center)


def test_triangulate_point(scene, rng):
    _, views, _ = scene
    x = np.array([0.03, -0.02, 0.01])
    vs = list(views.values())
    px = np.array([v.project(x)[0] for v in vs])
    est, rms = triangulate_point(vs, px)
    np.testing.assert_allclose(est, x, atol=1e-10)
    assert rms < 1e-8
    with pytest.raises(InsufficientViews):
        triangulate_point(vs[:1], px[:1])
    twin = CameraView(vs[0].view_id, vs[0].rotation, vs[0].center + 1e-6, vs[0].intrinsics)
    with pytest.raises(IllConditioned):
        triangulate_point([vs[0], twin], np.vstack([px[0], twin.project(x)[0]]))


def test_detect_target_ellipses(scene):
    _, _, rendered = scene
    r = rendered["v001"]
    found = detect_target_ellipses(r.image)
    assert len(found) == 5
    for e in found:
        assert min(np.linalg.norm(e.center - t.center) for t in r.ellipses) < 0.05
    with pytest.raises(NoTargetsFound):
        detect_target_ellipses(np.full((50, 50), 100, np.uint8))
    with pytest.raises(ValueError):
        detect_target_ellipses(np.zeros((4, 4, 3)))


def test_labels_match_board(scene):
    board, views, rendered = scene
    images = {vid: r.image for vid, r in rendered.items()}
    matched = detect_and_match(images, views, board)
    assert sorted(matched) == sorted(views)
    for vid, obs in matched.items():
        assert sorted(ob.target_index for ob in obs) == [1, 2, 3, 4, 5]
        for ob in obs:
            truth = rendered[vid].ellipses[ob.target_index - 1].center
            assert np.linalg.norm(ob.ellipse.center - truth) < 0.05


def test_label_against_board_permuted(rng):
    board = default_board()
    tf = RigidTransform(random_rotation(rng), rng.normal(size=3))
    order = [3, 0, 4, 1, 2]
    pts = {10 + k: tf.apply(board.centers[j]) * 0.25 for k, j in enumerate(order)}
    labels = label_against_board(pts, board)
    assert labels == {10 + k: j + 1 for k, j in enumerate(order)}


def test_define_scale_arbitrary_frame(scene, rng):
    board, views, rendered = scene
    tf = RigidTransform(random_rotation(rng), rng.normal(size=3))
    arb = to_arbitrary_frame(views, 3.2, tf)
    images = {vid: add_salt_noise(r.image, 0.002, seed=1) for vid, r in rendered.items()}
    res = define_scale(images, arb, board)
    assert res.scale == pytest.approx(3.2, rel=1e-3)
    assert res.eccentricity_corrected and len(res.views_used) == 6
    d = res.to_dict()
    assert set(d["per_target_reprojection_rms_px"]) == {"1", "2", "3", "4", "5"}
    assert abs(abs(res.plane_normal @ tf.rotation[:, 2]) - 1) < 1e-4


def test_uncorrected_scale_is_biased(scene):
    board, views, rendered = scene
    matched = detect_and_match({vid: r.image for vid, r in rendered.items()}, views, board)
    corrected = scale_from_matches(matched, views, board, True).scale
    plain = scale_from_matches(matched, views, board, False).scale
    assert abs(corrected - 1.0) < abs(plain - 1.0)


def test_sweep_needs_enough_views(scene):
    board, views, rendered = scene
    matched = detect_and_match({vid: r.image for vid, r in rendered.items()}, views, board)
    with pytest.raises(InsufficientViews):
        view_count_sweep(matched, views, board, [10], n_combinations=1)
    rows = view_count_sweep(matched, views, board, [2, 6], n_combinations=3, noise_px=0.1)
    assert [r.k for r in rows] == [2, 6]
    assert all(r.n_ok + r.n_failed == 3 for r in rows)


def test_single_view_is_insufficient(scene):
    board, views, rendered = scene
    with pytest.raises(InsufficientViews):
        define_scale({"v000": rendered["v000"].image}, views, board)


def test_symmetric_board_is_ambiguous():
    ang = np.linspace(0, 2 * np.pi, 5, endpoint=False)
    d = {"centers_m": np.column_stack([np.cos(ang), np.sin(ang), np.zeros(5)]).tolist(),
         "circle_radius_m": 0.02}
    board = TargetBoard.from_dict(d, allow_symmetric=True)
    with pytest.raises(AmbiguousMatch):
        label_against_board({k: c * 0.5 for k, c in enumerate(board.centers)}, board)
