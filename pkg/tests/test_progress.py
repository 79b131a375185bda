from __future__ import annotations

import numpy as np
import pytest

from conftest import random_rotation
from pipefit.cylinder import CylinderModel
from pipefit.errors import ConfigError, ZeroTruth
from pipefit.geometry import PointCloud, SimilarityTransform
from pipefit.progress import (
    ClassRow,
    GroundTruthEntry,
    PipeClass,
    PipeClassTable,
    build_report,
    classify_kmeans,
    cloud_accuracy,
    detection_quality,
    kmeans_1d,
    length_percent_error,
    radius_rmse,
    read_ground_truth,
)


def test_class_table_validation():
    with pytest.raises(ConfigError):
        PipeClassTable([])
    with pytest.raises(ConfigError):
        PipeClassTable.from_radii_mm([10, 10])
    with pytest.raises(ConfigError):
        PipeClassTable([PipeClass(1, "a", 0.01), PipeClass(1, "b", 0.02)])
    with pytest.raises(ConfigError):
        PipeClassTable.from_dict({"classes": [{"id": 1}]})
    t = PipeClassTable.from_dict({"classes": [{"id": 7, "outer_radius_mm": 50, "material": "PVC"},
                                              {"id": 3, "label": "small", "outer_radius_mm": 10}]})
    assert t.ids == [3, 7]
    assert t.by_id(7).material == "PVC"
    assert PipeClassTable.from_dict(t.to_dict()) == t
    with pytest.raises(KeyError):
        t.by_id(99)


def test_classify_example():
    table = PipeClassTable.from_radii_mm([10, 20, 30])
    assert classify_kmeans(np.array([9.5, 10.4, 19.0, 29.7, 31.0]) / 1000, table) == [1, 1, 2, 3, 3]
    assert classify_kmeans([], table) == []


def test_kmeans_empty_cluster_keeps_seed_and_ties_go_low():
    labels, means = kmeans_1d([1.0, 1.2], [1.0, 5.0, 9.0])
    assert labels.tolist() == [0, 0]
    np.testing.assert_allclose(means, [1.1, 5.0, 9.0])
    labels, _ = kmeans_1d([2.0], [1.0, 3.0])
    assert labels.tolist() == [0]


def test_kmeans_matches_brute_force_fixed_point(rng):
    # at convergence each value sits with its nearest mean, and each mean is its members' average
    x = rng.uniform(0, 10, 60)
    labels, means = kmeans_1d(x, [1.0, 4.0, 8.0])
    np.testing.assert_array_equal(labels, np.argmin(np.abs(x[:, None] - means), axis=1))
    for k in range(3):
        if np.any(labels == k):
            assert means[k] == pytest.approx(x[labels == k].mean())


def test_detection_quality():
    q = detection_quality(54, 4, 0)
    assert q["precision"] == pytest.approx(54 / 58)
    assert q["recall"] == 1.0
    assert q["f_measure"] == pytest.approx(0.964285714, abs=1e-9)
    assert q["accuracy"] is None
    assert detection_quality(54, 4, 0, tn=2)["accuracy"] == pytest.approx(56 / 60)
    empty = detection_quality(0, 0, 0)
    assert empty["precision"] is None and empty["recall"] is None and empty["f_measure"] is None
    assert detection_quality(0, 3, 2)["f_measure"] is None
    with pytest.raises(ValueError):
        detection_quality(-1, 0, 0)


def test_radius_and_length_metrics():
    assert radius_rmse([1.0, 2.0], [1.0, 4.0]) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ValueError):
        radius_rmse([], [])
    with pytest.raises(ValueError):
        radius_rmse([1.0], [1.0, 2.0])
    assert length_percent_error(0.95, 1.0) == pytest.approx(5.0)
    assert length_percent_error(1.1, 1.0) == pytest.approx(10.0)
    with pytest.raises(ZeroTruth):
        length_percent_error(1.0, 0.0)


def test_cloud_accuracy_registration(rng):
    ref = rng.uniform(-1, 1, (2000, 3))
    tf = SimilarityTransform(0.5, random_rotation(rng), rng.normal(size=3))
    inv_r = tf.rotation.T
    src = ((ref - tf.translation) @ inv_r.T) / tf.scale  # tf maps src back onto ref
    acc = cloud_accuracy(PointCloud(src), PointCloud(ref), correspondences=(src[:10], ref[:10]))
    assert acc.mean_m < 1e-9 and acc.n_used == acc.n_total == 2000
    assert acc.transform.scale == pytest.approx(0.5)
    far = cloud_accuracy(ref + [0.2, 0, 0], ref[:10], cutoff=0.10)
    assert far.n_used < far.n_total
    none = cloud_accuracy(ref[:5] + 5.0, ref)
    assert none.n_used == 0 and np.isnan(none.mean_m)
    sub = cloud_accuracy(ref, ref, subset=[0, 1, 2])
    assert sub.n_total == 3 and "scale" not in sub.to_dict()


def test_read_ground_truth(tmp_path):
    p = tmp_path / "truth.csv"
    p.write_text("pipe_id,true_radius_mm,true_length_m,class_id,x_m,y_m,z_m\n"
                 "a,50,1.5,2,0,0,0\nb,10,0.5,1,,,\n")
    rows = read_ground_truth(p)
    assert rows[0] == GroundTruthEntry("a", 0.05, 1.5, 2, (0.0, 0.0, 0.0))
    assert rows[1].position is None
    bad = tmp_path / "bad.csv"
    bad.write_text("pipe_id,true_radius_mm,true_length_m,class_id\na,x,1,1\n")
    with pytest.raises(ConfigError):
        read_ground_truth(bad)
    zero = tmp_path / "zero.csv"
    zero.write_text("pipe_id,true_radius_mm,true_length_m,class_id\na,10,0,1\n")
    with pytest.raises(ConfigError):
        read_ground_truth(zero)


def pipes_at(specs):
    return [CylinderModel([1, 0, 0], [0, y, 0], r, length) for r, y, length in specs]


def test_build_report_counts_and_errors():
    table = PipeClassTable.from_radii_mm([10, 50, 100])
    pipes = pipes_at([(0.0101, 0.0, 1.0), (0.0498, 1.0, 2.0), (0.0502, 2.0, 1.0), (0.052, 3.0, 1.0)])
    truth = [GroundTruthEntry("t1", 0.010, 1.0, 1, (0, 0, 0)),
             GroundTruthEntry("t2", 0.050, 2.0, 2, (0, 1, 0)),
             GroundTruthEntry("t3", 0.050, 1.25, 2, (0, 2, 0)),
             GroundTruthEntry("t4", 0.100, 3.0, 3, (0, 4, 0))]
    rep = build_report(pipes, table, truth, metadata={"k": 1})
    o = rep.overall
    assert (o["tp"], o["fp"], o["fn"]) == (3, 1, 1)
    assert o["accuracy"] is None and o["tn"] is None
    assert o["f_measure"] == pytest.approx(0.75)
    c2 = rep.classes[1]
    assert c2.detected == 3 and c2.truth_count == 2 and c2.fp == 1
    # pairing by position: y=1 -> t2 (2.0 m), y=2 -> t3 (1.25 m); the pipe at y=3 is the surplus
    assert c2.mean_length_error_pct == pytest.approx((0.0 + 20.0) / 2)
    assert rep.classes[2].fn == 1 and rep.classes[2].radius_rmse_mm is None
    assert rep.metadata == {"k": 1}
    csv = rep.to_csv().splitlines()
    assert csv[0].split(",") == list(ClassRow.FIELDS) and len(csv) == 4
    assert rep.to_dict()["pipes"][0]["class_id"] == 1


def test_build_report_without_positions_pairs_by_radius():
    table = PipeClassTable.from_radii_mm([50])
    pipes = [{"radius_m": 0.051, "length_m": 1.0}, {"radius_m": 0.049, "length_m": 2.0}]
    truth = [GroundTruthEntry("a", 0.0505, 1.0, 1), GroundTruthEntry("b", 0.0495, 2.0, 1)]
    rep = build_report(pipes, table, truth, tn=0)
    assert rep.overall["mean_length_error_pct"] == pytest.approx(0.0)
    assert rep.overall["accuracy"] == 1.0


def test_build_report_without_truth():
    table = PipeClassTable.from_radii_mm([10, 50])
    rep = build_report(pipes_at([(0.011, 0, 2.0), (0.012, 1, 3.0)]), table)
    assert rep.classes[0].detected == 2 and rep.classes[0].total_length_m == pytest.approx(5.0)
    assert rep.classes[1].mean_radius_mm is None
    assert "tp" not in rep.overall
    assert build_report([], table).overall["detected"] == 0
