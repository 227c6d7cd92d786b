import pytest
import json
import math
import numpy as np
from pyrflow.data import synth_rigid_scene
from pyrflow.io import SynthConfig
from pyrflow.metrics import (
    MetricReport,
    compute_metrics,
    local_flow_difference,
    merge_reports,
    neighbor_groups,
    project_pinhole,
    search_consistency,
    search_grid,
)


def metrics_oracle(pred, gt):
    n = len(gt)
    epe, strict, relaxed, outlier = 0.0, 0, 0, 0
    for i in range(n):
        error = math.sqrt(sum((pred[i][c] - gt[i][c]) ** 2 for c in range(3)))
        norm = math.sqrt(sum(gt[i][c] ** 2 for c in range(3)))
        relative = error / (norm + 1e-8)
        epe += error
        strict += error < 0.05 or relative < 0.05
        relaxed += error < 0.1 or relative < 0.1
        outlier += error > 0.3 or relative > 0.3
    return epe / n, strict / n, relaxed / n, outlier / n


@pytest.fixture
def intrinsics():
    return np.array([[100.0, 0.0, 50.0], [0.0, 100.0, 40.0], [0.0, 0.0, 1.0]])


def test_identity():
    gt = np.random.default_rng(0).normal(size=(20, 3))
    report = compute_metrics(gt, gt)
    assert report.epe3d == 0.0
    assert report.as3d == 1.0
    assert report.ar3d == 1.0
    assert report.out3d == 0.0
    assert report.count == 20
    assert report.epe2d is None


def test_single_point():
    report = compute_metrics(np.array([[1.04, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    assert report.epe3d == pytest.approx(0.04)
    assert report.as3d == 1.0
    assert report.ar3d == 1.0
    assert report.out3d == 0.0


def test_relative_threshold():
    # 0.2 absolute error is 2 % of a 10 m motion
    report = compute_metrics(np.array([[10.2, 0.0, 0.0]]), np.array([[10.0, 0.0, 0.0]]))
    assert report.as3d == 1.0
    assert report.out3d == 0.0

    report = compute_metrics(np.array([[0.0, 0.5, 0.0]]), np.array([[0.0, 0.0, 0.0]]))
    assert report.as3d == 0.0
    assert report.out3d == 1.0


def test_metrics_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        gt = rng.normal(scale=0.3, size=(n, 3))
        pred = gt + rng.normal(scale=float(rng.uniform(0.01, 0.5)), size=(n, 3))
        report = compute_metrics(pred, gt)
        epe, strict, relaxed, outlier = metrics_oracle(pred.tolist(), gt.tolist())
        assert report.epe3d == pytest.approx(epe, rel=1e-12)
        assert report.as3d == strict
        assert report.ar3d == relaxed
        assert report.out3d == outlier
        assert report.ar3d >= report.as3d


def test_error_never_decreases_epe():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(10, 3))
    pred = gt + rng.normal(scale=0.1, size=(10, 3))
    worse = pred.copy()
    worse[3] += (pred[3] - gt[3]) * 2.0
    assert compute_metrics(worse, gt).epe3d >= compute_metrics(pred, gt).epe3d


def test_mask():
    gt = np.zeros((3, 3))
    pred = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    report = compute_metrics(pred, gt, mask=np.array([1, 0, 1], dtype=np.uint8))
    assert report.epe3d == 0.0
    assert report.count == 2

    empty = compute_metrics(pred, gt, mask=np.zeros(3))
    assert empty.count == 0

    with pytest.raises(ValueError):
        compute_metrics(pred, gt, mask=np.ones(2))


def test_shape_errors():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((3, 3)), np.zeros((4, 3)))

    with pytest.raises(ValueError):
        compute_metrics(np.zeros((3, 3)), np.zeros((3, 3)), with_2d=True)


def test_project_pinhole():
    identity = np.eye(3)
    pixels, valid = project_pinhole(np.array([[0.0, 0.0, 1.0]]), identity)
    assert pixels.tolist() == [[0.0, 0.0]]
    assert valid.tolist() == [True]

    camera = np.array([[100.0, 0.0, 50.0], [0.0, 100.0, 0.0], [0.0, 0.0, 1.0]])
    pixels, _ = project_pinhole(np.array([[1.0, 0.0, 2.0], [1.0, 0.0, 4.0]]), camera)
    assert pixels[0, 0] == pytest.approx(100.0)
    assert pixels[1, 0] - 50.0 == pytest.approx((pixels[0, 0] - 50.0) / 2)

    behind = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, -1.0]])
    pixels, valid = project_pinhole(behind, camera)
    assert valid.tolist() == [False, False]
    assert np.isnan(pixels).all()

    with pytest.raises(ValueError):
        project_pinhole(np.ones((1, 3)), np.eye(2))


def test_2d_metrics(intrinsics):
    positions = np.array([[0.0, 0.0, 2.0], [0.1, 0.2, 3.0], [0.0, 0.0, -1.0]])
    gt = np.array([[0.1, 0.0, 0.0], [0.0, 0.0, 0.5], [0.0, 0.0, 0.0]])

    exact = compute_metrics(gt, gt, intrinsics=intrinsics, positions=positions)
    assert exact.epe2d == 0.0
    assert exact.acc2d == 1.0
    assert exact.count2d == 2

    pred = gt.copy()
    pred[0] += [0.1, 0.0, 0.0]
    report = compute_metrics(pred, gt, intrinsics=intrinsics, positions=positions)
    # 0.1 m at 2 m depth is 5 px with a 100 px focal length
    assert report.epe2d == pytest.approx(2.5)
    assert report.acc2d == 0.5


def test_report_serialization():
    report = MetricReport(0.5, 0.25, 0.75, 0.125, count=8)
    text = report.to_text()
    assert "epe3d: 0.500000" in text
    assert "count: 8" in text
    assert "epe2d" not in text

    record = json.loads(report.to_record(scope="pooled"))
    assert list(record)[0] == "scope"
    assert record["as3d"] == 0.25
    assert record["epe2d"] is None


def test_merge_reports():
    a = MetricReport(1.0, 1.0, 1.0, 0.0, count=1)
    b = MetricReport(4.0, 0.0, 0.0, 1.0, count=3)
    merged = merge_reports([a, b])
    assert merged.epe3d == pytest.approx(3.25)
    assert merged.as3d == pytest.approx(0.25)
    assert merged.count == 4
    assert merged.epe2d is None

    assert merge_reports([]).count == 0


def test_merge_equals_pooled(intrinsics):
    rng = np.random.default_rng(3)
    positions = rng.uniform(-1, 1, size=(30, 3)) + [0.0, 0.0, 4.0]
    gt = rng.normal(scale=0.1, size=(30, 3))
    pred = gt + rng.normal(scale=0.05, size=(30, 3))

    pooled = compute_metrics(pred, gt, intrinsics=intrinsics, positions=positions)
    parts = [
        compute_metrics(pred[s], gt[s], intrinsics=intrinsics, positions=positions[s])
        for s in (slice(0, 12), slice(12, 30))
    ]
    merged = merge_reports(parts)
    for key in ("epe3d", "as3d", "ar3d", "out3d", "epe2d", "acc2d"):
        assert getattr(merged, key) == pytest.approx(getattr(pooled, key))


def test_neighbor_groups():
    positions = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.3, 0, 0], [2.0, 0, 0]])
    indices, valid = neighbor_groups(positions, 2)
    assert indices.tolist() == [[1, 2], [0, 2], [1, 0], [2, 1]]
    assert valid.all()

    _, within = neighbor_groups(positions, 2, radius=0.25)
    expected = [[True, False], [True, True], [True, False], [False, False]]
    assert within.tolist() == expected

    with pytest.raises(ValueError):
        neighbor_groups(positions, 4)


def test_local_flow_difference():
    flow = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    indices = np.array([[1], [0]])
    assert local_flow_difference(flow, indices, np.ones((2, 1), dtype=bool)) == 1.0
    assert local_flow_difference(flow, indices, np.zeros((2, 1), dtype=bool)) == 0.0


def test_search_consistency_rigid_objects():
    # two clusters far apart moving in opposite directions
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 0.1, size=(20, 3))
    b = rng.uniform(0, 0.1, size=(20, 3)) + [1.0, 0.0, 0.0]
    positions = np.concatenate([a, b])
    flow = np.concatenate(
        [np.tile([0.1, 0, 0], (20, 1)), np.tile([-0.1, 0, 0], (20, 1))]
    )

    report = search_consistency(positions, flow, k=30, radius=0.5)
    assert report.radius_difference == 0.0
    assert report.knn_difference > 0.0
    assert report.retained_fraction == pytest.approx(19 / 30)
    assert report.isolated_fraction == 0.0


def test_search_grid():
    rng = np.random.default_rng(5)
    scenes = [(rng.normal(size=(25, 3)), rng.normal(size=(25, 3))) for _ in range(2)]
    grid = search_grid(scenes, [2, 4], [0.5, 1.0, 2.0])
    assert [(r.k, r.radius) for r in grid] == [
        (2, 0.5),
        (2, 1.0),
        (2, 2.0),
        (4, 0.5),
        (4, 1.0),
        (4, 2.0),
    ]
    single = search_consistency(*scenes[0], 4, 1.0)
    other = search_consistency(*scenes[1], 4, 1.0)
    mean = (single.knn_difference + other.knn_difference) / 2
    assert grid[4].knn_difference == pytest.approx(mean)
    for report in grid:
        assert 0.0 <= report.retained_fraction <= 1.0


@pytest.mark.slow
def test_radius_groups_are_more_consistent():
    scenes = [synth_rigid_scene(SynthConfig(seed=seed)) for seed in range(50)]
    reports = [
        search_consistency(pair.pos1, pair.flow, k=32, radius=0.0025)
        for pair in scenes
    ]
    better = sum(r.radius_difference <= r.knn_difference for r in reports)
    assert better >= 0.95 * len(scenes)
