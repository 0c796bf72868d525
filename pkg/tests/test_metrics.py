"""Metric-module oracles: every expected number here is derived by hand."""

import numpy as np
import pytest

from depthkit.geometry import Se3Pose, Trajectory, pose_compose, pose_identity
from depthkit.metrics import (
    DepthMetrics,
    TrajectoryMetrics,
    average_metrics,
    depth_metrics,
    median_scale,
    trajectory_drift,
)


def _rand_depth(seed, lo=1.0, hi=40.0, shape=(1, 1, 8, 12)):
    r = np.random.Generator(np.random.PCG64(seed))
    return r.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# depth metrics


def test_perfect_prediction():
    gt = _rand_depth(0)
    m = depth_metrics(gt, gt)
    assert (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log) == (0, 0, 0, 0)
    assert (m.delta1, m.delta2, m.delta3) == (1, 1, 1)


def test_double_prediction():
    gt = _rand_depth(1, lo=1.0, hi=39.0)  # 2*gt stays below the 80 m cap
    m = depth_metrics(2.0 * gt, gt)
    assert m.abs_rel == pytest.approx(1.0, abs=1e-12)
    # ratio 2 exceeds 1.25**3 = 1.953125 everywhere
    assert (m.delta1, m.delta2, m.delta3) == (0, 0, 0)


def test_four_vs_five_hand_values():
    gt = np.full((1, 1, 4, 4), 4.0)
    pred = np.full((1, 1, 4, 4), 5.0)
    m = depth_metrics(pred, gt)
    assert m.abs_rel == pytest.approx(0.25, abs=1e-12)
    assert m.sq_rel == pytest.approx(0.25, abs=1e-12)
    assert m.rmse == pytest.approx(1.0, abs=1e-12)
    assert m.rmse_log == pytest.approx(np.log(1.25), abs=1e-12)
    # 5/4 = 1.25 is NOT < 1.25: strict inequality keeps the boundary out
    assert m.delta1 == 0.0
    assert m.delta2 == 1.0
    assert m.delta3 == 1.0


def test_gt_range_mask():
    gt = np.array([[[[0.0005, 4.0], [100.0, 4.0]]]])
    pred = np.array([[[[50.0, 4.0], [50.0, 8.0]]]])
    # only the two gt==4 pixels are evaluated
    m = depth_metrics(pred, gt)
    assert m.abs_rel == pytest.approx((0.0 + 1.0) / 2, abs=1e-12)


def test_no_valid_pixels_raises():
    gt = np.full((1, 1, 2, 2), 100.0)
    with pytest.raises(ValueError):
        depth_metrics(gt, gt)


def test_prediction_clamped_to_range():
    gt = np.full((1, 1, 2, 2), 40.0)
    pred = np.full((1, 1, 2, 2), 1e4)  # clamps to 80
    m = depth_metrics(pred, gt)
    assert m.rmse == pytest.approx(40.0, abs=1e-9)
    pred_low = np.full((1, 1, 2, 2), 1e-9)  # clamps to 1e-3
    m2 = depth_metrics(pred_low, gt)
    assert m2.rmse == pytest.approx(40.0 - 1e-3, abs=1e-9)


def test_pixel_permutation_invariance():
    r = np.random.Generator(np.random.PCG64(3))
    gt = _rand_depth(4).ravel()
    pred = gt * r.uniform(0.7, 1.4, size=gt.shape)
    perm = r.permutation(gt.size)
    a = depth_metrics(pred.reshape(1, 1, 8, 12), gt.reshape(1, 1, 8, 12))
    b = depth_metrics(pred[perm].reshape(1, 1, 8, 12),
                      gt[perm].reshape(1, 1, 8, 12))
    for f in ("abs_rel", "sq_rel", "rmse", "rmse_log",
              "delta1", "delta2", "delta3"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-12)


def test_delta_monotonicity():
    for seed in range(5):
        gt = _rand_depth(seed)
        pred = gt * _rand_depth(seed + 100, lo=0.5, hi=2.0)
        m = depth_metrics(pred, gt)
        assert m.delta1 <= m.delta2 <= m.delta3
        assert 0.0 <= m.delta1 and m.delta3 <= 1.0


def test_average_metrics():
    a = DepthMetrics(0.1, 0.2, 1.0, 0.1, 0.5, 0.6, 0.7)
    b = DepthMetrics(0.3, 0.4, 3.0, 0.3, 0.7, 0.8, 0.9)
    avg = average_metrics([a, b])
    assert avg.abs_rel == pytest.approx(0.2)
    assert avg.delta3 == pytest.approx(0.8)
    with pytest.raises(ValueError):
        average_metrics([])


def test_median_scale():
    gt = _rand_depth(5)
    assert median_scale(gt / 2.0, gt) == pytest.approx(2.0, rel=1e-12)
    assert median_scale(gt, gt) == pytest.approx(1.0, rel=1e-12)
    # single outlier does not move the median
    pred = gt.copy().ravel()
    pred[0] = 1e6
    scale_with_outlier = median_scale(pred.reshape(gt.shape), gt)
    assert scale_with_outlier == pytest.approx(median_scale(gt, gt), rel=0.05)


def test_median_scaling_improves_scale_ambiguous_prediction():
    gt = _rand_depth(6)
    pred = 0.5 * gt
    raw = depth_metrics(pred, gt).abs_rel
    scaled = depth_metrics(pred * median_scale(pred, gt), gt).abs_rel
    assert scaled <= raw
    assert scaled == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# trajectory drift


def _straight_line(n, step=1.0, scale=1.0, yaw_per_step=0.0):
    entries = []
    for i in range(n):
        pose = Se3Pose(np.array([0.0, yaw_per_step * i / 2.0, 0.0]),
                       np.array([scale * step * i, 0.0, 0.0]))
        entries.append((i, pose))
    return Trajectory(entries)


def test_identical_trajectories_zero_drift():
    gt = _straight_line(30, step=1.0)
    m = trajectory_drift(gt, gt, lengths=(5.0, 10.0))
    assert m.t_rel == pytest.approx(0.0, abs=1e-12)
    assert m.r_rel == pytest.approx(0.0, abs=1e-12)
    assert not m.truncated


def test_scaled_straight_line_is_one_percent():
    gt = _straight_line(40, step=1.0)
    pred = _straight_line(40, step=1.0, scale=1.01)
    m = trajectory_drift(pred, gt, lengths=(5.0, 10.0, 20.0))
    # every segment endpoint overshoots by exactly 1% of its length
    assert m.t_rel == pytest.approx(1.0, rel=1e-9)
    assert m.r_rel == pytest.approx(0.0, abs=1e-12)
    assert m.lengths_evaluated == (5.0, 10.0, 20.0)


def test_default_lengths_on_metric_scale_trajectory():
    gt = _straight_line(900, step=1.0)
    pred = _straight_line(900, step=1.0, scale=1.01)
    m = trajectory_drift(pred, gt)
    assert m.t_rel == pytest.approx(1.0, rel=1e-9)
    assert m.lengths_evaluated == (100.0, 200.0, 300.0, 400.0,
                                   500.0, 600.0, 700.0, 800.0)


def test_pure_rotation_error_hand_value():
    theta = 0.01  # radians, yaw on the second pose only
    gt = Trajectory([(0, pose_identity()),
                     (1, Se3Pose(np.zeros(3), np.array([1.0, 0.0, 0.0])))])
    pred = Trajectory([(0, pose_identity()),
                       (1, Se3Pose(np.array([0.0, theta / 2.0, 0.0]),
                                   np.array([1.0, 0.0, 0.0])))])
    m = trajectory_drift(pred, gt, lengths=(1.0,))
    assert m.t_rel == pytest.approx(0.0, abs=1e-9)
    assert m.r_rel == pytest.approx(np.degrees(theta) * 100.0, rel=1e-6)
    assert m.n_segments == 1


def test_global_rigid_invariance():
    r = np.random.Generator(np.random.PCG64(7))
    gt = _straight_line(25, step=1.0, yaw_per_step=0.002)
    pred_entries = []
    for i, p in gt.entries:
        jitter = Se3Pose(r.normal(0, 0.002, 3), r.normal(0, 0.02, 3))
        pred_entries.append((i, pose_compose(p, jitter)))
    pred = Trajectory(pred_entries)
    g = Se3Pose(np.array([0.1, -0.2, 0.3]), np.array([5.0, -2.0, 11.0]))
    pred_moved = Trajectory([(i, pose_compose(g, p)) for i, p in pred.entries])
    gt_moved = Trajectory([(i, pose_compose(g, p)) for i, p in gt.entries])
    a = trajectory_drift(pred, gt, lengths=(4.0, 9.0))
    b = trajectory_drift(pred_moved, gt_moved, lengths=(4.0, 9.0))
    assert a.t_rel == pytest.approx(b.t_rel, rel=1e-9, abs=1e-12)
    assert a.r_rel == pytest.approx(b.r_rel, rel=1e-9, abs=1e-12)


def test_short_trajectory_flagged():
    gt = _straight_line(6, step=1.0)  # total path 5 m
    pred = _straight_line(6, step=1.0, scale=1.01)
    m = trajectory_drift(pred, gt, lengths=(2.0, 4.0, 8.0))
    assert m.truncated
    assert m.lengths_evaluated == (2.0, 4.0)
    assert m.t_rel == pytest.approx(1.0, rel=1e-9)


def test_trajectory_too_short_raises():
    gt = _straight_line(3, step=0.1)
    with pytest.raises(ValueError):
        trajectory_drift(gt, gt, lengths=(100.0,))


def test_mismatched_trajectories_raise():
    a = _straight_line(5)
    b = _straight_line(6)
    with pytest.raises(ValueError):
        trajectory_drift(a, b)
    c = Trajectory([(i + 1, p) for i, p in _straight_line(5).entries])
    with pytest.raises(ValueError):
        trajectory_drift(a, c)


def test_metrics_as_dict():
    m = depth_metrics(_rand_depth(9), _rand_depth(9))
    d = m.as_dict()
    assert set(d) == {"abs_rel", "sq_rel", "rmse", "rmse_log",
                      "delta1", "delta2", "delta3"}
    t = TrajectoryMetrics(1.0, 0.5, 10, (5.0,), False)
    td = t.as_dict()
    assert td["t_rel"] == 1.0 and td["truncated"] == 0
