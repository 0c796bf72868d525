"""Depth-map error metrics and trajectory drift metrics.

Depth metrics follow the usual monocular-depth evaluation protocol: ground
truth restricted to a (min_depth, cap) range, predictions clamped into it,
ratio thresholds applied with STRICT inequality (max(pred/gt, gt/pred) <
1.25**i), per-image values averaged over an evaluation set.

Trajectory drift follows the odometry protocol: for every start frame and
every requested segment length, the endpoint is the first frame whose
accumulated ground-truth arc length reaches the target; the relative-pose
error between prediction and ground truth over that segment yields a
translational drift as a percentage of segment length and a rotational drift
in degrees per 100 meters; both are flat means over all segments. Segment
lengths a short trajectory cannot realize are dropped and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import Trajectory
from .tensor import Tensor

DRIFT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass
class TrajectoryMetrics:
    t_rel: float            # translational drift, percent of segment length
    r_rel: float            # rotational drift, degrees per 100 m
    n_segments: int
    lengths_evaluated: tuple
    truncated: bool         # some requested lengths had no valid segment

    def as_dict(self) -> dict:
        return {
            "t_rel": float(self.t_rel),
            "r_rel": float(self.r_rel),
            "n_segments": int(self.n_segments),
            "lengths_evaluated": ",".join(
                f"{v:g}" for v in self.lengths_evaluated),
            "truncated": int(self.truncated),
        }


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def depth_metrics(pred, gt, cap: float = 80.0,
                  min_depth: float = 1e-3) -> DepthMetrics:
    """Errors of pred against gt over pixels with min_depth < gt < cap;
    pred is clamped to [min_depth, cap] first."""
    p = _as_array(pred)
    g = _as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    valid = (g > min_depth) & (g < cap)
    if not valid.any():
        raise ValueError("depth_metrics: no valid ground-truth pixels")
    g = g[valid]
    p = np.clip(p[valid], min_depth, cap)

    diff = g - p
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def average_metrics(per_image) -> DepthMetrics:
    """Field-wise mean of per-image metrics (evaluation-set aggregation)."""
    per_image = list(per_image)
    if not per_image:
        raise ValueError("average_metrics: empty input")
    return DepthMetrics(*[
        float(np.mean([getattr(m, f.name) for m in per_image]))
        for f in fields(DepthMetrics)])


def median_scale(pred, gt, mask=None) -> float:
    """median(gt) / median(pred): the scale aligning a scale-ambiguous
    prediction to ground truth before depth_metrics."""
    p = _as_array(pred)
    g = _as_array(gt)
    if mask is not None:
        m = _as_array(mask) > 0
        p, g = p[m], g[m]
    if p.size == 0 or g.size == 0:
        raise ValueError("median_scale: empty overlap")
    mp = float(np.median(p))
    if mp == 0.0:
        raise ValueError("median_scale: median of prediction is zero")
    return float(np.median(g)) / mp


# ---------------------------------------------------------------------------
# trajectory drift


def _rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def trajectory_drift(pred: Trajectory, gt: Trajectory,
                     lengths=DRIFT_LENGTHS) -> TrajectoryMetrics:
    """Relative-pose drift of pred against gt, averaged over all start
    frames and all realizable segment lengths."""
    if len(pred) != len(gt):
        raise ValueError(
            f"trajectory length mismatch: pred {len(pred)} vs gt {len(gt)}")
    if pred.indices() != gt.indices():
        raise ValueError("trajectories are not index-aligned")
    if len(gt) < 2:
        raise ValueError("need at least two poses")

    pm = pred.matrices()
    gm = gt.matrices()
    centers = gm[:, :3, 3]
    steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(steps)])

    t_errs = []
    r_errs = []
    lengths_hit = []
    for L in lengths:
        if L <= 0:
            raise ValueError("segment lengths must be positive")
        hit = False
        # first index whose accumulated gt arc length reaches cum[i] + L
        ends = np.searchsorted(cum, cum + float(L), side="left")
        for i, j in enumerate(ends):
            if j >= len(cum):
                continue
            seg_len = cum[j] - cum[i]
            if seg_len <= 0.0:
                continue
            rel_gt = np.linalg.inv(gm[i]) @ gm[j]
            rel_pred = np.linalg.inv(pm[i]) @ pm[j]
            err = np.linalg.inv(rel_gt) @ rel_pred
            t_errs.append(np.linalg.norm(err[:3, 3]) / seg_len * 100.0)
            r_errs.append(np.degrees(_rotation_angle(err[:3, :3]))
                          / seg_len * 100.0)
            hit = True
        if hit:
            lengths_hit.append(float(L))

    if not t_errs:
        raise ValueError(
            "trajectory too short for every requested segment length")
    return TrajectoryMetrics(
        t_rel=float(np.mean(t_errs)),
        r_rel=float(np.mean(r_errs)),
        n_segments=len(t_errs),
        lengths_evaluated=tuple(lengths_hit),
        truncated=len(lengths_hit) < len(tuple(lengths)),
    )
