"""Pinhole stereo geometry, quaternion-log pose algebra, reprojection.

Conventions, used everywhere:
  - pixel centers at integer coordinates, x = column, y = row;
  - depth is the camera-frame z coordinate (meters, positive in front);
  - disparity maps target (left) pixel (x, y) to source (right) pixel
    (x - d, y); the sign parameter on stereo_pose covers the mirrored rig;
  - Se3Pose(rot_log, trans) maps target-camera points into source-camera
    coordinates: p_s = R p_t + t;
  - rot_log is half-angle scaled: v = (theta/2) * axis, so
    quat_exp(v) = (cos|v|, sin|v| * v/|v|).

quat_exp / quat_log / pose algebra are plain numpy (used by data generation,
evaluation, checkpointed trajectories). reproject builds on tensor ops so it
is differentiable w.r.t. depth and, when the pose entries are Tensors,
w.r.t. the pose as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import NumericsError, ShapeError, Tensor


@dataclass(frozen=True)
class StereoRig:
    """Rectified pair: identical intrinsics, pure horizontal baseline."""

    focal: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0 or self.baseline <= 0:
            raise ValueError("StereoRig: focal and baseline must be positive")
        if self.width < 2 or self.height < 2:
            raise ValueError("StereoRig: degenerate image size")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("StereoRig: principal point outside the image")

    @property
    def fb(self) -> float:
        return self.focal * self.baseline


@dataclass
class Se3Pose:
    rot_log: np.ndarray  # (3,) float64, half-angle axis-angle
    trans: np.ndarray    # (3,) float64, meters

    def __post_init__(self):
        self.rot_log = np.asarray(self.rot_log, dtype=np.float64).reshape(3).copy()
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3).copy()

    def matrix(self) -> np.ndarray:
        return pose_to_matrix(self)


def pose_identity() -> Se3Pose:
    return Se3Pose(np.zeros(3), np.zeros(3))


# ---------------------------------------------------------------------------
# quaternion algebra (w, x, y, z), numpy


def quat_exp(v) -> np.ndarray:
    """(theta/2)*axis -> unit quaternion; Taylor branch below |v| = 1e-6."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = float(np.linalg.norm(v))
    if n < 1e-6:
        w = 1.0 - 0.5 * n * n
        s = 1.0 - n * n / 6.0
    else:
        w = np.cos(n)
        s = np.sin(n) / n
    q = np.array([w, s * v[0], s * v[1], s * v[2]])
    return q / np.linalg.norm(q)


def quat_log(q) -> np.ndarray:
    """Inverse of quat_exp on the principal branch (|v| < pi/2).

    Accepts slightly denormalized input (renormalized within 1e-4) and fixes
    the double-cover by flipping to w >= 0.
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > 1e-4:
        raise ValueError(f"quat_log: quaternion norm {n} too far from 1")
    q = q / n
    if q[0] < 0:
        q = -q
    vn = float(np.linalg.norm(q[1:]))
    if vn == 0.0:
        return np.zeros(3)
    half_theta = float(np.arctan2(vn, q[0]))
    return q[1:] * (half_theta / vn)


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Max-diagonal (Shepperd) extraction; returns w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


# ---------------------------------------------------------------------------
# pose algebra


def pose_compose(a: Se3Pose, b: Se3Pose) -> Se3Pose:
    """(a o b): apply b, then a. p -> R_a (R_b p + t_b) + t_a."""
    qa = quat_exp(a.rot_log)
    qb = quat_exp(b.rot_log)
    q = quat_mul(qa, qb)
    t = quat_to_matrix(qa) @ b.trans + a.trans
    return Se3Pose(quat_log(q), t)


def pose_inverse(p: Se3Pose) -> Se3Pose:
    q = quat_exp(p.rot_log)
    qi = np.array([q[0], -q[1], -q[2], -q[3]])
    t = -(quat_to_matrix(qi) @ p.trans)
    return Se3Pose(quat_log(qi), t)


def pose_to_matrix(p: Se3Pose) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = quat_to_matrix(quat_exp(p.rot_log))
    M[:3, 3] = p.trans
    return M


def pose_from_matrix(M) -> Se3Pose:
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (4, 4) and M.shape != (3, 4):
        raise ValueError(f"pose_from_matrix: need 3x4 or 4x4, got {M.shape}")
    return Se3Pose(quat_log(matrix_to_quat(M[:3, :3])), M[:3, 3])


def stereo_pose(rig: StereoRig, sign: int = 1) -> Se3Pose:
    """Target(left) -> source(right) transform; sign=-1 mirrors the rig."""
    return Se3Pose(np.zeros(3), np.array([-sign * rig.baseline, 0.0, 0.0]))


@dataclass
class Trajectory:
    """Frame-indexed world-from-camera poses, strictly increasing indices."""

    entries: list = field(default_factory=list)  # [(frame_index, Se3Pose)]

    def __post_init__(self):
        idx = [i for i, _ in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("Trajectory: frame indices must strictly increase")

    def __len__(self):
        return len(self.entries)

    def indices(self) -> list:
        return [i for i, _ in self.entries]

    def matrices(self) -> np.ndarray:
        return np.stack([pose_to_matrix(p) for _, p in self.entries])


# ---------------------------------------------------------------------------
# disparity <-> depth (Tensor ops, differentiable)


def disparity_to_depth(d: Tensor, rig: StereoRig, min_disparity: float = 1e-3) -> Tensor:
    """z = f*B / max(d, min_disparity); the floor caps depth at fB/1e-3."""
    return T.div(T.scalar(rig.fb, dtype=d.dtype.type), T.clamp_min(d, min_disparity))


def depth_to_disparity(z: Tensor, rig: StereoRig) -> Tensor:
    if z.data.min() <= 0:
        raise NumericsError("depth_to_disparity: depth must be strictly positive")
    return T.div(T.scalar(rig.fb, dtype=z.dtype.type), z)


# ---------------------------------------------------------------------------
# differentiable reprojection


def _rotation_entries(rot):
    """3x3 rotation entries from a half-angle rot_log given as three floats
    or three (N,1,1,1) Tensors. Tensor entries keep the graph differentiable;
    n^2 is floored at 1e-12 so sqrt never sees 0 (the true gradient there is
    below 1e-6 anyway)."""
    vx, vy, vz = rot
    if isinstance(vx, Tensor):
        n2 = T.clamp_min(vx * vx + vy * vy + vz * vz, 1e-12)
        n = T.sqrt(n2)
        w = T.cos(n)
        s = T.div(T.sin(n), n)
        qx, qy, qz = s * vx, s * vy, s * vz
    else:
        q = quat_exp(np.array([vx, vy, vz]))
        w, qx, qy, qz = (float(c) for c in q)
    return [
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - w * qz), 2 * (qx * qz + w * qy)],
        [2 * (qx * qy + w * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - w * qx)],
        [2 * (qx * qz - w * qy), 2 * (qy * qz + w * qx), 1 - 2 * (qx * qx + qy * qy)],
    ]


def _dot_row(row, X, Y, Z):
    # row entries may be exact floats; skip structural zeros/ones of identity
    terms = []
    for coef, comp in zip(row, (X, Y, Z)):
        if isinstance(coef, float):
            if coef == 0.0:
                continue
            if coef == 1.0:
                terms.append(comp)
                continue
        terms.append(coef * comp)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def reproject(depth: Tensor, rig: StereoRig, pose, min_z: float = 1e-3):
    """Project target pixels through depth and pose into source coordinates.

    depth: (N,1,H,W) positive. pose: Se3Pose, or a pair (rot_entries,
    trans_entries) of three-element sequences whose items are floats or
    (N,1,1,1) Tensors (the pose-network path).

    Returns (grid, valid): grid (N,2,H,W) source pixel coords for
    grid_sample_bilinear; valid (N,1,H,W) constant 0/1 mask flagging samples
    that stay in front of the camera and inside the frame.
    """
    N, C, H, W = depth.shape
    if C != 1:
        raise ShapeError(f"reproject: depth must have one channel, got {C}")
    if np.any(depth.data <= 0):
        raise NumericsError("reproject: depth must be strictly positive")
    dt = depth.dtype
    f, cx, cy = rig.focal, rig.cx, rig.cy

    if isinstance(pose, Se3Pose):
        rot = tuple(float(c) for c in pose.rot_log)
        trans = tuple(float(c) for c in pose.trans)
    else:
        rot, trans = pose
    R = _rotation_entries(rot)

    ux = T.constant(((np.arange(W, dtype=np.float64) - cx) / f)
                    .reshape(1, 1, 1, W).astype(dt))
    uy = T.constant(((np.arange(H, dtype=np.float64) - cy) / f)
                    .reshape(1, 1, H, 1).astype(dt))
    X = ux * depth
    Y = uy * depth
    Z = depth

    def add_t(v, t):
        if isinstance(t, float) and t == 0.0:
            return v
        return v + t

    Xs = add_t(_dot_row(R[0], X, Y, Z), trans[0])
    Ys = add_t(_dot_row(R[1], X, Y, Z), trans[1])
    Zs = add_t(_dot_row(R[2], X, Y, Z), trans[2])
    Zs_safe = T.clamp_min(Zs, min_z)
    xs = f * T.div(Xs, Zs_safe) + cx
    ys = f * T.div(Ys, Zs_safe) + cy
    grid = T.concat_channels([xs, ys])

    # eps absorbs float32 rounding so identity-pose borders stay valid
    eps = 1e-3
    valid = ((Zs.data > min_z)
             & (xs.data >= -eps) & (xs.data <= W - 1.0 + eps)
             & (ys.data >= -eps) & (ys.data <= H - 1.0 + eps)).astype(dt)
    return grid, T.constant(valid)
