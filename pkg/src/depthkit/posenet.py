"""Pose regression network: target frame + context frames -> one rigid
transform per context.

The frames are concatenated along channels, reduced by a stride-2 conv stack,
global-average-pooled, and projected by a 1x1 conv to 6 values per context:
3 half-angle rotation-log entries and 3 translation entries in meters. The
rotation channels are scaled by a small constant so early training steps stay
near identity; the final projection initializes to zero, so a fresh network
emits exact identity poses. Rotations are valid by construction (the
exponential of any 3-vector is a unit quaternion), no normalization step.

`pose_forward_tensors` keeps the outputs on the tape as (N,1,1,1) slices in
the (rot_entries, trans_entries) form that `reproject` accepts, so the warp
is differentiable w.r.t. the pose parameters end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Se3Pose
from .tensor import (
    ShapeError,
    Tensor,
    channel_slice,
    concat_channels,
    conv2d,
    mean,
    relu,
)


@dataclass
class PoseNetConfig:
    context_size: int = 3
    conv_widths: tuple = (16, 32, 64, 128)
    in_channels: int = 3
    rot_scale: float = 0.01

    def __post_init__(self):
        self.conv_widths = tuple(int(w) for w in self.conv_widths)
        if self.context_size < 2:
            raise ValueError("context_size must be at least 2")
        if not self.conv_widths or any(w < 1 for w in self.conv_widths):
            raise ValueError("conv widths must be positive")
        if self.rot_scale <= 0:
            raise ValueError("rot_scale must be positive")

    @property
    def n_out(self) -> int:
        return 6 * (self.context_size - 1)


def init_pose_params(config: PoseNetConfig, seed: int) -> dict:
    """He fan-in conv stack, zero biases; zero final projection so the
    network starts at exact identity poses."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict = {}
    cin = config.in_channels * config.context_size
    for i, w in enumerate(config.conv_widths, start=1):
        # 4x4 stride-2 convs halve the size exactly
        std = np.sqrt(2.0 / (cin * 16))
        params[f"conv{i}.w"] = Tensor(
            rng.normal(0.0, std, size=(w, cin, 4, 4)).astype(np.float32),
            requires_grad=True)
        params[f"conv{i}.b"] = Tensor(np.zeros((1, w, 1, 1), np.float32),
                                      requires_grad=True)
        cin = w
    params["head.w"] = Tensor(np.zeros((config.n_out, cin, 1, 1), np.float32),
                              requires_grad=True)
    params["head.b"] = Tensor(np.zeros((1, config.n_out, 1, 1), np.float32),
                              requires_grad=True)
    return params


def _validate(target: Tensor, contexts, config: PoseNetConfig) -> None:
    if len(contexts) != config.context_size - 1:
        raise ShapeError(
            f"expected {config.context_size - 1} context frames, "
            f"got {len(contexts)}")
    if target.shape[1] != config.in_channels:
        raise ShapeError(
            f"expected {config.in_channels} channels, got {target.shape[1]}")
    for c in contexts:
        if c.shape != target.shape:
            raise ShapeError(
                f"context shape {c.shape} != target shape {target.shape}")


def pose_forward_raw(target: Tensor, contexts, params: dict,
                     config: PoseNetConfig | None = None) -> Tensor:
    """(N, 3, H, W) frames -> (N, 6*(context_size-1), 1, 1) head output.
    Rotation channels are NOT yet scaled by rot_scale."""
    cfg = config if config is not None else PoseNetConfig()
    _validate(target, contexts, cfg)
    x = concat_channels([target] + list(contexts))
    for i in range(1, len(cfg.conv_widths) + 1):
        x = relu(conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"],
                        stride=2, padding=1))
    x = mean(x, axes=(2, 3))
    return conv2d(x, params["head.w"], params["head.b"], stride=1, padding=0)


def pose_forward_tensors(target: Tensor, contexts, params: dict,
                         config: PoseNetConfig | None = None) -> list:
    """Differentiable path: one (rot_entries, trans_entries) pair per
    context, each entry an (N, 1, 1, 1) Tensor, directly usable as the pose
    argument of reproject/synthesize_view."""
    cfg = config if config is not None else PoseNetConfig()
    raw = pose_forward_raw(target, contexts, params, cfg)
    out = []
    for i in range(cfg.context_size - 1):
        base = 6 * i
        rot = tuple(channel_slice(raw, base + j, base + j + 1) * cfg.rot_scale
                    for j in range(3))
        trans = tuple(channel_slice(raw, base + 3 + j, base + 4 + j)
                      for j in range(3))
        out.append((rot, trans))
    return out


def pose_forward(target: Tensor, contexts, params: dict,
                 config: PoseNetConfig | None = None) -> list:
    """Evaluation path for a single sample: list of Se3Pose per context."""
    cfg = config if config is not None else PoseNetConfig()
    if target.shape[0] != 1:
        raise ShapeError("pose_forward expects batch size 1; "
                         "use pose_forward_tensors for batches")
    raw = pose_forward_raw(target, contexts, params, cfg)
    vals = raw.data.reshape(cfg.context_size - 1, 6).astype(np.float64)
    return [Se3Pose(rot_log=v[:3] * cfg.rot_scale, trans=v[3:6]) for v in vals]
