"""Differentiable building blocks: sub-pixel disparity heads, flip fusion,
view synthesis, image pyramids.

All functions are pure given parameters and record onto the active
ComputationTape through the tensor-core ops they call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import StereoRig, reproject
from .tensor import (
    Tensor,
    avg_pool2d,
    constant,
    conv2d,
    grid_sample_bilinear,
    hflip,
    pixel_shuffle,
    relu,
    sigmoid,
    upsample2x_nearest,
)


# ---------------------------------------------------------------------------
# sub-pixel disparity head


@dataclass
class SubpixelBranchParams:
    """Four 3x3 convs (widths 32, 32, 32, 16, ReLU after each) and a final
    1x1 projection to r*r channels that pixel-shuffles into an r-times-finer
    single-channel map."""

    convs: list   # [(weight, bias)] * 4, 3x3
    proj: tuple   # (weight, bias), 1x1 -> r*r channels
    r: int = 2


SUBPIXEL_WIDTHS = (32, 32, 32, 16)


def subpixel_upsample(features: Tensor, params: SubpixelBranchParams) -> Tensor:
    """features (N, C, H, W) -> (N, 1, r*H, r*W), values in (0, 1)."""
    x = features
    for w, b in params.convs:
        x = relu(conv2d(x, w, b, stride=1, padding=1))
    x = conv2d(x, params.proj[0], params.proj[1], stride=1, padding=0)
    x = sigmoid(x)
    return pixel_shuffle(x, params.r)


# ---------------------------------------------------------------------------
# flip-augmentation fusion


def flip_fusion_weights(width: int, ramp_fraction: float = 0.05) -> np.ndarray:
    """Column weights w for the flipped-back estimate, shape (1, 1, 1, W).

    w(0) = 1 (the direct pass never saw the left border's stereo match),
    ramps to 0.5 over ramp_fraction*W columns, mirrored so w(W-1) = 0.
    Satisfies w(x) + w(W-1-x) == 1, which makes the fused output exactly
    flip-equivariant.
    """
    n = max(1, int(round(ramp_fraction * width)))
    x = np.arange(width, dtype=np.float64)
    w = 0.5 + 0.5 * np.maximum(0.0, 1.0 - x / n) - 0.5 * np.maximum(0.0, 1.0 - (width - 1 - x) / n)
    return w.reshape(1, 1, 1, width).astype(np.float32)


def _fuse_one(direct: Tensor, flipped: Tensor, ramp_fraction: float) -> Tensor:
    flipped_back = hflip(flipped)
    w = constant(flip_fusion_weights(direct.shape[3], ramp_fraction))
    return w * flipped_back + (1.0 - w) * direct


def flip_augment_forward(forward_fn, image: Tensor, ramp_fraction: float = 0.05):
    """Run forward_fn on the image and its mirror, fuse the two estimates.

    Both passes land on the same tape, so gradients flow through both: this
    is a trainable layer, not post-processing. forward_fn may return one
    disparity tensor or a pyramid list; the fused result has the same form.
    """
    direct = forward_fn(image)
    flipped = forward_fn(hflip(image))
    if isinstance(direct, Tensor):
        return _fuse_one(direct, flipped, ramp_fraction)
    return [_fuse_one(d, f, ramp_fraction) for d, f in zip(direct, flipped)]


# ---------------------------------------------------------------------------
# view synthesis and pyramids


def synthesize_view(source: Tensor, depth: Tensor, rig: StereoRig, pose):
    """Backward-warp the source image into the target frame.

    Returns (synthesized (N, C, H, W), valid_mask (N, 1, H, W)); the mask
    flags samples that land in-frame and in front of the camera.
    Differentiable w.r.t. depth, and w.r.t. pose when pose entries are
    tensors.
    """
    grid, mask = reproject(depth, rig, pose)
    return grid_sample_bilinear(source, grid), mask


def downsample_pyramid(image: Tensor, levels: int = 4) -> list:
    """[image, 2x2-mean(image), ...]; level k is pooled k times."""
    pyr = [image]
    for _ in range(levels - 1):
        pyr.append(avg_pool2d(pyr[-1], 2, 2))
    return pyr


def upsample_disparity(d: Tensor, factor: int) -> Tensor:
    """Nearest-upsample a level disparity to full resolution and convert its
    values from level pixels to full-resolution pixels (multiply by factor)."""
    if factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    out = d
    f = factor
    while f > 1:
        out = upsample2x_nearest(out)
        f //= 2
    if factor > 1:
        out = out * float(factor)
    return out
