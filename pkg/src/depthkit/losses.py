"""Training objectives: SSIM+L1 appearance, edge-aware smoothness, occlusion
regularization, the multi-scale depth total, and the temporal photometric
loss used for pose.

Conventions fixed here:
 - every term is a per-pixel average (masked where a validity mask exists);
 - SSIM uses a 3x3 mean window on replicate-padded inputs with C1 = 0.01^2,
   C2 = 0.03^2;
 - the smoothness term runs on mean-normalized disparity d / mean(d), so it
   penalizes relative (not absolute) roughness, and its image-gradient gate
   averages |dI| over color channels before the exponent;
 - the multi-scale total weights level k by scale_decay^k (level 0 weight 1)
   and divides by the weight sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import StereoRig, disparity_to_depth
from .layers import synthesize_view, upsample_disparity
from .tensor import (
    Tensor,
    avg_pool2d,
    clamp_min,
    constant,
    conv2d,
    exp,
    mean,
    replicate_pad,
    sum_,
)

_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    smoothness: float = 0.1       # weight on the edge-aware term
    occlusion: float = 0.01       # weight on the disparity-magnitude term
    alpha_stereo: float = 0.85    # SSIM/L1 mix for the stereo photometric loss
    alpha_temporal: float = 0.05  # SSIM/L1 mix for the temporal (pose) loss
    scale_decay: float = 0.5      # per-pyramid-level multiplier
    decay_all_terms: bool = True  # False: decay applies to smoothness only

    def __post_init__(self):
        if min(self.smoothness, self.occlusion, self.scale_decay) < 0:
            raise ValueError("loss weights must be >= 0")
        for a in (self.alpha_stereo, self.alpha_temporal):
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"alpha {a} outside [0, 1]")


def _avg3(x: Tensor) -> Tensor:
    return avg_pool2d(replicate_pad(x, 1), 3, 1)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM map in [-1, 1]; local statistics from a 3x3 mean window."""
    mu_a = _avg3(a)
    mu_b = _avg3(b)
    var_a = _avg3(a * a) - mu_a * mu_a
    var_b = _avg3(b * b) - mu_b * mu_b
    cov = _avg3(a * b) - mu_a * mu_b
    num = (2.0 * (mu_a * mu_b) + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return num / den


def masked_mean(x: Tensor, mask: Tensor) -> Tensor:
    """Mean of x over pixels where mask == 1 (mask (N,1,H,W), not differentiated)."""
    count = float(np.sum(mask.data))
    if count == 0.0:
        raise ValueError("empty valid mask: no pixels to average over")
    return sum_(x * mask) * (1.0 / (count * x.shape[1]))


def appearance_loss(target: Tensor, synth: Tensor, mask: Tensor,
                    alpha: float = 0.85) -> Tensor:
    """alpha*(1-SSIM)/2 + (1-alpha)*|target-synth|, averaged over valid pixels."""
    per_px = alpha * ((1.0 - ssim(target, synth)) * 0.5) + (1.0 - alpha) * (target - synth).abs()
    return masked_mean(per_px, mask)


def pose_photometric_loss(target: Tensor, synth: Tensor, mask: Tensor,
                          alpha: float = 0.05) -> Tensor:
    """Temporal photometric loss: same form, L1-favoring mix by default."""
    return appearance_loss(target, synth, mask, alpha)


def _diff_kernel(channels: int, horizontal: bool) -> Tensor:
    """Per-channel forward-difference kernel: out[x] = in[x+1] - in[x]."""
    shape = (channels, channels, 1, 2) if horizontal else (channels, channels, 2, 1)
    k = np.zeros(shape, dtype=np.float32)
    for c in range(channels):
        if horizontal:
            k[c, c, 0, :] = (-1.0, 1.0)
        else:
            k[c, c, :, 0] = (-1.0, 1.0)
    return constant(k)


def _forward_diffs(x: Tensor):
    c = x.shape[1]
    dx = conv2d(x, _diff_kernel(c, True), None, stride=1, padding=0)
    dy = conv2d(x, _diff_kernel(c, False), None, stride=1, padding=0)
    return dx, dy


def smoothness_loss(d: Tensor, image: Tensor) -> Tensor:
    """Edge-aware first-order penalty on mean-normalized disparity."""
    dn = d / clamp_min(mean(d, axes=(2, 3)), 1e-8)
    ddx, ddy = _forward_diffs(dn)
    idx, idy = _forward_diffs(image)
    wx = exp(-mean(idx.abs(), axes=(1,)))
    wy = exp(-mean(idy.abs(), axes=(1,)))
    return mean(ddx.abs() * wx) + mean(ddy.abs() * wy)


def occlusion_loss(d: Tensor) -> Tensor:
    """Mean absolute disparity; pulls unsupported regions toward the background."""
    return mean(d.abs())


def total_depth_loss(pyramid, target: Tensor, source: Tensor, rig: StereoRig,
                     pose, weights: LossWeights | None = None,
                     num_scales: int | None = None) -> Tensor:
    """Multi-scale depth objective.

    pyramid: disparity tensors, level k at 1/2^k resolution in level-pixel
    units. Every level is upsampled to full resolution (converting units)
    before its photometric, smoothness and occlusion terms are evaluated
    against the full-resolution target/source pair. num_scales restricts the
    sum to the first n levels (used by fine-tuning).
    """
    if weights is None:
        weights = LossWeights()
    levels = pyramid if num_scales is None else pyramid[:num_scales]
    if not levels:
        raise ValueError("empty pyramid")
    total = None
    weight_sum = 0.0
    for k, d in enumerate(levels):
        factor = target.shape[2] // d.shape[2]
        d_full = upsample_disparity(d, factor)
        depth = disparity_to_depth(d_full, rig)
        synth, mask = synthesize_view(source, depth, rig, pose)
        lp = appearance_loss(target, synth, mask, weights.alpha_stereo)
        ls = smoothness_loss(d_full, target)
        lo = occlusion_loss(d_full)
        w = weights.scale_decay ** k
        if weights.decay_all_terms:
            term = (lp + weights.smoothness * ls + weights.occlusion * lo) * w
            weight_sum += w
        else:
            term = lp + (weights.smoothness * w) * ls + weights.occlusion * lo
            weight_sum += 1.0
        total = term if total is None else total + term
    return total * (1.0 / weight_sum)
