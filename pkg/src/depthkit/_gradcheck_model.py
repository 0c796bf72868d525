"""Finite-difference entries for the composed pieces: geometry, layers,
losses, and both networks.

Inputs here are structured, not just random: warp checks pin every sampling
coordinate half a pixel from the bilinear kinks (constant-ish depth plus a
tuned translation), and difference-based losses keep their operands clear of
the abs/relu kinks. The FD oracle re-runs graphs in float64; composite losses
also run their analytic pass in float64 because their per-coordinate
gradients are small differences of larger terms. The two whole-network
parameter checks run float64 end to end with h = 1e-6: random He-initialized
nets always hold some pre-activations near zero, and a larger step walks
them across the relu kink.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .dispnet import DisparityNetConfig, disparity_forward, init_params
from .geometry import StereoRig, disparity_to_depth, reproject
from .gradcheck import projection_loss, rand_signed, rand_tensor, run_check
from .layers import (
    SUBPIXEL_WIDTHS,
    SubpixelBranchParams,
    flip_augment_forward,
    subpixel_upsample,
    synthesize_view,
)
from .losses import (
    appearance_loss,
    occlusion_loss,
    pose_photometric_loss,
    smoothness_loss,
    ssim,
    total_depth_loss,
)
from .posenet import PoseNetConfig, init_pose_params, pose_forward_tensors
from .tensor import Tensor


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


_RIG = StereoRig(focal=8.0, cx=2.5, cy=2.0, baseline=0.5, width=6, height=5)


def _check_disparity_to_depth():
    d = rand_tensor((2, 1, 4, 6), 1.0, 5.0, seed=50)
    return run_check("disparity_to_depth",
                     lambda t: projection_loss(disparity_to_depth(t, _RIG)),
                     [d])


def _check_reproject_depth():
    depth = rand_tensor((1, 1, 5, 6), 2.0, 4.0, seed=51)
    pose = ((0.01, -0.02, 0.005), (0.1, 0.05, 0.02))

    def fn(z):
        grid, _ = reproject(z, _RIG, pose)
        return projection_loss(grid)

    return run_check("reproject_depth", fn, [depth])


def _check_reproject_pose():
    depth = T.constant(np.full((1, 1, 5, 6), 3.0, np.float32))
    rot = rand_signed((3, 1, 1, 1, 1), 0.01, 0.03, seed=52)
    trans = rand_signed((3, 1, 1, 1, 1), 0.05, 0.15, seed=53)

    def fn(r0, r1, r2, t0, t1, t2):
        grid, _ = reproject(depth, _RIG, ((r0, r1, r2), (t0, t1, t2)))
        return projection_loss(grid)

    return run_check("reproject_pose", fn, list(rot) + list(trans))


def _check_synthesize_view_depth():
    # constant-ish depth plus a pure translation keeps every sampled
    # coordinate half a pixel from the bilinear kinks
    z = 4.0
    depth = rand_tensor((1, 1, 5, 6), z - 0.2, z + 0.2, seed=54)
    source = T.constant(rand_tensor((1, 3, 5, 6), 0.05, 0.95, seed=55))
    shift = 0.5 * z / _RIG.focal
    pose = ((0.0, 0.0, 0.0), (shift, shift, 0.0))

    def fn(zz):
        synth, _ = synthesize_view(source, zz, _RIG, pose)
        return projection_loss(synth)

    return run_check("synthesize_view_depth", fn, [depth])


def _check_flip_fusion():
    image = rand_tensor((1, 3, 5, 8), 0.05, 0.95, seed=56)
    w = rand_signed((1, 3, 3, 3), 0.1, 0.5, seed=57)
    b = rand_signed((1, 1, 1, 1), 0.05, 0.2, seed=58)

    def fn(img, ww, bb):
        fused = flip_augment_forward(
            lambda x: T.sigmoid(T.conv2d(x, ww, bb, stride=1, padding=1)),
            img, ramp_fraction=0.3)
        return T.mean(fused)

    return run_check("flip_fusion", fn, [image, w, b])


def _check_subpixel_head():
    r = _rng(59)
    cin = 4
    feats = rand_tensor((1, cin, 3, 4), -1.0, 1.0, seed=60)
    arrays = []
    c = cin
    for width in SUBPIXEL_WIDTHS:
        std = np.sqrt(2.0 / (c * 9))
        arrays.append(r.normal(0, std, (width, c, 3, 3)).astype(np.float32))
        arrays.append(np.zeros((1, width, 1, 1), np.float32))
        c = width
    std = np.sqrt(2.0 / c)
    arrays.append(r.normal(0, std, (4, c, 1, 1)).astype(np.float32))
    arrays.append(np.zeros((1, 4, 1, 1), np.float32))

    def fn(f, *ps):
        convs = [(ps[2 * i], ps[2 * i + 1]) for i in range(len(SUBPIXEL_WIDTHS))]
        out = subpixel_upsample(f, SubpixelBranchParams(convs=convs,
                                                        proj=(ps[-2], ps[-1])))
        return projection_loss(out)

    return run_check("subpixel_head", fn, [feats] + arrays,
                     h=1e-4, max_coords=4, seed=61)


def _check_ssim():
    a = rand_tensor((1, 3, 4, 6), 0.1, 0.9, seed=62)
    b = rand_tensor((1, 3, 4, 6), 0.1, 0.9, seed=63)
    return run_check("ssim", lambda x, y: projection_loss(ssim(x, y)), [a, b])


def _check_appearance_loss():
    target = rand_tensor((1, 3, 4, 6), 0.2, 0.8, seed=64)
    # signed offsets >= 0.05 keep |target - synth| off the abs kink
    synth = np.clip(target + rand_signed(target.shape, 0.05, 0.15, seed=65),
                    0.01, 0.99).astype(np.float32)
    mask = T.constant(np.ones((1, 1, 4, 6), np.float32))
    return run_check(
        "appearance_loss",
        lambda s: appearance_loss(T.constant(target), s, mask),
        [synth], analytic_dtype=np.float64)


def _check_pose_photometric_loss():
    target = rand_tensor((1, 3, 4, 6), 0.2, 0.8, seed=66)
    synth = np.clip(target + rand_signed(target.shape, 0.05, 0.15, seed=67),
                    0.01, 0.99).astype(np.float32)
    mask = T.constant(np.ones((1, 1, 4, 6), np.float32))
    return run_check(
        "pose_photometric_loss",
        lambda s: pose_photometric_loss(T.constant(target), s, mask),
        [synth], analytic_dtype=np.float64)


def _check_smoothness_loss():
    checker = ((np.indices((4, 6)).sum(axis=0) % 2) - 0.5).astype(np.float32)
    d = (3.0 + 0.6 * checker
         + _rng(68).uniform(-0.05, 0.05, (4, 6))).astype(np.float32)
    image = rand_tensor((1, 3, 4, 6), 0.1, 0.9, seed=69)
    return run_check(
        "smoothness_loss",
        lambda t: smoothness_loss(t, T.constant(image)),
        [d[None, None]], analytic_dtype=np.float64)


def _check_occlusion_loss():
    d = rand_tensor((1, 1, 4, 6), 0.5, 2.0, seed=70)
    return run_check("occlusion_loss", occlusion_loss, [d])


def _check_total_depth_loss():
    # disparities structured so every warp coordinate keeps a 0.5 fraction:
    # base near 3.5 full-resolution pixels at every level after upsampling
    rig = StereoRig(focal=16.0, cx=7.5, cy=3.5, baseline=1.0,
                    width=16, height=8)
    target = rand_tensor((1, 3, 8, 16), 0.05, 0.95, seed=71)
    source = rand_tensor((1, 3, 8, 16), 0.05, 0.95, seed=72)
    r = _rng(73)
    pyr = []
    for k in range(4):
        h_k, w_k = 8 >> k, 16 >> k
        checker = (np.indices((h_k, w_k)).sum(axis=0) % 2) - 0.5
        base = 3.5 + 0.1 * checker + r.uniform(-0.02, 0.02, (h_k, w_k))
        pyr.append((base / 2 ** k)[None, None].astype(np.float32))

    def fn(*levels):
        return total_depth_loss(list(levels), T.constant(target),
                                T.constant(source), rig,
                                ((0.0, 0.0, 0.0), (-rig.baseline, 0.0, 0.0)))

    return run_check("total_depth_loss", fn, pyr, h=1e-4, max_coords=4,
                     seed=74, analytic_dtype=np.float64)


def _check_dispnet_params():
    # the whole fixture runs in float64: with a float32 trunk the FD
    # quotient sits right at the tolerance from rounding alone
    cfg = DisparityNetConfig(height=16, width=32)
    params = {k: Tensor(v.data.astype(np.float64), requires_grad=True)
              for k, v in init_params(cfg, seed=75).items()}
    img = Tensor(rand_tensor((1, 3, 16, 32), 0.05, 0.95, seed=76)
                 .astype(np.float64))
    names = ["enc1.w", "dec1.w", "head0.proj.w"]

    def fn(*tensors):
        p = dict(params)
        for name, t in zip(names, tensors):
            p[name] = t
        return T.mean(disparity_forward(img, p, cfg)[0])

    return run_check("dispnet_params", fn, [params[n].data for n in names],
                     h=1e-6, max_coords=4, seed=77,
                     analytic_dtype=np.float64)


def _check_posenet_params():
    # float64 end to end, same reason as the disparity-net check
    cfg = PoseNetConfig(context_size=2, conv_widths=(4, 8))
    params = {k: Tensor(v.data.astype(np.float64), requires_grad=True)
              for k, v in init_pose_params(cfg, seed=78).items()}
    r = _rng(79)
    head_w = np.zeros(params["head.w"].shape)
    head_w[0:3] = r.normal(0, 1e-3, head_w[0:3].shape)
    head_w[5] = r.normal(0, 1e-3, head_w[5].shape)
    head_w[3:5] = r.normal(0, 0.02, head_w[3:5].shape)
    params["head.w"].data[...] = head_w

    z = 4.0
    rig = StereoRig(focal=16.0, cx=7.5, cy=7.5, baseline=0.5,
                    width=16, height=16)
    image = Tensor(rand_tensor((1, 3, 16, 16), 0.05, 0.95, seed=80)
                   .astype(np.float64))
    depth = T.constant(np.full((1, 1, 16, 16), z, np.float64))
    mask_ones = T.constant(np.ones((1, 1, 16, 16), np.float64))

    # center the warp offsets on a 0.5-pixel fraction
    (_, trans0), = pose_forward_tensors(image, [image], params, cfg)
    shift = 0.5 * z / rig.focal
    params["head.b"].data[0, 3, 0, 0] = shift - trans0[0].data.item()
    params["head.b"].data[0, 4, 0, 0] = shift - trans0[1].data.item()

    names = ["conv1.w", "head.w", "head.b"]

    def fn(*tensors):
        p = dict(params)
        for name, t in zip(names, tensors):
            p[name] = t
        (rot, trans), = pose_forward_tensors(image, [image], p, cfg)
        synth, _ = synthesize_view(image, depth, rig, (rot, trans))
        return pose_photometric_loss(image, synth, mask_ones)

    return run_check("posenet_params", fn, [params[n].data for n in names],
                     h=1e-6, max_coords=4, seed=81,
                     analytic_dtype=np.float64)


def model_checks() -> dict:
    """name -> zero-arg callable returning a GradcheckReport."""
    return {
        "disparity_to_depth": _check_disparity_to_depth,
        "reproject_depth": _check_reproject_depth,
        "reproject_pose": _check_reproject_pose,
        "synthesize_view_depth": _check_synthesize_view_depth,
        "flip_fusion": _check_flip_fusion,
        "subpixel_head": _check_subpixel_head,
        "ssim": _check_ssim,
        "appearance_loss": _check_appearance_loss,
        "pose_photometric_loss": _check_pose_photometric_loss,
        "smoothness_loss": _check_smoothness_loss,
        "occlusion_loss": _check_occlusion_loss,
        "total_depth_loss": _check_total_depth_loss,
        "dispnet_params": _check_dispnet_params,
        "posenet_params": _check_posenet_params,
    }
