"""Encoder-decoder disparity network with skip connections and four
pyramid-scale heads.

The encoder halves resolution at every stride-2 stage; the decoder walks back
up with nearest-upsample + 3x3 conv over the concatenation with the matching
encoder activation. Pyramid level k (k = 0 full resolution, then 1/2, 1/4,
1/8) is emitted by a head that upsamples 2x from the features one stage
coarser, either with a sub-pixel convolution branch or with nearest-resize +
conv (the ablation baseline). Level-k values are in level-k pixel units,
strictly inside (0, d_max_fraction * level_width).

Parameters live in a flat name -> Tensor dict so they serialize directly.
The network is fully convolutional: the same dict runs at any resolution
divisible by 2**len(encoder_widths); `at_resolution` rebuilds the config.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .layers import SUBPIXEL_WIDTHS, SubpixelBranchParams, subpixel_upsample
from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    relu,
    sigmoid,
    upsample2x_nearest,
)

HEAD_MODES = ("subpixel", "resize")


@dataclass
class DisparityNetConfig:
    height: int = 64
    width: int = 128
    encoder_widths: tuple = (16, 32, 64, 128)
    levels: int = 4
    d_max_fraction: float = 0.3
    head_mode: str = "subpixel"
    in_channels: int = 3

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if len(self.encoder_widths) < self.levels:
            raise ValueError(
                f"need at least {self.levels} encoder widths, "
                f"got {len(self.encoder_widths)}")
        if any(w < 1 for w in self.encoder_widths):
            raise ValueError("encoder widths must be positive")
        s = 1 << len(self.encoder_widths)
        if self.height % s or self.width % s:
            raise ValueError(
                f"input {self.height}x{self.width} not divisible by {s}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if not 0.0 < self.d_max_fraction <= 1.0:
            raise ValueError("d_max_fraction must be in (0, 1]")

    def d_max(self, level: int) -> float:
        """Upper disparity bound at a pyramid level, in level pixels."""
        return self.d_max_fraction * (self.width >> level)


def at_resolution(config: DisparityNetConfig, height: int,
                  width: int) -> DisparityNetConfig:
    """Same network at a different input size (fully convolutional)."""
    return replace(config, height=height, width=width)


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32)


def _add_conv(params: dict, rng, name: str, cout: int, cin: int, k: int) -> None:
    params[name + ".w"] = Tensor(_he_conv(rng, cout, cin, k), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros((1, cout, 1, 1), np.float32),
                                 requires_grad=True)


def _head_in_channels(config: DisparityNetConfig, k: int) -> int:
    widths = config.encoder_widths
    if k + 1 == len(widths):
        return widths[-1]      # deepest encoder stage, no decoder conv above it
    return widths[k]           # dec_{k+1} output width


def init_params(config: DisparityNetConfig, seed: int) -> dict:
    """He fan-in normal conv weights, zero biases, keyed by layer name."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict = {}
    widths = config.encoder_widths
    cin = config.in_channels
    for i, w in enumerate(widths, start=1):
        # 4x4 stride-2 convs halve the size exactly
        _add_conv(params, rng, f"enc{i}", w, cin, 4)
        cin = w
    for j in range(len(widths) - 1, 0, -1):
        # upsampled deeper features (widths[j] ch) concatenated with skip j
        _add_conv(params, rng, f"dec{j}", widths[j - 1],
                  widths[j] + widths[j - 1], 3)
    for k in range(config.levels):
        cin = _head_in_channels(config, k)
        for j, w in enumerate(SUBPIXEL_WIDTHS, start=1):
            _add_conv(params, rng, f"head{k}.conv{j}", w, cin, 3)
            cin = w
        if config.head_mode == "subpixel":
            _add_conv(params, rng, f"head{k}.proj", 4, cin, 1)
        else:
            _add_conv(params, rng, f"head{k}.proj", 1, cin, 3)
    return params


def param_count(params: dict) -> int:
    return sum(int(np.prod(t.shape)) for t in params.values())


def _head_forward(src: Tensor, params: dict, k: int, mode: str) -> Tensor:
    """(N, C, h, w) features -> (N, 1, 2h, 2w) values in (0, 1)."""
    convs = [(params[f"head{k}.conv{j}.w"], params[f"head{k}.conv{j}.b"])
             for j in range(1, len(SUBPIXEL_WIDTHS) + 1)]
    proj = (params[f"head{k}.proj.w"], params[f"head{k}.proj.b"])
    if mode == "subpixel":
        return subpixel_upsample(src, SubpixelBranchParams(convs=convs, proj=proj))
    x = src
    for w, b in convs:
        x = relu(conv2d(x, w, b, stride=1, padding=1))
    x = upsample2x_nearest(x)
    return sigmoid(conv2d(x, proj[0], proj[1], stride=1, padding=1))


def disparity_forward(image: Tensor, params: dict,
                      config: DisparityNetConfig | None = None) -> list:
    """Image (N, 3, H, W) -> pyramid [level0 .. level3], level k sized
    (N, 1, H/2^k, W/2^k) with values in (0, d_max_fraction * W/2^k)."""
    cfg = config if config is not None else DisparityNetConfig()
    N, C, H, W = image.shape
    if C != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {C}")
    if (H, W) != (cfg.height, cfg.width):
        raise ShapeError(
            f"input {H}x{W} does not match config {cfg.height}x{cfg.width}")
    widths = cfg.encoder_widths
    E = len(widths)

    feats = {}
    x = image
    for i in range(1, E + 1):
        x = relu(conv2d(x, params[f"enc{i}.w"], params[f"enc{i}.b"],
                        stride=2, padding=1))
        feats[i] = x

    dec = {E: feats[E]}
    for j in range(E - 1, 0, -1):
        up = upsample2x_nearest(dec[j + 1])
        merged = concat_channels([up, feats[j]])
        dec[j] = relu(conv2d(merged, params[f"dec{j}.w"], params[f"dec{j}.b"],
                             stride=1, padding=1))

    pyramid = []
    for k in range(cfg.levels):
        unit = _head_forward(dec[k + 1], params, k, cfg.head_mode)
        pyramid.append(unit * float(cfg.d_max(k)))
    return pyramid
