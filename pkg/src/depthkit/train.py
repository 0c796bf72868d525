"""Training and evaluation loops.

Determinism contract: scenes render from fixed seed ranges (train split =
seeds 0..n_train-1, eval split = seeds 10000..10000+n_eval-1 of the family),
every optimization step draws its batch from a generator seeded by (run seed,
global step), and the loss log is written with fixed formatting. A rerun with
the same seed is bit-identical, and a run resumed from a checkpoint continues
exactly where the uninterrupted run would have been, because the sampler
carries no state beyond the step counter and the optimizer state rides in the
checkpoint.

Phases:
  base            stereo photometric + smoothness + occlusion over 4 scales
  flip-fine-tune  same loss through the flip-fusion forward, first 2 scales
  pose            joint: stereo depth loss + photometric consistency of
                  context frames warped through level-0 depth and the
                  predicted poses
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .dispnet import (
    HEAD_MODES,
    DisparityNetConfig,
    at_resolution,
    disparity_forward,
    init_params,
)
from .geometry import (
    Se3Pose,
    StereoRig,
    Trajectory,
    disparity_to_depth,
    pose_compose,
    pose_inverse,
    stereo_pose,
)
from .layers import flip_augment_forward, synthesize_view
from .losses import LossWeights, pose_photometric_loss, total_depth_loss
from .metrics import average_metrics, depth_metrics, trajectory_drift
from .posenet import (
    PoseNetConfig,
    init_pose_params,
    pose_forward,
    pose_forward_tensors,
)
from .synthdata import generate_scene, render_sequence, render_stereo
from .tensor import Tensor

EVAL_SEED_BASE = 10_000
PHASES = ("base", "flip-fine-tune", "pose")


@dataclass
class TrainConfig:
    family: dict
    phase: str = "base"
    epochs: int = 40
    batch_size: int = 4
    lr: float = 5e-4
    lr_decay_every: int = 40      # epochs between halvings
    lr_decay: float = 0.5
    n_train: int = 200
    n_eval: int = 50
    seed: int = 0
    num_scales: int | None = None
    ramp_fraction: float = 0.05
    head_mode: str = "subpixel"
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 0           # epochs; 0 = never
    checkpoint_every: int = 0     # epochs; 0 = final only
    init_from: str | None = None  # warm start: weights only
    resume: bool = False          # continue init_from's epoch/step/opt state
    out_dir: str = "out"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.phase == "flip-fine-tune" and not self.init_from:
            raise ValueError("flip-fine-tune requires init_from (a base "
                             "checkpoint)")
        if self.resume and not self.init_from:
            raise ValueError("resume requires init_from")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over a name -> Tensor dict; state serializes with the params."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mh = self.m[name] / (1 - b1 ** self.t)
            vh = self.v[name] / (1 - b2 ** self.t)
            p.data -= (self.lr * mh / (np.sqrt(vh) + self.eps)).astype(
                p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_entries(self) -> dict:
        out = {"opt.t": np.float32(self.t)}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, entries: dict) -> None:
        self.t = int(entries["opt.t"])
        for k in self.params:
            self.m[k] = entries[f"opt.m.{k}"].astype(np.float32)
            self.v[k] = entries[f"opt.v.{k}"].astype(np.float32)


# ---------------------------------------------------------------------------
# data


@dataclass
class StereoSplit:
    lefts: np.ndarray       # (S, 3, H, W) float32
    rights: np.ndarray
    gt_depths: np.ndarray   # (S, 1, H, W) float32
    rig: StereoRig


def build_stereo_split(family: dict, seeds) -> StereoSplit:
    lefts, rights, depths = [], [], []
    rig = None
    for s in seeds:
        scene = generate_scene(family, int(s))
        pair = render_stereo(scene)
        rig = scene.rig
        lefts.append(pair.left[0])
        rights.append(pair.right[0])
        depths.append(pair.gt_depth[0])
    return StereoSplit(np.stack(lefts), np.stack(rights), np.stack(depths),
                       rig)


def train_seeds(n: int):
    return range(n)


def eval_seeds(n: int):
    return range(EVAL_SEED_BASE, EVAL_SEED_BASE + n)


def step_rng(seed: int, step: int) -> np.random.Generator:
    # stateless sampler: the batch depends only on (seed, step), which makes
    # a resumed run draw exactly what the uninterrupted run would have
    return np.random.Generator(np.random.PCG64([seed, step]))


# ---------------------------------------------------------------------------
# single optimization steps


def _batch(split: StereoSplit, idx) -> tuple:
    left = Tensor(split.lefts[idx])
    right = Tensor(split.rights[idx])
    return left, right


def depth_step(params: dict, netcfg: DisparityNetConfig, opt: Adam,
               split: StereoSplit, cfg: TrainConfig, step: int) -> float:
    idx = step_rng(cfg.seed, step).integers(0, split.lefts.shape[0],
                                            size=cfg.batch_size)
    left, right = _batch(split, idx)
    pose = stereo_pose(split.rig)
    with T.Tape() as tape:
        if cfg.phase == "flip-fine-tune":
            pyr = flip_augment_forward(
                lambda im: disparity_forward(im, params, netcfg),
                left, cfg.ramp_fraction)
        else:
            pyr = disparity_forward(left, params, netcfg)
        loss = total_depth_loss(pyr, left, right, split.rig, pose,
                                cfg.weights, cfg.num_scales)
    opt.zero_grad()
    T.backward(loss, tape)
    opt.step()
    return loss.item()


def pose_step(params: dict, pose_params: dict, netcfg: DisparityNetConfig,
              posecfg: PoseNetConfig, opts, seq, cfg: TrainConfig,
              step: int) -> float:
    frames, rights, rig = seq.frames, seq.rights, seq.rig
    t_max = frames.shape[0] - 1
    idx = step_rng(cfg.seed, step).integers(1, t_max, size=cfg.batch_size)
    target = Tensor(frames[idx])
    right = Tensor(rights[idx])
    contexts = [Tensor(frames[idx - 1]), Tensor(frames[idx + 1])]
    spose = stereo_pose(rig)
    with T.Tape() as tape:
        pyr = disparity_forward(target, params, netcfg)
        loss = total_depth_loss(pyr, target, right, rig, spose, cfg.weights,
                                cfg.num_scales)
        depth0 = disparity_to_depth(pyr[0], rig)
        pose_list = pose_forward_tensors(target, contexts, pose_params,
                                         posecfg)
        for ctx, pose in zip(contexts, pose_list):
            synth, mask = synthesize_view(ctx, depth0, rig, pose)
            loss = loss + pose_photometric_loss(target, synth, mask) \
                * (1.0 / len(contexts))
    for o in opts:
        o.zero_grad()
    T.backward(loss, tape)
    for o in opts:
        o.step()
    return loss.item()


# ---------------------------------------------------------------------------
# evaluation


def predict_disparity(params: dict, netcfg: DisparityNetConfig,
                      images: np.ndarray, flip_aug: bool = False,
                      ramp_fraction: float = 0.05,
                      chunk: int = 16) -> np.ndarray:
    """Level-0 disparity for a stack of images, in full-resolution pixels."""
    outs = []
    for i in range(0, images.shape[0], chunk):
        img = Tensor(images[i:i + chunk])
        if flip_aug:
            d0 = flip_augment_forward(
                lambda im: disparity_forward(im, params, netcfg)[0],
                img, ramp_fraction)
        else:
            d0 = disparity_forward(img, params, netcfg)[0]
        outs.append(d0.data)
    return np.concatenate(outs, axis=0)


def median_disparity_baseline(split: StereoSplit, cap: float = 80.0):
    """Constant prediction at the split's median ground-truth disparity.
    Returns (averaged metrics, the constant disparity)."""
    fb = split.rig.fb
    gt_disp = fb / np.maximum(split.gt_depths, 1e-3)
    d_const = float(np.median(gt_disp))
    base_depth = np.full_like(split.gt_depths[0], fb / max(d_const, 1e-3))
    baseline = average_metrics([
        depth_metrics(base_depth, split.gt_depths[i], cap=cap)
        for i in range(split.gt_depths.shape[0])])
    return baseline, d_const


def evaluate_depth(params: dict, netcfg: DisparityNetConfig,
                   split: StereoSplit, flip_aug: bool = False,
                   ramp_fraction: float = 0.05, cap: float = 80.0) -> dict:
    """Per-image metrics averaged over the split, plus the constant
    median-disparity baseline computed on the same split."""
    disp = predict_disparity(params, netcfg, split.lefts, flip_aug,
                             ramp_fraction)
    fb = split.rig.fb
    per_image = []
    for i in range(disp.shape[0]):
        depth = fb / np.maximum(disp[i], 1e-3)
        per_image.append(depth_metrics(depth, split.gt_depths[i], cap=cap))
    model = average_metrics(per_image)
    baseline, d_const = median_disparity_baseline(split, cap)
    return {"model": model, "baseline": baseline,
            "baseline_disparity": d_const, "disparity": disp}


def predict_trajectory(pose_params: dict, posecfg: PoseNetConfig,
                       frames: np.ndarray) -> Trajectory:
    """Chain per-frame backward poses x_(t -> t-1) from frame 1..T-2 into a
    trajectory for frames 0..T-2, anchored at identity."""
    poses = [Se3Pose(np.zeros(3), np.zeros(3))]
    current = poses[0]
    for t in range(1, frames.shape[0] - 1):
        target = Tensor(frames[t:t + 1])
        contexts = [Tensor(frames[t - 1:t]), Tensor(frames[t + 1:t + 2])]
        back = pose_forward(target, contexts, pose_params, posecfg)[0]
        current = pose_compose(current, back)
        poses.append(current)
    return Trajectory([(i, p) for i, p in enumerate(poses)])


def evaluate_pose(pose_params: dict, posecfg: PoseNetConfig, seq,
                  lengths) -> dict:
    pred = predict_trajectory(pose_params, posecfg, seq.frames)
    n = len(pred)
    gt = Trajectory(seq.trajectory.entries[:n])
    drift = trajectory_drift(pred, gt, lengths=lengths)

    identity = Trajectory([(i, Se3Pose(np.zeros(3), np.zeros(3)))
                           for i in range(n)])
    identity_drift = trajectory_drift(identity, gt, lengths=lengths)

    pred_steps = [np.linalg.norm(
        pose_compose(pose_inverse(pred.entries[i][1]),
                     pred.entries[i + 1][1]).trans)
        for i in range(n - 1)]
    gt_steps = [np.linalg.norm(
        pose_compose(pose_inverse(gt.entries[i][1]),
                     gt.entries[i + 1][1]).trans)
        for i in range(n - 1)]
    return {"drift": drift, "identity_drift": identity_drift,
            "pred": pred, "gt": gt,
            "median_step": float(np.median(pred_steps)),
            "gt_median_step": float(np.median(gt_steps))}


# ---------------------------------------------------------------------------
# checkpoint glue


_META_NET = ("height", "width", "levels", "d_max_fraction", "in_channels")


def checkpoint_entries(params: dict, pose_params, opt: Adam,
                       netcfg: DisparityNetConfig, posecfg, epoch: int,
                       step: int, seed: int) -> dict:
    entries = {f"disp.{k}": v for k, v in params.items()}
    if pose_params is not None:
        entries.update({f"pose.{k}": v for k, v in pose_params.items()})
    entries.update(opt.state_entries())
    entries["__meta.epoch"] = np.float32(epoch)
    entries["__meta.step"] = np.float32(step)
    entries["__meta.seed"] = np.float32(seed)
    for name in _META_NET:
        entries[f"__meta.net.{name}"] = np.float32(getattr(netcfg, name))
    entries["__meta.net.head_mode"] = np.float32(
        HEAD_MODES.index(netcfg.head_mode))
    entries["__meta.net.widths"] = np.asarray(netcfg.encoder_widths,
                                              np.float32)
    if posecfg is not None:
        entries["__meta.pose.context_size"] = np.float32(posecfg.context_size)
        entries["__meta.pose.rot_scale"] = np.float32(posecfg.rot_scale)
        entries["__meta.pose.widths"] = np.asarray(posecfg.conv_widths,
                                                   np.float32)
    return entries


def _f32_clean(x) -> float:
    # checkpoints store floats at f32 precision; 7 significant digits
    # reproduce the originally configured value exactly
    return float(f"{float(x):.7g}")


def net_config_from_entries(entries: dict) -> DisparityNetConfig:
    return DisparityNetConfig(
        height=int(entries["__meta.net.height"]),
        width=int(entries["__meta.net.width"]),
        encoder_widths=tuple(int(w) for w in entries["__meta.net.widths"]),
        levels=int(entries["__meta.net.levels"]),
        d_max_fraction=_f32_clean(entries["__meta.net.d_max_fraction"]),
        head_mode=HEAD_MODES[int(entries["__meta.net.head_mode"])],
        in_channels=int(entries["__meta.net.in_channels"]),
    )


def pose_config_from_entries(entries: dict):
    if "__meta.pose.context_size" not in entries:
        return None
    return PoseNetConfig(
        context_size=int(entries["__meta.pose.context_size"]),
        conv_widths=tuple(int(w) for w in entries["__meta.pose.widths"]),
        rot_scale=_f32_clean(entries["__meta.pose.rot_scale"]),
    )


def split_entries(entries: dict, prefix: str) -> dict:
    plen = len(prefix)
    return {k[plen:]: Tensor(v, requires_grad=True)
            for k, v in entries.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# the training driver


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    halvings = (epoch - 1) // cfg.lr_decay_every
    return cfg.lr * (cfg.lr_decay ** halvings)


def _fmt(x: float) -> str:
    return f"{x:.6e}"


def run_training(cfg: TrainConfig, progress=None) -> dict:
    """Train per cfg; returns dict with params, configs, log lines, and the
    final checkpoint path. Writes train_log.txt and checkpoints in out_dir."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log: list = []

    def emit(line: str) -> None:
        log.append(line)
        if progress is not None:
            progress(line)

    seq = None
    if cfg.phase == "pose":
        seq = render_sequence(cfg.family, seed=cfg.seed)
        split = StereoSplit(seq.frames, seq.rights, seq.gt_depths, seq.rig)
        eval_split = None
        steps_per_epoch = max(1, (seq.frames.shape[0] - 2) // cfg.batch_size)
    else:
        split = build_stereo_split(cfg.family, train_seeds(cfg.n_train))
        eval_split = build_stereo_split(cfg.family, eval_seeds(cfg.n_eval))
        steps_per_epoch = max(1, cfg.n_train // cfg.batch_size)

    h, w = split.lefts.shape[2], split.lefts.shape[3]

    pose_params = None
    posecfg = None
    start_epoch = 0
    step = 0
    saved = None
    if cfg.init_from:
        saved = load_checkpoint(cfg.init_from)
        netcfg = at_resolution(net_config_from_entries(saved), h, w)
        params = split_entries(saved, "disp.")
        posecfg = pose_config_from_entries(saved)
        if posecfg is not None:
            pose_params = split_entries(saved, "pose.")
        if cfg.resume:
            start_epoch = int(saved["__meta.epoch"])
            step = int(saved["__meta.step"])
    else:
        netcfg = DisparityNetConfig(height=h, width=w,
                                    head_mode=cfg.head_mode)
        params = init_params(netcfg, cfg.seed)

    if cfg.phase == "pose" and pose_params is None:
        posecfg = PoseNetConfig()
        pose_params = init_pose_params(posecfg, cfg.seed + 1)

    all_params = dict(params)
    if pose_params is not None and cfg.phase == "pose":
        all_params.update({f"pose/{k}": v for k, v in pose_params.items()})
    opt = Adam(all_params, lr=cfg.lr)
    if cfg.resume and saved is not None and "opt.t" in saved \
            and all(f"opt.m.{k}" in saved for k in all_params):
        opt.load_state(saved)

    emit(f"phase={cfg.phase} resolution={h}x{w} "
         f"steps_per_epoch={steps_per_epoch} seed={cfg.seed}")

    final_epoch = cfg.epochs
    for epoch in range(start_epoch + 1, final_epoch + 1):
        opt.lr = _lr_at(cfg, epoch)
        running = 0.0
        t0 = time.perf_counter()
        for _ in range(steps_per_epoch):
            step += 1
            if cfg.phase == "pose":
                loss = pose_step(params, pose_params, netcfg, posecfg,
                                 [opt], seq, cfg, step)
            else:
                loss = depth_step(params, netcfg, opt, split, cfg, step)
            running += loss
        mean_loss = running / steps_per_epoch
        emit(f"epoch={epoch} step={step} lr={_fmt(opt.lr)} "
             f"loss={_fmt(mean_loss)}")

        if eval_split is not None and cfg.eval_every and \
                (epoch % cfg.eval_every == 0 or epoch == final_epoch):
            flip = cfg.phase == "flip-fine-tune"
            ev = evaluate_depth(params, netcfg, eval_split, flip_aug=flip,
                                ramp_fraction=cfg.ramp_fraction)
            m = ev["model"]
            emit(f"epoch={epoch} val_abs_rel={_fmt(m.abs_rel)} "
                 f"val_rmse={_fmt(m.rmse)} val_delta1={_fmt(m.delta1)}")
        if progress is not None:
            progress(f"[epoch {epoch} took {time.perf_counter() - t0:.1f}s]")

        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 \
                and epoch != final_epoch:
            path = out / f"checkpoint_epoch{epoch}.ckpt"
            save_checkpoint(path, checkpoint_entries(
                params, pose_params, opt, netcfg, posecfg, epoch, step,
                cfg.seed))

    final_path = out / "checkpoint_final.ckpt"
    save_checkpoint(final_path, checkpoint_entries(
        params, pose_params, opt, netcfg, posecfg, final_epoch, step,
        cfg.seed))
    (out / "train_log.txt").write_text("\n".join(log) + "\n")
    return {"params": params, "pose_params": pose_params, "netcfg": netcfg,
            "posecfg": posecfg, "log": log, "checkpoint": str(final_path),
            "split": split, "eval_split": eval_split, "sequence": seq}
