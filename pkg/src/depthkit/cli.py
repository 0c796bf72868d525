"""Command line interface.

Subcommands: train, eval-depth, eval-pose, infer, gradcheck. Every command
is deterministic under --seed. Exit codes: 0 success, 1 usage or bad
configuration, 2 numerical failure (non-finite values, divergence, failed
gradient checks), 3 I/O failure (missing or malformed files).

Flag precedence: built-in default < --config key=value file < explicit flag.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .dispnet import at_resolution, disparity_forward
from .gradcheck import run_standard_checks
from .imageio import (
    FileFormatError,
    read_keyvalues,
    read_pgm,
    write_keyvalues,
    write_pfm,
    write_pgm,
    write_pose_text,
)
from .losses import LossWeights
from .metrics import DRIFT_LENGTHS, average_metrics, depth_metrics
from .synthdata import family_at_resolution, load_family, render_sequence
from .tensor import NumericsError, Tensor
from .train import (
    TrainConfig,
    build_stereo_split,
    eval_seeds,
    evaluate_depth,
    evaluate_pose,
    net_config_from_entries,
    pose_config_from_entries,
    run_training,
    split_entries,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; remap to the documented
    # usage exit code by raising instead
    def error(self, message):
        raise UsageError(message)


def _parse_resolution(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"--resolution expects HxW, got {text!r}")


def _parse_onoff(name: str, text: str) -> bool:
    if text not in ("on", "off"):
        raise UsageError(f"--{name} expects on or off, got {text!r}")
    return text == "on"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


# flags that a --config file may set, with their converters
_CONFIG_KEYS = {
    "spec": str,
    "seed": int,
    "resolution": str,
    "epochs": int,
    "lr": float,
    "batch": int,
    "phase": str,
    "flip_aug": str,
    "subpixel": str,
    "out": str,
    "n_train": int,
    "n_eval": int,
    "num_scales": int,
    "eval_every": int,
    "checkpoint_every": int,
    "init_from": str,
    "checkpoint": str,
    "lengths": str,
    "smoothness": float,
    "occlusion": float,
    "ramp_fraction": float,
}


def _merge_config(args) -> dict:
    """Resolved option dict: config file fills in flags left at None."""
    merged = {}
    if getattr(args, "config", None):
        raw = read_keyvalues(args.config)
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in _CONFIG_KEYS:
                raise UsageError(f"unknown config key {k!r}")
            merged[key] = _CONFIG_KEYS[key](v)
    for key in _CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    return merged


def _family_from(opts: dict, default_spec: str):
    fam = load_family(opts.get("spec", default_spec))
    if "resolution" in opts:
        h, w = _parse_resolution(opts["resolution"])
        fam = family_at_resolution(fam, h, w)
    return fam


def _weights_from(opts: dict) -> LossWeights:
    kw = {}
    if "smoothness" in opts:
        kw["smoothness"] = opts["smoothness"]
    if "occlusion" in opts:
        kw["occlusion"] = opts["occlusion"]
    return LossWeights(**kw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    opts = _merge_config(args)
    phase = opts.get("phase", "base")
    if phase not in ("base", "flip-fine-tune", "pose"):
        raise UsageError(f"unknown phase {phase!r}")
    # fine-tuning defaults: lower lr, smaller batches, first two scales only
    lr = opts.get("lr", 5e-5 if phase == "flip-fine-tune" else 5e-4)
    batch = opts.get("batch", 2 if phase == "flip-fine-tune" else 4)
    num_scales = opts.get("num_scales",
                          2 if phase == "flip-fine-tune" else None)
    head_mode = "subpixel"
    if "subpixel" in opts and not _parse_onoff("subpixel", opts["subpixel"]):
        head_mode = "resize"
    default_spec = "preset:seq-forward" if phase == "pose" else "preset:lowres"
    fam = _family_from(opts, default_spec)

    try:
        cfg = TrainConfig(
            family=fam,
            phase=phase,
            epochs=opts.get("epochs", 40),
            batch_size=batch,
            lr=lr,
            n_train=opts.get("n_train", 200),
            n_eval=opts.get("n_eval", 50),
            seed=opts.get("seed", 0),
            num_scales=num_scales,
            head_mode=head_mode,
            weights=_weights_from(opts),
            eval_every=opts.get("eval_every", 1),
            checkpoint_every=opts.get("checkpoint_every", 0),
            init_from=opts.get("init_from"),
            resume=bool(getattr(args, "resume", False)),
            ramp_fraction=opts.get("ramp_fraction", 0.05),
            out_dir=opts.get("out", "out"),
        )
    except ValueError as e:
        raise UsageError(str(e))

    def progress(line):
        print(line, file=sys.stderr)

    result = run_training(cfg, progress=progress)
    for line in result["log"]:
        print(line)
    print(f"checkpoint={result['checkpoint']}")
    return 0


def _load_model(path):
    entries = load_checkpoint(path)
    netcfg = net_config_from_entries(entries)
    params = split_entries(entries, "disp.")
    posecfg = pose_config_from_entries(entries)
    pose_params = split_entries(entries, "pose.") if posecfg else None
    return entries, netcfg, params, posecfg, pose_params


def cmd_eval_depth(args) -> int:
    opts = _merge_config(args)
    if "checkpoint" not in opts:
        raise UsageError("eval-depth requires --checkpoint")
    flip = _parse_onoff("flip_aug", opts.get("flip_aug", "off"))
    fam = _family_from(opts, "preset:lowres")
    _, netcfg, params, _, _ = _load_model(opts["checkpoint"])
    netcfg = at_resolution(netcfg, fam["height"], fam["width"])
    split = build_stereo_split(fam, eval_seeds(opts.get("n_eval", 50)))

    if getattr(args, "oracle", False):
        # sanity mode: score the ground truth against itself
        per = [depth_metrics(split.gt_depths[i], split.gt_depths[i])
               for i in range(split.gt_depths.shape[0])]
        model = average_metrics(per)
        report = {"mode": "oracle", **model.as_dict()}
    else:
        ev = evaluate_depth(params, netcfg, split, flip_aug=flip,
                            ramp_fraction=opts.get("ramp_fraction", 0.05))
        report = {"flip_aug": "on" if flip else "off",
                  "n_images": split.lefts.shape[0]}
        report.update(ev["model"].as_dict())
        report.update({f"baseline_{k}": v
                       for k, v in ev["baseline"].as_dict().items()})
        report["baseline_disparity"] = ev["baseline_disparity"]

    lines = {k: _fmt(v) for k, v in report.items()}
    for k, v in lines.items():
        print(f"{k}={v}")
    out = Path(opts.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_keyvalues(out / "depth_report.txt", lines)
    return 0


def cmd_eval_pose(args) -> int:
    opts = _merge_config(args)
    if "checkpoint" not in opts:
        raise UsageError("eval-pose requires --checkpoint")
    fam = _family_from(opts, "preset:seq-forward")
    _, _, _, posecfg, pose_params = _load_model(opts["checkpoint"])
    if posecfg is None:
        raise UsageError("checkpoint has no pose parameters; train with "
                         "--phase pose first")
    lengths = DRIFT_LENGTHS
    if "lengths" in opts:
        lengths = tuple(float(t) for t in opts["lengths"].split(","))
    seq = render_sequence(fam, seed=opts.get("seed", 0))
    ev = evaluate_pose(pose_params, posecfg, seq, lengths=lengths)

    out = Path(opts.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_pose_text(out / "pred_poses.txt", ev["pred"])
    write_pose_text(out / "gt_poses.txt", ev["gt"])
    d, ident = ev["drift"], ev["identity_drift"]
    report = {
        "t_rel": d.t_rel, "r_rel": d.r_rel, "n_segments": d.n_segments,
        "lengths": ",".join(f"{v:g}" for v in d.lengths_evaluated),
        "truncated": int(d.truncated),
        "identity_t_rel": ident.t_rel, "identity_r_rel": ident.r_rel,
        "median_step": ev["median_step"],
        "gt_median_step": ev["gt_median_step"],
    }
    lines = {k: _fmt(v) for k, v in report.items()}
    for k, v in lines.items():
        print(f"{k}={v}")
    write_keyvalues(out / "pose_report.txt", lines)
    return 0


def cmd_infer(args) -> int:
    opts = _merge_config(args)
    if "checkpoint" not in opts:
        raise UsageError("infer requires --checkpoint")
    if not getattr(args, "image", None):
        raise UsageError("infer requires --image")
    _, netcfg, params, _, _ = _load_model(opts["checkpoint"])
    gray = read_pgm(args.image)
    h, w = gray.shape
    try:
        netcfg = at_resolution(netcfg, h, w)
    except ValueError as e:
        raise UsageError(f"image size {h}x{w} unusable: {e}")
    img = Tensor(np.repeat(gray[None, None], 3, axis=1).astype(np.float32))
    flip = _parse_onoff("flip_aug", opts.get("flip_aug", "off"))
    if flip:
        from .layers import flip_augment_forward
        disp = flip_augment_forward(
            lambda im: disparity_forward(im, params, netcfg)[0], img,
            opts.get("ramp_fraction", 0.05))
    else:
        disp = disparity_forward(img, params, netcfg)[0]
    d = disp.data[0, 0]

    out = Path(opts.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "disparity.pfm", d)
    # visualization: disparity is proportional to inverse depth, so a linear
    # map onto [0, 1] by the max keeps it monotone with nearer = brighter
    vis = d / max(float(d.max()), 1e-9)
    write_pgm(out / "inverse_depth.pgm", vis)
    print(f"disparity={out / 'disparity.pfm'}")
    print(f"visualization={out / 'inverse_depth.pgm'}")
    print(f"shape={h}x{w} min={d.min():.4f} max={d.max():.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.ops or ["all"]
    selected = None if names == ["all"] else names
    try:
        reports = run_standard_checks(selected)
    except KeyError as e:
        raise UsageError(str(e))
    failed = 0
    for r in reports:
        print(r.line())
        failed += 0 if r.passed else 1
    print(f"checked={len(reports)} failed={failed}")
    return 0 if failed == 0 else 2


# ---------------------------------------------------------------------------
# wiring


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="key=value option file")
    p.add_argument("--spec", help="scene family: preset:NAME or a file")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", help="HxW, e.g. 64x128")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-eval", dest="n_eval", type=int)
    p.add_argument("--flip-aug", dest="flip_aug", choices=("on", "off"))
    p.add_argument("--ramp-fraction", dest="ramp_fraction", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="depthkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--phase", choices=("base", "flip-fine-tune", "pose"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--num-scales", dest="num_scales", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--init-from", dest="init_from",
                   help="checkpoint to start from")
    p.add_argument("--resume", action="store_true",
                   help="continue init-from's epoch/step/optimizer state")
    p.add_argument("--subpixel", choices=("on", "off"),
                   help="off switches the heads to the resize baseline")
    p.add_argument("--smoothness", type=float)
    p.add_argument("--occlusion", type=float)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-depth", help="depth metrics on the eval split")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (sanity check)")
    p.set_defaults(fn=cmd_eval_depth)

    p = sub.add_parser("eval-pose", help="trajectory drift on a sequence")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--lengths", help="comma separated segment lengths in "
                   "meters (default 100..800)")
    p.set_defaults(fn=cmd_eval_pose)

    p = sub.add_parser("infer", help="disparity for one image")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="input PGM image")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite difference gradient checks")
    p.add_argument("ops", nargs="*",
                   help="op names, or 'all' (default)")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_help(sys.stderr)
            return 1
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (OSError, FileFormatError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
