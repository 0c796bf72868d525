import hashlib
from pathlib import Path

import numpy as np
import pytest

from depthkit.geometry import StereoRig
from depthkit.posenet import PoseNetConfig, init_pose_params
from depthkit.synthdata import load_family
from depthkit.tensor import Tensor
from depthkit.train import (
    Adam,
    StereoSplit,
    TrainConfig,
    checkpoint_entries,
    eval_seeds,
    evaluate_pose,
    median_disparity_baseline,
    net_config_from_entries,
    pose_config_from_entries,
    predict_trajectory,
    run_training,
    split_entries,
    step_rng,
    train_seeds,
)


def _tiny_family(**over):
    fam = load_family("preset:lowres")
    fam.update(width=64, height=32)
    fam.update(over)
    return fam


def _seq_family(**over):
    fam = load_family("preset:seq-forward")
    fam.update(width=64, height=32, frames=12, velocity=0.08)
    fam.update(over)
    return fam


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# optimizer


def test_adam_single_step_matches_hand_formula():
    p = Tensor(np.full((1, 1, 1, 1), 1.0, np.float32), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    g = 0.5
    p.grad = np.full((1, 1, 1, 1), g, np.float32)
    opt.step()
    m1 = 0.1 * g
    v1 = 0.001 * g * g
    expect = 1.0 - 0.1 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    assert p.data[0, 0, 0, 0] == pytest.approx(expect, rel=1e-6)

    p.grad = np.full((1, 1, 1, 1), g, np.float32)
    opt.step()
    m2 = 0.9 * m1 + 0.1 * g
    v2 = 0.999 * v1 + 0.001 * g * g
    expect2 = expect - 0.1 * (m2 / (1 - 0.9 ** 2)) / (
        np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert p.data[0, 0, 0, 0] == pytest.approx(expect2, rel=1e-6)


def test_adam_skips_params_without_grad():
    p = Tensor(np.ones((1, 1, 1, 1), np.float32), requires_grad=True)
    q = Tensor(np.ones((1, 1, 1, 1), np.float32), requires_grad=True)
    opt = Adam({"p": p, "q": q}, lr=0.1)
    p.grad = np.ones((1, 1, 1, 1), np.float32)
    opt.step()
    assert p.data[0, 0, 0, 0] != 1.0
    assert q.data[0, 0, 0, 0] == 1.0


def test_adam_state_roundtrip():
    p = Tensor(np.ones((1, 2, 1, 1), np.float32), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    for _ in range(3):
        p.grad = np.full((1, 2, 1, 1), 0.3, np.float32)
        opt.step()
    entries = opt.state_entries()
    assert float(entries["opt.t"]) == 3.0

    opt2 = Adam({"p": p}, lr=0.01)
    opt2.load_state({k: np.asarray(v) for k, v in entries.items()})
    assert opt2.t == 3
    np.testing.assert_array_equal(opt2.m["p"], opt.m["p"])
    np.testing.assert_array_equal(opt2.v["p"], opt.v["p"])


# ---------------------------------------------------------------------------
# sampling and splits


def test_step_rng_is_stateless_and_step_dependent():
    a = step_rng(7, 3).integers(0, 100, size=5)
    b = step_rng(7, 3).integers(0, 100, size=5)
    c = step_rng(7, 4).integers(0, 100, size=5)
    d = step_rng(8, 3).integers(0, 100, size=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_train_and_eval_seed_ranges_are_disjoint():
    tr = set(train_seeds(500))
    ev = set(eval_seeds(500))
    assert not tr & ev


def test_median_baseline_hand_values():
    rig = StereoRig(focal=10.0, cx=0.5, cy=0.5, baseline=2.0,
                    width=2, height=2)
    gt = np.array([[[[4.0, 5.0], [5.0, 10.0]]],
                   [[[5.0, 5.0], [2.0, 20.0]]]], np.float32)
    split = StereoSplit(lefts=np.zeros((2, 3, 2, 2), np.float32),
                        rights=np.zeros((2, 3, 2, 2), np.float32),
                        gt_depths=gt, rig=rig)
    # fb = 20, gt disparities {5,4,4,2} and {4,4,10,1}: median is 4
    baseline, d_const = median_disparity_baseline(split)
    assert d_const == pytest.approx(4.0)
    # constant depth 5 is exact on the four pixels with gt 5
    assert baseline.abs_rel > 0
    assert baseline.delta3 > 0


# ---------------------------------------------------------------------------
# training driver


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quick")
    cfg = TrainConfig(family=_tiny_family(), epochs=3, batch_size=2,
                      n_train=8, n_eval=4, seed=3, eval_every=3,
                      out_dir=str(out))
    return cfg, run_training(cfg)


def test_training_reduces_loss(quick_run):
    _, res = quick_run
    losses = [float(l.split("loss=")[1]) for l in res["log"]
              if l.startswith("epoch=") and "loss=" in l and "val" not in l]
    assert len(losses) == 3
    assert losses[-1] < losses[0]


def test_log_lines_are_structured(quick_run):
    _, res = quick_run
    assert res["log"][0].startswith("phase=base resolution=32x64")
    val = [l for l in res["log"] if "val_abs_rel=" in l]
    assert len(val) == 1
    assert "val_delta1=" in val[0]
    log_file = Path(res["checkpoint"]).parent / "train_log.txt"
    assert log_file.read_text().splitlines() == res["log"]


def test_rerun_is_bit_identical(quick_run, tmp_path):
    cfg, res = quick_run
    cfg2 = TrainConfig(family=cfg.family, epochs=3, batch_size=2,
                       n_train=8, n_eval=4, seed=3, eval_every=3,
                       out_dir=str(tmp_path))
    res2 = run_training(cfg2)
    assert res2["log"] == res["log"]
    assert _sha(res2["checkpoint"]) == _sha(res["checkpoint"])


def test_resume_matches_uninterrupted_run(quick_run, tmp_path):
    cfg, res = quick_run
    half = TrainConfig(family=cfg.family, epochs=2, batch_size=2,
                       n_train=8, n_eval=4, seed=3, eval_every=3,
                       out_dir=str(tmp_path / "half"))
    r1 = run_training(half)
    rest = TrainConfig(family=cfg.family, epochs=3, batch_size=2,
                       n_train=8, n_eval=4, seed=3, eval_every=3,
                       init_from=r1["checkpoint"], resume=True,
                       out_dir=str(tmp_path / "rest"))
    r2 = run_training(rest)
    assert _sha(r2["checkpoint"]) == _sha(res["checkpoint"])
    # the resumed run replays epoch 3 exactly
    assert r2["log"][1:] == res["log"][-2:]


def test_fine_tune_requires_base_checkpoint():
    with pytest.raises(ValueError, match="init_from"):
        TrainConfig(family=_tiny_family(), phase="flip-fine-tune")


def test_fine_tune_runs_from_base(quick_run, tmp_path):
    cfg, res = quick_run
    ft = TrainConfig(family=cfg.family, phase="flip-fine-tune", epochs=1,
                     batch_size=2, lr=5e-5, num_scales=2, n_train=4, n_eval=2,
                     seed=3, init_from=res["checkpoint"],
                     out_dir=str(tmp_path))
    r = run_training(ft)
    assert r["log"][0].startswith("phase=flip-fine-tune")
    # warm start: weights came from the base run, epochs restarted at 1
    assert any(l.startswith("epoch=1 ") for l in r["log"])
    assert Path(r["checkpoint"]).exists()


def test_unknown_phase_rejected():
    with pytest.raises(ValueError, match="phase"):
        TrainConfig(family=_tiny_family(), phase="warp-drive")


# ---------------------------------------------------------------------------
# checkpoint glue


def test_config_roundtrip_through_entries(quick_run):
    cfg, res = quick_run
    entries = checkpoint_entries(res["params"], None, Adam(res["params"], 1e-3),
                                 res["netcfg"], None, epoch=3, step=12, seed=3)
    back = {k: (v.data if isinstance(v, Tensor) else np.asarray(v))
            for k, v in entries.items()}
    cfg2 = net_config_from_entries(back)
    assert cfg2 == res["netcfg"]
    assert pose_config_from_entries(back) is None


def test_pose_config_roundtrip():
    posecfg = PoseNetConfig(context_size=2, conv_widths=(4, 8))
    params = init_pose_params(posecfg, 0)
    disp = {"w": Tensor(np.ones((1, 1, 1, 1), np.float32),
                        requires_grad=True)}
    from depthkit.dispnet import DisparityNetConfig
    netcfg = DisparityNetConfig(height=32, width=64, head_mode="resize")
    entries = checkpoint_entries(disp, params, Adam(disp, 1e-3), netcfg,
                                 posecfg, epoch=1, step=1, seed=0)
    back = {k: (v.data if isinstance(v, Tensor) else np.asarray(v))
            for k, v in entries.items()}
    assert net_config_from_entries(back) == netcfg
    assert pose_config_from_entries(back) == posecfg
    restored = split_entries(back, "pose.")
    assert set(restored) == set(params)


# ---------------------------------------------------------------------------
# pose evaluation


@pytest.fixture(scope="module")
def small_sequence():
    from depthkit.synthdata import render_sequence
    return render_sequence(_seq_family(), seed=5)


def test_fresh_posenet_predicts_identity_trajectory(small_sequence):
    seq = small_sequence
    posecfg = PoseNetConfig()
    params = init_pose_params(posecfg, 11)
    traj = predict_trajectory(params, posecfg, seq.frames)
    assert len(traj) == seq.frames.shape[0] - 1
    for _, pose in traj.entries:
        np.testing.assert_allclose(pose.trans, 0.0)
        np.testing.assert_allclose(pose.rot_log, 0.0)


def test_identity_baseline_drifts_100_percent(small_sequence):
    seq = small_sequence
    posecfg = PoseNetConfig()
    params = init_pose_params(posecfg, 11)
    ev = evaluate_pose(params, posecfg, seq, lengths=(0.2, 0.4))
    assert ev["identity_drift"].t_rel == pytest.approx(100.0, abs=0.1)
    # the zero-initialized net IS the identity baseline
    assert ev["drift"].t_rel == pytest.approx(ev["identity_drift"].t_rel,
                                              abs=1e-6)
    assert ev["median_step"] == pytest.approx(0.0, abs=1e-12)
    assert ev["gt_median_step"] == pytest.approx(0.08, rel=1e-6)


def test_pose_phase_smoke(tmp_path):
    cfg = TrainConfig(family=_seq_family(), phase="pose", epochs=1,
                      batch_size=2, seed=5, out_dir=str(tmp_path))
    res = run_training(cfg)
    assert res["pose_params"] is not None
    assert res["posecfg"] is not None
    entries_path = res["checkpoint"]
    from depthkit.checkpoint import load_checkpoint
    entries = load_checkpoint(entries_path)
    assert any(k.startswith("pose.") for k in entries)
    assert any(k.startswith("disp.") for k in entries)
