"""Checkpoint format: byte-level layout, round trips, corruption handling."""

import hashlib
import struct

import numpy as np
import pytest

from depthkit.checkpoint import load_checkpoint, save_checkpoint
from depthkit.dispnet import DisparityNetConfig, disparity_forward, init_params
from depthkit.imageio import FileFormatError
from depthkit.tensor import Tensor


def _entries(seed=0):
    r = np.random.Generator(np.random.PCG64(seed))
    return {
        "net.w": r.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "net.b": r.normal(size=(1, 4, 1, 1)).astype(np.float32),
        "opt.m.net.w": r.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "__meta.step": np.float32(17.0),
    }


def test_roundtrip_bit_identical(tmp_path):
    path = tmp_path / "a.ckpt"
    entries = _entries()
    save_checkpoint(path, entries)
    back = load_checkpoint(path)
    assert sorted(back) == sorted(entries)
    for k in entries:
        a = np.asarray(entries[k], dtype=np.float32)
        assert back[k].dtype == np.float32
        assert back[k].shape == a.shape
        assert np.array_equal(back[k], a)


def test_exact_byte_layout(tmp_path):
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(path, {"a": np.array([1.5], np.float32)})
    expect = (b"SDPK" + struct.pack("<II", 1, 1)
              + struct.pack("<H", 1) + b"a"
              + struct.pack("<B", 1) + struct.pack("<I", 1)
              + struct.pack("<f", 1.5))
    assert path.read_bytes() == expect


def test_canonical_entry_order(tmp_path):
    e = _entries()
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    save_checkpoint(p1, e)
    save_checkpoint(p2, dict(reversed(list(e.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_save_load_save_stable(tmp_path):
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    save_checkpoint(p1, _entries(3))
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, _entries())
    data = bytearray(path.read_bytes())
    data[:4] = b"JUNK"
    path.write_bytes(bytes(data))
    with pytest.raises(FileFormatError):
        load_checkpoint(path)


def test_unknown_version(tmp_path):
    path = tmp_path / "v9.ckpt"
    save_checkpoint(path, _entries())
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(data))
    with pytest.raises(FileFormatError):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "cut.ckpt"
    save_checkpoint(path, _entries())
    data = path.read_bytes()
    path.write_bytes(data[:-2])
    with pytest.raises(FileFormatError):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "extra.ckpt"
    save_checkpoint(path, _entries())
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FileFormatError):
        load_checkpoint(path)


def test_name_validation(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x.ckpt", {"": np.zeros(1, np.float32)})


def test_scalar_and_tensor_entries(tmp_path):
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, {
        "scalar": np.float32(3.25),
        "t": Tensor(np.full((1, 1, 2, 2), 7.0, np.float32)),
    })
    back = load_checkpoint(path)
    assert back["scalar"].shape == ()
    assert float(back["scalar"]) == 3.25
    assert np.all(back["t"] == 7.0)


def test_net_forward_reproduced_bit_identically(tmp_path):
    cfg = DisparityNetConfig(height=16, width=32)
    params = init_params(cfg, seed=5)
    r = np.random.Generator(np.random.PCG64(6))
    img = Tensor(r.uniform(0, 1, (1, 3, 16, 32)).astype(np.float32))
    out = disparity_forward(img, params, cfg)[0].data
    digest = hashlib.sha256(out.tobytes()).hexdigest()

    path = tmp_path / "net.ckpt"
    save_checkpoint(path, params)
    loaded = {k: Tensor(v, requires_grad=True)
              for k, v in load_checkpoint(path).items()}
    out2 = disparity_forward(img, loaded, cfg)[0].data
    assert hashlib.sha256(out2.tobytes()).hexdigest() == digest
    assert np.array_equal(out, out2)
