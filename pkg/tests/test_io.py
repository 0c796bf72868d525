import numpy as np
import pytest

from depthkit.geometry import Se3Pose, Trajectory
from depthkit.imageio import (
    FileFormatError,
    read_keyvalues,
    read_pfm,
    read_pgm,
    read_pose_text,
    write_keyvalues,
    write_pfm,
    write_pgm,
    write_pose_text,
)


def test_pgm_roundtrip_uint8(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
    p = tmp_path / "a.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    assert back.shape == (5, 7)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(np.round(back * 255).astype(np.uint8), img)


def test_pgm_float_input_scaled(tmp_path):
    img = np.array([[0.0, 0.5, 1.0]], dtype=np.float32)
    p = tmp_path / "b.pgm"
    write_pgm(p, img)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n3 1\n255\n")
    assert raw[-3:] == bytes([0, 128, 255])


def test_pgm_header_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x01\x02")
    img = read_pgm(p)
    np.testing.assert_allclose(img * 255, [[1, 2]])


def test_pgm_bad_magic(tmp_path):
    p = tmp_path / "d.pgm"
    p.write_bytes(b"P6\n1 1\n255\n\x00")
    with pytest.raises(FileFormatError):
        read_pgm(p)


def test_pgm_truncated(tmp_path):
    p = tmp_path / "e.pgm"
    p.write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(FileFormatError):
        read_pgm(p)


def test_pfm_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.standard_normal((6, 9)).astype(np.float32) * 37.5
    p = tmp_path / "a.pfm"
    write_pfm(p, data)
    back = read_pfm(p)
    assert back.dtype == np.float32
    assert np.array_equal(back.view(np.uint32), data.view(np.uint32))


def test_pfm_header_and_row_order(tmp_path):
    # bottom row of the image is stored first in the file
    data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    p = tmp_path / "b.pfm"
    write_pfm(p, data)
    raw = p.read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    stored = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n"):], dtype="<f4")
    np.testing.assert_array_equal(stored, [3.0, 4.0, 1.0, 2.0])


def test_pfm_bad_magic(tmp_path):
    p = tmp_path / "c.pfm"
    p.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
    with pytest.raises(FileFormatError):
        read_pfm(p)


def test_pose_text_roundtrip(tmp_path):
    traj = Trajectory([
        (0, Se3Pose(rot_log=(0.0, 0.0, 0.0), trans=(0.0, 0.0, 0.0))),
        (1, Se3Pose(rot_log=(0.01, 0.2, -0.05), trans=(0.5, -0.25, 1.0))),
        (2, Se3Pose(rot_log=(-0.3, 0.1, 0.2), trans=(1.5, 0.75, 2.0))),
    ])
    p = tmp_path / "poses.txt"
    write_pose_text(p, traj)
    back = read_pose_text(p)
    assert back.indices() == [0, 1, 2]
    for a, b in zip(traj.matrices(), back.matrices()):
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_pose_text_bad_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1\n")  # 11 floats
    with pytest.raises(FileFormatError):
        read_pose_text(p)


def test_keyvalues_roundtrip(tmp_path):
    p = tmp_path / "cfg.txt"
    write_keyvalues(p, {"lr": 0.0005, "epochs": 3, "name": "base"})
    kv = read_keyvalues(p)
    assert kv == {"lr": "0.0005", "epochs": "3", "name": "base"}


def test_keyvalues_comments_and_blank(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("# header\n\nlr = 0.1  # inline\nmode=fast\n")
    kv = read_keyvalues(p)
    assert kv == {"lr": "0.1", "mode": "fast"}


def test_keyvalues_bad_line(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("just words\n")
    with pytest.raises(FileFormatError):
        read_keyvalues(p)
