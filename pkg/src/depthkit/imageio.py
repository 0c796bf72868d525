"""File formats: binary PGM (P5), float PFM (Pf), pose text, key=value.

PFM follows the common convention: header "Pf", dimensions "w h", scale line
whose sign encodes endianness (-1.0 here, little endian), rows stored
bottom-to-top. PGM is 8-bit binary grayscale, rows top-to-bottom. Pose text is
one frame per line: the 12 row-major entries of the top 3x4 block of the
world-from-camera matrix. Config/report files are one key=value per line,
'#' starts a comment.
"""

from __future__ import annotations

import numpy as np

from .geometry import Se3Pose, Trajectory, pose_from_matrix, pose_to_matrix


class FileFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PGM (P5)


def write_pgm(path, img: np.ndarray) -> None:
    """img: 2D float in [0, 1] (scaled to 0..255) or uint8."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise FileFormatError(f"write_pgm needs a 2D array, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _read_pnm_tokens(fh, count: int) -> list:
    """Read whitespace-separated header tokens, skipping '#' comments."""
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise FileFormatError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens[:count]


def read_pgm(path) -> np.ndarray:
    """Returns float32 in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P5":
            raise FileFormatError(f"not a binary PGM: magic {magic!r}")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(fh, 3))
        if maxval != 255:
            raise FileFormatError(f"unsupported maxval {maxval}")
        raw = fh.read(w * h)
        if len(raw) != w * h:
            raise FileFormatError("truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# PFM (Pf)


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise FileFormatError(f"write_pfm needs a 2D array, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(data[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"Pf":
            raise FileFormatError(f"not a grayscale PFM: magic {magic!r}")
        w, h = (int(t) for t in _read_pnm_tokens(fh, 2))
        scale = float(_read_pnm_tokens(fh, 1)[0])
        raw = fh.read(w * h * 4)
        if len(raw) != w * h * 4:
            raise FileFormatError("truncated pixel data")
    endian = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=endian).reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


# ---------------------------------------------------------------------------
# pose text (KITTI layout)


def write_pose_text(path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        for _, pose in traj.entries:
            row = pose_to_matrix(pose)[:3].reshape(12)
            fh.write(" ".join(f"{v:.12e}" for v in row) + "\n")


def read_pose_text(path) -> Trajectory:
    entries = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            vals = [float(t) for t in line.split()]
            if len(vals) != 12:
                raise FileFormatError(f"pose line {i}: expected 12 floats, got {len(vals)}")
            entries.append((i, pose_from_matrix(np.array(vals).reshape(3, 4))))
    if not entries:
        raise FileFormatError("empty pose file")
    return Trajectory(entries)


# ---------------------------------------------------------------------------
# key=value config / reports


def write_keyvalues(path, kv: dict) -> None:
    with open(path, "w") as fh:
        for k, v in kv.items():
            fh.write(f"{k}={v}\n")


def read_keyvalues(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FileFormatError(f"line {lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
