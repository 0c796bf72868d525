"""Synthetic stereo and sequence scenes with exact ground truth.

Scenes are textured fronto-parallel rectangles floating in front of an
infinite textured background plane, rendered by per-pixel ray casting.
Because every surface is a z = const plane, ground-truth depth, disparity
and occlusion are exact, and the left/right (and frame-to-frame) images are
related by the same warps the model is trained to explain.

Determinism: all randomness flows through splitmix64, implemented here on
exact 64-bit integer arithmetic, so a (family, seed) pair produces
bit-identical scenes on any platform. Stream form: the state advances by
adding 0x9E3779B97F4A7C15 and each output is the mix

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

of the new state (all mod 2^64). Lattice noise hashes integer coordinates
with the same mix. Textures are sums of low-frequency sines and bilinear
value noise: piecewise-smooth, so subpixel warps of one view reproduce the
other almost exactly.

Units: world coordinates in meters, camera looks down +z. A camera pose is
world-from-camera (R, c); pixel (x, y) casts the ray R @ ((x-cx)/f, (y-cy)/f, 1)
from c, and the camera-frame depth of a hit on plane z=Z is (Z - c_z)/D_z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Se3Pose, StereoRig, Trajectory, pose_to_matrix, quat_to_matrix, quat_exp

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * _MIX1 & _MASK64
    z = (z ^ (z >> 27)) * _MIX2 & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Scalar splitmix64 stream on python ints (exact, platform independent)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix64(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # 53-bit mantissa fraction in [0, 1)
        x = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return lo + (hi - lo) * x

    def randint(self, lo: int, hi: int) -> int:
        """Inclusive range. Modulo bias is negligible for the tiny ranges used here."""
        return lo + self.next_u64() % (hi - lo + 1)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Hash integer lattice coords to float64 in [0, 1). Vectorized, wrap-exact."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint64) * np.uint64(_GAMMA)
        h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(seed & _MASK64)
        h = (h ^ (h >> np.uint64(30))) * np.uint64(_MIX1)
        h = (h ^ (h >> np.uint64(27))) * np.uint64(_MIX2)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    """Bilinear interpolation of lattice hashes; piecewise-bilinear in (u, v)."""
    iu = np.floor(u).astype(np.int64)
    iv = np.floor(v).astype(np.int64)
    fu = u - iu
    fv = v - iv
    c00 = _hash01(iu, iv, seed)
    c10 = _hash01(iu + 1, iv, seed)
    c01 = _hash01(iu, iv + 1, seed)
    c11 = _hash01(iu + 1, iv + 1, seed)
    top = c00 + (c10 - c00) * fu
    bot = c01 + (c11 - c01) * fu
    return top + (bot - top) * fv


# ---------------------------------------------------------------------------
# textures


@dataclass
class TextureSpec:
    """Checker/noise mixture painted on one surface, in surface meters.

    The ingredients make depth readable from a single view while warping one
    rendered view still reproduces the other:
     - the per-channel mean encodes log-depth (distant surfaces are painted
       darker, like aerial perspective), so average brightness alone pins a
       surface's depth to within a few percent;
     - triangle-wave gratings with family-wide metric periods: their projected
       pixel period is focal * period / z, so local stripe spacing (and which
       gratings survive the fine-scale fade) refines the depth estimate. The
       first two gratings share one period at crossed directions (a checker);
     - fine value-noise octaves with cell sizes fixed in pixels at the
       surface's own depth: broadband high-frequency detail that keeps the
       photometric minimum sharp at every depth without imitating a grating;
     - a contrast gain that dims distant surfaces (painted on, hence exactly
       view-consistent).

    Triangle waves and value noise are piecewise-linear, which bilinear
    warping resamples almost exactly; gratings whose projected period would
    approach the pixel grid are faded out before they can alias.
    """

    mean: tuple              # per channel, log-depth coded luminance
    grating_amp: tuple       # per grating, fade already applied
    grating_freq: tuple      # cycles per meter, family-wide periods
    grating_dir: tuple       # (dx, dy) per grating
    grating_phase: tuple     # per grating, shared across channels
    noise_amp: tuple         # per octave
    noise_cell: tuple        # meters per lattice cell
    noise_seed: tuple        # per channel, per octave
    gain: float              # contrast multiplier on everything but the mean


def _grating_fade(period_px: float) -> float:
    """1 above 6 px projected period, 0 below 3 px, linear between."""
    return min(1.0, max(0.0, (period_px - 3.0) / 3.0))


def make_texture(rng: SplitMix64, px_m: float, cue_periods: tuple = (),
                 gain: float = 1.0, lum: float = 0.5) -> TextureSpec:
    """px_m: meters per pixel at the surface's depth (z/f). cue_periods are
    metric grating periods shared by every surface of the scene family; the
    first is rendered twice at crossed directions. lum is the depth-coded
    mean luminance the channel means jitter around."""
    mean = tuple(min(0.9, max(0.05, lum + rng.uniform(-0.006, 0.006)))
                 for _ in range(3))
    draws = []
    for i, period_m in enumerate(cue_periods):
        if i == 0:
            amp = rng.uniform(0.11, 0.13)
            a = rng.uniform(0.0, 2.0 * np.pi)
            b = a + 0.5 * np.pi + rng.uniform(-0.3, 0.3)
            draws.append((period_m, amp, a))
            draws.append((period_m, amp, b))
        else:
            draws.append((period_m, rng.uniform(0.07, 0.09),
                          rng.uniform(0.0, 2.0 * np.pi)))
    g_amp, g_freq, g_dir, g_phase = [], [], [], []
    for period_m, amp, ang in draws:
        g_amp.append(amp * _grating_fade(period_m / px_m))
        g_freq.append(1.0 / period_m)
        g_dir.append((np.cos(ang), np.sin(ang)))
        g_phase.append(rng.uniform(0.0, 1.0))
    noise_amp = (rng.uniform(0.06, 0.08), rng.uniform(0.04, 0.055))
    noise_cell = tuple(rng.uniform(lo, hi) * px_m
                       for lo, hi in ((4.0, 6.0), (2.4, 3.2)))
    noise_seed = tuple(tuple(rng.next_u64() for _ in range(2)) for _ in range(3))
    return TextureSpec(mean, tuple(g_amp), tuple(g_freq), tuple(g_dir),
                       tuple(g_phase), noise_amp, noise_cell, noise_seed, gain)


def _triangle(t: np.ndarray) -> np.ndarray:
    """Unit-period triangle wave in [-1, 1] with kinks at t = 0 and 0.5."""
    return 4.0 * np.abs(t - np.floor(t) - 0.5) - 1.0


def eval_texture(tex: TextureSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(x, y) surface meters -> (3, *shape) float in [0.02, 0.98]."""
    ac_shared = np.zeros(x.shape, dtype=np.float64)
    for g in range(len(tex.grating_amp)):
        dx, dy = tex.grating_dir[g]
        t = tex.grating_freq[g] * (x * dx + y * dy) + tex.grating_phase[g]
        ac_shared += tex.grating_amp[g] * _triangle(t)
    chans = []
    for c in range(3):
        val = ac_shared.copy()
        for o in range(len(tex.noise_amp)):
            cell = tex.noise_cell[o]
            n = value_noise(x / cell, y / cell, tex.noise_seed[c][o])
            val += tex.noise_amp[o] * (2.0 * n - 1.0)
        chans.append(tex.mean[c] + tex.gain * val)
    return np.clip(np.stack(chans), 0.02, 0.98)


# ---------------------------------------------------------------------------
# scene model


@dataclass
class RectSpec:
    """Fronto-parallel textured rectangle on the plane z = z."""

    z: float
    x0: float
    x1: float
    y0: float
    y1: float
    texture: TextureSpec


@dataclass
class SceneSpec:
    rig: StereoRig
    background_z: float
    background_texture: TextureSpec
    rects: list
    supersample: int = 2


@dataclass
class StereoPair:
    left: np.ndarray        # (1, 3, H, W) float32 in [0, 1]
    right: np.ndarray       # (1, 3, H, W)
    gt_depth: np.ndarray    # (1, 1, H, W) float32, left camera
    gt_disparity: np.ndarray  # (1, 1, H, W) float32, left->right
    occlusion: np.ndarray   # (1, 1, H, W) float32, 1 = hidden in right view


@dataclass
class SequenceRender:
    frames: np.ndarray      # (T, 3, H, W) left images
    rights: np.ndarray      # (T, 3, H, W) right images
    gt_depths: np.ndarray   # (T, 1, H, W) left depth
    trajectory: Trajectory  # world-from-camera pose per frame
    rig: StereoRig


# ---------------------------------------------------------------------------
# ray casting


def _cast(scene: SceneSpec, rot: np.ndarray, cam: np.ndarray,
          xs: np.ndarray, ys: np.ndarray):
    """Cast rays through pixel coords (xs, ys). Returns (depth, surface_id, Px, Py).

    surface_id 0 is the background, 1..K the rects. depth is camera-frame z.
    """
    rig = scene.rig
    dx = (xs - rig.cx) / rig.focal
    dy = (ys - rig.cy) / rig.focal
    Dx = rot[0, 0] * dx + rot[0, 1] * dy + rot[0, 2]
    Dy = rot[1, 0] * dx + rot[1, 1] * dy + rot[1, 2]
    Dz = rot[2, 0] * dx + rot[2, 1] * dy + rot[2, 2]
    if np.any(Dz <= 1e-6):
        raise ValueError("camera ray parallel to scene planes; yaw too large")

    t_best = (scene.background_z - cam[2]) / Dz
    sid = np.zeros(xs.shape, dtype=np.int32)
    for k, rect in enumerate(scene.rects):
        t = (rect.z - cam[2]) / Dz
        px = cam[0] + t * Dx
        py = cam[1] + t * Dy
        inside = (
            (t > 0.05)
            & (px >= rect.x0) & (px <= rect.x1)
            & (py >= rect.y0) & (py <= rect.y1)
            & (t < t_best)
        )
        t_best = np.where(inside, t, t_best)
        sid = np.where(inside, np.int32(k + 1), sid)
    Px = cam[0] + t_best * Dx
    Py = cam[1] + t_best * Dy
    return t_best, sid, Px, Py


def _shade(scene: SceneSpec, sid: np.ndarray, Px: np.ndarray, Py: np.ndarray) -> np.ndarray:
    """(3, *shape) colors for hit points; textures are anchored to each surface."""
    out = np.empty((3,) + sid.shape, dtype=np.float64)
    surfaces = [(0, scene.background_texture, 0.0, 0.0)]
    for k, rect in enumerate(scene.rects):
        surfaces.append((k + 1, rect.texture, rect.x0, rect.y0))
    for s, tex, ox, oy in surfaces:
        mask = sid == s
        if not np.any(mask):
            continue
        col = eval_texture(tex, Px[mask] - ox, Py[mask] - oy)
        out[:, mask] = col
    return out


def render_view(scene: SceneSpec, pose: Se3Pose):
    """Render one camera. Returns (rgb (3,H,W) f32, depth (H,W) f64, sid (H,W))."""
    rig = scene.rig
    rot = pose_to_matrix(pose)[:3, :3]
    cam = np.asarray(pose.trans, dtype=np.float64)
    ss = scene.supersample
    H, W = rig.height, rig.width

    # color: ss x ss subsamples per pixel, box filtered
    xs = (np.arange(W * ss, dtype=np.float64) - (ss - 1) / 2.0) / ss
    ys = (np.arange(H * ss, dtype=np.float64) - (ss - 1) / 2.0) / ss
    gx, gy = np.meshgrid(xs, ys)
    _, sid_ss, px, py = _cast(scene, rot, cam, gx, gy)
    rgb = _shade(scene, sid_ss, px, py)
    rgb = rgb.reshape(3, H, ss, W, ss).mean(axis=(2, 4)).astype(np.float32)

    # depth and ids: point sampled at pixel centers
    gx1, gy1 = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    depth, sid, _, _ = _cast(scene, rot, cam, gx1, gy1)
    return rgb, depth, sid


def _right_pose(pose: Se3Pose, baseline: float) -> Se3Pose:
    rot = quat_to_matrix(quat_exp(np.asarray(pose.rot_log, dtype=np.float64)))
    c = np.asarray(pose.trans, dtype=np.float64) + rot @ np.array([baseline, 0.0, 0.0])
    return Se3Pose(rot_log=tuple(pose.rot_log), trans=tuple(c))


def render_stereo(scene: SceneSpec) -> StereoPair:
    rig = scene.rig
    ident = Se3Pose(rot_log=(0.0, 0.0, 0.0), trans=(0.0, 0.0, 0.0))
    left, depth, sid = render_view(scene, ident)
    right, _, _ = render_view(scene, _right_pose(ident, rig.baseline))

    disparity = rig.fb / depth

    # occlusion: reproject each left hit point into the right camera and recast;
    # a different surface there means the point is hidden in the right view.
    H, W = rig.height, rig.width
    gx, gy = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    xr = gx - disparity
    rot = np.eye(3)
    cam_r = np.array([rig.baseline, 0.0, 0.0])
    _, sid_r, _, _ = _cast(scene, rot, cam_r, xr, gy)
    occluded = (sid_r != sid) | (xr < 0.0) | (xr > W - 1.0)

    def img4(a):
        return a[None].astype(np.float32)

    return StereoPair(
        left=img4(left),
        right=img4(right),
        gt_depth=depth[None, None].astype(np.float32),
        gt_disparity=disparity[None, None].astype(np.float32),
        occlusion=occluded[None, None].astype(np.float32),
    )


# ---------------------------------------------------------------------------
# families: named distributions over scenes, loadable from key=value files


PRESETS = {
    "lowres": {
        "kind": "stereo",
        "width": 128, "height": 64, "focal": 128.0, "baseline": 0.45,
        "bg_z_min": 12.0, "bg_z_max": 20.0,
        "n_rects_min": 2, "n_rects_max": 4,
        "rect_z_min": 5.5, "rect_z_max": 11.0,
        "rect_w_min": 0.18, "rect_w_max": 0.42,   # fraction of image width
        "rect_h_min": 0.22, "rect_h_max": 0.55,   # fraction of image height
        "supersample": 2,
        "cue_p1": 0.9, "cue_p2": 0.225,   # metric grating periods (m)
        "haze_z": 12.0, "haze_floor": 0.6,
        "lum_a": 0.7, "lum_b": 0.45, "lum_z0": 2.0,   # mean = a - b*log10(z/z0)
    },
    "highres": {
        "kind": "stereo",
        "width": 256, "height": 128, "focal": 256.0, "baseline": 0.45,
        "bg_z_min": 12.0, "bg_z_max": 20.0,
        "n_rects_min": 2, "n_rects_max": 4,
        "rect_z_min": 5.5, "rect_z_max": 11.0,
        "rect_w_min": 0.18, "rect_w_max": 0.42,
        "rect_h_min": 0.22, "rect_h_max": 0.55,
        "supersample": 2,
        "cue_p1": 0.9, "cue_p2": 0.225,
        "haze_z": 12.0, "haze_floor": 0.6,
        "lum_a": 0.7, "lum_b": 0.45, "lum_z0": 2.0,
    },
    "seq-forward": {
        "kind": "sequence",
        "width": 128, "height": 64, "focal": 128.0, "baseline": 0.45,
        "bg_z_min": 24.0, "bg_z_max": 28.0,
        "n_rects_min": 3, "n_rects_max": 4,
        "rect_z_min": 10.5, "rect_z_max": 16.0,
        "rect_w_min": 0.18, "rect_w_max": 0.4,
        "rect_h_min": 0.22, "rect_h_max": 0.5,
        "supersample": 2,
        "cue_p1": 1.4, "cue_p2": 0.35,
        "haze_z": 12.0, "haze_floor": 0.6,
        "lum_a": 0.7, "lum_b": 0.45, "lum_z0": 2.0,
        "frames": 200,
        "velocity": 0.04,        # meters per frame, forward
        "yaw_per_frame": 0.0006,  # radians per frame
    },
}

_INT_KEYS = {"width", "height", "n_rects_min", "n_rects_max", "supersample", "frames"}
_STR_KEYS = {"kind"}


def load_family(source) -> dict:
    """Accepts a preset name ("preset:lowres"), a dict, or a key=value file path."""
    if isinstance(source, dict):
        return dict(source)
    if isinstance(source, str) and source.startswith("preset:"):
        name = source.split(":", 1)[1]
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
        return dict(PRESETS[name])
    from .imageio import read_keyvalues

    raw = read_keyvalues(source)
    fam = {}
    for k, v in raw.items():
        if k in _STR_KEYS:
            fam[k] = v
        elif k in _INT_KEYS:
            fam[k] = int(v)
        else:
            fam[k] = float(v)
    return fam


def family_at_resolution(family: dict, height: int, width: int) -> dict:
    """Same family at another raster size; focal scales with width so the
    field of view (and thus the scene layout statistics) is preserved."""
    fam = dict(family)
    if "focal" in fam:
        fam["focal"] = float(fam["focal"]) * (width / fam["width"])
    fam["width"] = int(width)
    fam["height"] = int(height)
    return fam


def family_rig(family: dict) -> StereoRig:
    w, h = family["width"], family["height"]
    return StereoRig(
        focal=float(family.get("focal", w)),
        cx=(w - 1) / 2.0,
        cy=(h - 1) / 2.0,
        baseline=float(family["baseline"]),
        width=w,
        height=h,
    )


def generate_scene(family: dict, seed: int) -> SceneSpec:
    """Deterministic scene draw; rect extents are chosen in screen space."""
    rig = family_rig(family)
    rng = SplitMix64((seed * 0x5851F42D4C957F2D + 0x14057B7EF767814F) & _MASK64)
    cues = (float(family.get("cue_p1", 0.9)), float(family.get("cue_p2", 0.225)))
    haze_z = float(family.get("haze_z", 12.0))
    haze_floor = float(family.get("haze_floor", 0.6))
    lum_a = float(family.get("lum_a", 0.7))
    lum_b = float(family.get("lum_b", 0.45))
    lum_z0 = float(family.get("lum_z0", 2.0))

    def tex_at(z: float) -> TextureSpec:
        gain = haze_floor + (1.0 - haze_floor) * np.exp(-z / haze_z)
        lum = lum_a - lum_b * np.log10(z / lum_z0)
        return make_texture(rng, z / rig.focal, cue_periods=cues,
                            gain=gain, lum=lum)

    bg_z = rng.uniform(family["bg_z_min"], family["bg_z_max"])
    bg_tex = tex_at(bg_z)
    n = rng.randint(family["n_rects_min"], family["n_rects_max"])
    rects = []
    for _ in range(n):
        z = rng.uniform(family["rect_z_min"], family["rect_z_max"])
        # nearer rects are drawn somewhat larger (same physical object sizes),
        # one more single-view depth cue; the windows overlap so size alone
        # never pins the depth
        near_t = (family["rect_z_max"] - z) / max(
            family["rect_z_max"] - family["rect_z_min"], 1e-9)
        w_span = family["rect_w_max"] - family["rect_w_min"]
        h_span = family["rect_h_max"] - family["rect_h_min"]
        w_frac = family["rect_w_min"] + w_span * (
            0.35 * near_t + 0.65 * rng.uniform(0.0, 1.0))
        h_frac = family["rect_h_min"] + h_span * (
            0.35 * near_t + 0.65 * rng.uniform(0.0, 1.0))
        w_px = w_frac * rig.width
        h_px = h_frac * rig.height
        cx_px = rng.uniform(0.12 * rig.width, 0.88 * rig.width)
        cy_px = rng.uniform(0.15 * rig.height, 0.85 * rig.height)
        # screen-space center and size -> world extents on the plane z
        xc = (cx_px - rig.cx) * z / rig.focal
        yc = (cy_px - rig.cy) * z / rig.focal
        hw = 0.5 * w_px * z / rig.focal
        hh = 0.5 * h_px * z / rig.focal
        rects.append(RectSpec(z=z, x0=xc - hw, x1=xc + hw, y0=yc - hh, y1=yc + hh,
                              texture=tex_at(z)))
    return SceneSpec(rig=rig, background_z=bg_z, background_texture=bg_tex,
                     rects=rects, supersample=int(family.get("supersample", 2)))


def make_sequence_spec(family: dict, seed: int):
    """Returns (scene, frames, velocity, yaw_per_frame) for a sequence family."""
    if family.get("kind") != "sequence":
        raise ValueError("family kind must be 'sequence'")
    scene = generate_scene(family, seed)
    return scene, int(family["frames"]), float(family["velocity"]), float(family["yaw_per_frame"])


def sequence_trajectory(frames: int, velocity: float, yaw_per_frame: float) -> Trajectory:
    """Forward motion with constant yaw rate; pose i is world-from-camera."""
    entries = []
    c = np.zeros(3)
    for i in range(frames):
        yaw = yaw_per_frame * i
        rot_log = (0.0, 0.5 * yaw, 0.0)  # half-angle encoding of yaw about +y
        entries.append((i, Se3Pose(rot_log=rot_log, trans=tuple(c))))
        rot = quat_to_matrix(quat_exp(np.array(rot_log)))
        c = c + rot @ np.array([0.0, 0.0, velocity])
    return Trajectory(entries)


def render_sequence(family: dict, seed: int) -> SequenceRender:
    scene, frames, velocity, yaw = make_sequence_spec(family, seed)
    traj = sequence_trajectory(frames, velocity, yaw)

    # the camera must stay well in front of the nearest rect
    end_z = traj.entries[-1][1].trans[2]
    nearest = min(r.z for r in scene.rects) if scene.rects else scene.background_z
    if end_z + 1.0 > nearest:
        raise ValueError("camera path reaches the nearest surface; shorten the sequence")

    H, W = scene.rig.height, scene.rig.width
    lefts = np.empty((frames, 3, H, W), dtype=np.float32)
    rights = np.empty((frames, 3, H, W), dtype=np.float32)
    depths = np.empty((frames, 1, H, W), dtype=np.float32)
    for i, (_, pose) in enumerate(traj.entries):
        rgb, depth, _ = render_view(scene, pose)
        lefts[i] = rgb
        depths[i, 0] = depth.astype(np.float32)
        rgb_r, _, _ = render_view(scene, _right_pose(pose, scene.rig.baseline))
        rights[i] = rgb_r
    return SequenceRender(frames=lefts, rights=rights, gt_depths=depths, trajectory=traj,
                          rig=scene.rig)
