"""Finite-difference verification of every backward rule.

Central differences with h = 1e-3. The FD oracle re-runs the same op graph in
float64 so the difference quotient is not drowned by float32 rounding; the
analytic pass runs at production precision. Relative error per coordinate is
|a - fd| / max(|a|, |fd|, 1e-6) and the suite bar is 1e-3.

Ops with kinks (relu at 0, abs at 0, clamp at the floor, bilinear sampling at
integer coordinates) are checked on inputs sampled away from the kink, plus an
explicit skip mask, since FD straddling a kink measures nothing useful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    checked: int
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"op={self.name} max_rel_err={self.max_rel_err:.3e} "
                f"coords={self.checked} tol={self.tol:.0e} {status}")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def rand_tensor(shape, lo: float, hi: float, seed: int) -> np.ndarray:
    return _rng(seed).uniform(lo, hi, size=shape).astype(np.float32)


def rand_signed(shape, lo: float, hi: float, seed: int) -> np.ndarray:
    """Magnitudes in [lo, hi] with random sign: stays clear of zero kinks."""
    r = _rng(seed)
    mag = r.uniform(lo, hi, size=shape)
    sgn = r.choice([-1.0, 1.0], size=shape)
    return (mag * sgn).astype(np.float32)


def projection_loss(out: Tensor, seed: int = 7) -> Tensor:
    """Scalarize with fixed random weights so no output coordinate cancels."""
    r = _rng(seed)
    p = (r.uniform(0.25, 1.0, size=out.shape)
         * r.choice([-1.0, 1.0], size=out.shape)).astype(np.float32)
    return T.sum_(T.mul(out, T.constant(p)))


def check_gradients(fn, arrays, h: float = 1e-3, tol: float = 1e-3,
                    max_coords: int | None = None, skip=None,
                    seed: int = 0, analytic_dtype=np.float32) -> tuple[float, int]:
    """Compare tape gradients of fn(*tensors) against central differences.

    fn maps Tensors to a scalar Tensor and must be a pure function of its
    inputs. Returns (max relative error, coordinates checked).

    analytic_dtype: composite losses whose per-coordinate gradients are small
    differences of larger terms drown in float32 rounding; pass np.float64 to
    verify the backward rules themselves at full precision.
    """
    arrays = [np.asarray(a) for a in arrays]
    ins = [Tensor(a.astype(analytic_dtype), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = fn(*ins)
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ins]

    ins64 = [a.astype(np.float64) for a in arrays]

    def eval64() -> float:
        return fn(*[Tensor(a) for a in ins64]).item()

    rng = _rng(seed)
    max_rel = 0.0
    checked = 0
    for i, a in enumerate(ins64):
        idx = np.arange(a.size)
        if skip is not None and skip[i] is not None:
            idx = idx[~skip[i].ravel()]
        if max_coords is not None and idx.size > max_coords:
            idx = rng.choice(idx, size=max_coords, replace=False)
        flat = a.reshape(-1)
        ana_flat = analytic[i].reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            fp = eval64()
            flat[j] = orig - h
            fm = eval64()
            flat[j] = orig
            fd = (fp - fm) / (2.0 * h)
            an = float(ana_flat[j])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            if rel > max_rel:
                max_rel = rel
            checked += 1
    return max_rel, checked


def run_check(name: str, fn, arrays, tol: float = 1e-3, **kw) -> GradcheckReport:
    t0 = time.perf_counter()
    max_rel, checked = check_gradients(fn, arrays, tol=tol, **kw)
    return GradcheckReport(name, max_rel, checked, tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# the standard suite: one entry per differentiable op and per loss


def _check_unary(name, op, lo, hi, signed=False, seed=11):
    shape = (2, 3, 4, 5)
    x = rand_signed(shape, lo, hi, seed) if signed else rand_tensor(shape, lo, hi, seed)
    return run_check(name, lambda t: projection_loss(op(t)), [x])


def _check_binary(name, op, seed=13, b_shape=(2, 3, 4, 5), lo=-2.0, hi=2.0,
                  b_lo=None, b_hi=None, b_signed=False):
    a = rand_tensor((2, 3, 4, 5), lo, hi, seed)
    if b_signed:
        b = rand_signed(b_shape, b_lo, b_hi, seed + 1)
    else:
        b = rand_tensor(b_shape, b_lo if b_lo is not None else lo,
                        b_hi if b_hi is not None else hi, seed + 1)
    return run_check(name, lambda t, u: projection_loss(op(t, u)), [a, b])


def _check_conv2d(stride, padding, seed=17):
    hw = (6, 6) if stride == 1 else (7, 7)
    x = rand_tensor((2, 3, *hw), -1, 1, seed)
    w = rand_tensor((4, 3, 3, 3), -0.5, 0.5, seed + 1)
    b = rand_tensor((1, 4, 1, 1), -0.2, 0.2, seed + 2)
    name = f"conv2d_s{stride}p{padding}"
    return run_check(
        name, lambda xx, ww, bb: projection_loss(
            T.conv2d(xx, ww, bb, stride=stride, padding=padding)), [x, w, b])


def _check_relu(seed=19):
    x = rand_signed((2, 3, 4, 5), 0.05, 2.0, seed)  # all coords clear of 0
    return run_check("relu", lambda t: projection_loss(T.relu(t)), [x])


def _check_abs(seed=23):
    x = rand_signed((2, 3, 4, 5), 0.05, 2.0, seed)
    return run_check("abs", lambda t: projection_loss(T.abs_(t)), [x])


def _check_clamp_min(seed=29):
    x = rand_tensor((2, 3, 4, 5), 0.0, 1.0, seed)
    floor = 0.5
    skip = [np.abs(x - floor) < 2e-2]
    return run_check("clamp_min", lambda t: projection_loss(T.clamp_min(t, floor)),
                     [x], skip=skip)


def _check_grid_sample(seed=31):
    r = _rng(seed)
    src = rand_tensor((2, 3, 5, 6), -1, 1, seed + 1)
    # fractional parts in [0.2, 0.8]: away from the bilinear kinks at integers
    gx = r.integers(0, 5, size=(2, 1, 4, 4)) + r.uniform(0.2, 0.8, size=(2, 1, 4, 4))
    gy = r.integers(0, 4, size=(2, 1, 4, 4)) + r.uniform(0.2, 0.8, size=(2, 1, 4, 4))
    grid = np.concatenate([gx, gy], axis=1).astype(np.float32)
    return run_check(
        "grid_sample_bilinear",
        lambda s, g: projection_loss(T.grid_sample_bilinear(s, g)), [src, grid])


def _check_avg_pool(k, stride, seed=37):
    x = rand_tensor((2, 3, 6, 6), -1, 1, seed)
    return run_check(f"avg_pool2d_k{k}s{stride}",
                     lambda t: projection_loss(T.avg_pool2d(t, k, stride)), [x])


def _check_pixel_shuffle(seed=41):
    x = rand_tensor((2, 8, 3, 4), -1, 1, seed)
    return run_check("pixel_shuffle", lambda t: projection_loss(T.pixel_shuffle(t, 2)), [x])


def _check_concat(seed=43):
    a = rand_tensor((2, 2, 3, 4), -1, 1, seed)
    b = rand_tensor((2, 3, 3, 4), -1, 1, seed + 1)
    c = rand_tensor((2, 1, 3, 4), -1, 1, seed + 2)
    return run_check("concat_channels",
                     lambda x, y, z: projection_loss(T.concat_channels([x, y, z])),
                     [a, b, c])


def _op_checks() -> dict:
    return {
        "add": lambda: _check_binary("add", T.add),
        "add_broadcast": lambda: _check_binary("add_broadcast", T.add,
                                               b_shape=(1, 3, 1, 1)),
        "sub": lambda: _check_binary("sub", T.sub),
        "mul": lambda: _check_binary("mul", T.mul),
        "div": lambda: _check_binary("div", T.div, b_lo=0.4, b_hi=2.0, b_signed=True),
        "neg": lambda: _check_unary("neg", T.neg, -2, 2),
        "abs": _check_abs,
        "exp": lambda: _check_unary("exp", T.exp, -2, 1.5),
        "log": lambda: _check_unary("log", T.log, 0.2, 3.0),
        "sqrt": lambda: _check_unary("sqrt", T.sqrt, 0.2, 4.0),
        "sin": lambda: _check_unary("sin", T.sin, -3, 3),
        "cos": lambda: _check_unary("cos", T.cos, -3, 3),
        "sigmoid": lambda: _check_unary("sigmoid", T.sigmoid, -4, 4),
        "relu": _check_relu,
        "clamp_min": _check_clamp_min,
        "mean": lambda: _check_unary("mean", T.mean, -2, 2),
        "mean_channels": lambda: _check_unary("mean_channels",
                                              lambda t: T.mean(t, axes=(1,)), -2, 2),
        "mean_spatial": lambda: _check_unary("mean_spatial",
                                             lambda t: T.mean(t, axes=(2, 3)), -2, 2),
        "sum": lambda: _check_unary("sum", T.sum_, -2, 2),
        "hflip": lambda: _check_unary("hflip", T.hflip, -2, 2),
        "upsample2x_nearest": lambda: _check_unary("upsample2x_nearest",
                                                   T.upsample2x_nearest, -2, 2),
        "replicate_pad": lambda: _check_unary("replicate_pad",
                                              lambda t: T.replicate_pad(t, 2), -2, 2),
        "pixel_shuffle": _check_pixel_shuffle,
        "concat_channels": _check_concat,
        "channel_slice": lambda: _check_unary("channel_slice",
                                              lambda t: T.channel_slice(t, 1, 3), -2, 2),
        "conv2d_s1p1": lambda: _check_conv2d(1, 1),
        "conv2d_s2p0": lambda: _check_conv2d(2, 0),
        "avg_pool2d_k2s2": lambda: _check_avg_pool(2, 2),
        "avg_pool2d_k3s1": lambda: _check_avg_pool(3, 1),
        "grid_sample_bilinear": _check_grid_sample,
    }


def standard_checks() -> dict:
    """name -> zero-arg callable returning a GradcheckReport."""
    checks = _op_checks()
    from . import _gradcheck_model  # geometry/layer/loss/net entries
    checks.update(_gradcheck_model.model_checks())
    return checks


def run_standard_checks(names=None) -> list[GradcheckReport]:
    checks = standard_checks()
    if names:
        unknown = [n for n in names if n not in checks]
        if unknown:
            raise KeyError(f"unknown gradcheck names: {unknown}")
        selected = names
    else:
        selected = list(checks)
    return [checks[n]() for n in selected]
