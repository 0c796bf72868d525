"""Reverse-mode autodiff on 4D (N, C, H, W) arrays.

Tensors wrap numpy storage (float32 in production paths; float64 is permitted
so finite-difference oracles can run the same ops at higher precision). Ops
record themselves on the active ComputationTape; backward() replays the tape
in reverse and accumulates into .grad. Repeated backward calls accumulate,
callers zero grads between optimizer steps.

Every forward op checks its output for NaN/Inf and raises NumericsError, so
divergence surfaces at the op that produced it.
"""

from __future__ import annotations

import numpy as np


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NumericsError(TensorError):
    pass


class TapeError(TensorError):
    pass


_ALLOWED_DTYPES = (np.float32, np.float64)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"{op}: non-finite values in output")


class Tensor:
    """4D array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be 4D (N,C,H,W), got shape {arr.shape}")
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def abs(self):
        return abs_(self)

    def mean(self, axes=None):
        return mean(self, axes)

    def sum(self, axes=None):
        return sum_(self, axes)


def scalar(x: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), x, dtype=dtype))


def constant(arr) -> Tensor:
    return Tensor(arr, requires_grad=False)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


class ComputationTape:
    """Ordered op records; append order is a valid topological order."""

    def __init__(self):
        self._records = []
        self._output_ids = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise TapeError("tape stack corrupted")
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, name, inputs, output, backward_fn):
        self._records.append((name, inputs, output, backward_fn))
        self._output_ids.add(id(output))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


Tape = ComputationTape  # short alias used throughout

_TAPE_STACK: list = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1, 1, 1), float(x), dtype=dtype))


def _make(name, inputs, out_data, backward_fn) -> Tensor:
    _check_finite(out_data, name)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(name, inputs, out, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, tape: ComputationTape) -> None:
    """Reverse sweep: seed d(loss)/d(loss) = 1 and accumulate into .grad.

    Gradients of tensors produced on the tape flow through a per-call map
    (freed as the sweep passes them); .grad accumulates only on tensors fed
    INTO the tape (parameters, inputs), so repeated backward calls add up
    exactly as if the losses were summed.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if id(loss) not in tape._output_ids:
        raise TapeError("loss was not produced on this tape")
    flow: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.data.dtype)}
    for name, inputs, output, backward_fn in reversed(tape._records):
        g = flow.pop(id(output), None)
        if g is None:
            continue
        grads = backward_fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in tape._output_ids:
                key = id(t)
                if key in flow:
                    flow[key] = flow[key] + gi
                else:
                    flow[key] = gi
            else:
                _accumulate(t, gi)


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # sum g down to `shape` (inputs are always 4D, so only size-1 axes differ)
    if g.shape == tuple(shape):
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary(name, a, b, fwd, bwd_a, bwd_b):
    dtype = a.data.dtype if isinstance(a, Tensor) else b.data.dtype
    a = _wrap(a, dtype)
    b = _wrap(b, dtype)
    with np.errstate(all="ignore"):  # finiteness is checked explicitly below
        out_data = fwd(a.data, b.data)

    def backward_fn(g):
        ga = _unbroadcast(bwd_a(g, a.data, b.data), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(bwd_b(g, a.data, b.data), b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(name, (a, b), out_data, backward_fn)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    # caller guards the denominator (see losses / geometry epsilon conventions)
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def _unary(name, x, fwd, bwd):
    with np.errstate(all="ignore"):  # finiteness is checked explicitly below
        out_data = fwd(x.data)

    def backward_fn(g):
        return (bwd(g, x.data, out_data),)

    return _make(name, (x,), out_data, backward_fn)


def neg(x: Tensor) -> Tensor:
    return _unary("neg", x, lambda v: -v, lambda g, v, o: -g)


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at x == 0
    return _unary("abs", x, np.abs, lambda g, v, o: g * np.sign(v))


def exp(x: Tensor) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericsError("log: domain requires strictly positive input")
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericsError("sqrt: domain requires nonnegative input")
    return _unary("sqrt", x, np.sqrt, lambda g, v, o: g / (2.0 * o))


def sin(x: Tensor) -> Tensor:
    return _unary("sin", x, np.sin, lambda g, v, o: g * np.cos(v))


def cos(x: Tensor) -> Tensor:
    return _unary("cos", x, np.cos, lambda g, v, o: -g * np.sin(v))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _unary("relu", x, lambda v: np.maximum(v, 0),
                  lambda g, v, o: g * (v > 0))


def sigmoid(x: Tensor) -> Tensor:
    # computed via exp(-|x|) so neither tail overflows
    def fwd(v):
        e = np.exp(-np.abs(v))
        return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)

    return _unary("sigmoid", x, fwd, lambda g, v, o: g * o * (1.0 - o))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    # gradient passes only where x > floor (saturated region gets 0)
    return _unary("clamp_min", x, lambda v: np.maximum(v, floor),
                  lambda g, v, o: g * (v > floor))


def _norm_axes(axes):
    if axes is None:
        return (0, 1, 2, 3)
    axes = tuple(int(a) for a in axes)
    if any(a < 0 or a > 3 for a in axes) or len(set(axes)) != len(axes):
        raise ShapeError(f"bad reduction axes {axes}")
    return axes


def sum_(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes)
    out_data = x.data.sum(axis=axes, keepdims=True)

    def backward_fn(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)

    return _make("sum", (x,), out_data, backward_fn)


def mean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    out_data = x.data.mean(axis=axes, keepdims=True)

    def backward_fn(g):
        return (np.broadcast_to(g / count, x.data.shape).astype(x.data.dtype),)

    return _make("mean", (x,), out_data, backward_fn)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    base = tensors[0].data.shape
    for t in tensors:
        s = t.data.shape
        if (s[0], s[2], s[3]) != (base[0], base[2], base[3]):
            raise ShapeError(f"concat_channels mismatch: {s} vs {base}")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    splits = [t.data.shape[1] for t in tensors]

    def backward_fn(g):
        outs = []
        c0 = 0
        for t, c in zip(tensors, splits):
            outs.append(g[:, c0:c0 + c] if t.requires_grad else None)
            c0 += c
        return tuple(outs)

    return _make("concat_channels", tuple(tensors), out_data, backward_fn)


def channel_slice(x: Tensor, c0: int, c1: int) -> Tensor:
    C = x.data.shape[1]
    if not (0 <= c0 < c1 <= C):
        raise ShapeError(f"channel_slice [{c0}:{c1}] out of range for C={C}")
    out_data = x.data[:, c0:c1].copy()

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, c0:c1] = g
        return (gx,)

    return _make("channel_slice", (x,), out_data, backward_fn)


def hflip(x: Tensor) -> Tensor:
    """Mirror the width axis: out[..., w] = in[..., W-1-w]."""
    out_data = x.data[:, :, :, ::-1]

    def backward_fn(g):
        return (np.ascontiguousarray(g[:, :, :, ::-1]),)

    return _make("hflip", (x,), out_data, backward_fn)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r^2, H, W) -> (N, C, r*H, r*W).

    out[n, c, r*h + dy, r*w + dx] = in[n, c*r^2 + dy*r + dx, h, w]; a pure
    (bijective) index permutation, so backward is the inverse permutation.
    """
    N, C, H, W = x.data.shape
    if r < 1 or C % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: C={C} not divisible by r^2={r * r}")
    Co = C // (r * r)
    v = x.data.reshape(N, Co, r, r, H, W)
    out_data = v.transpose(0, 1, 4, 2, 5, 3).reshape(N, Co, H * r, W * r)

    def backward_fn(g):
        gv = g.reshape(N, Co, H, r, W, r).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(gv.reshape(N, C, H, W)),)

    return _make("pixel_shuffle", (x,), out_data, backward_fn)


def upsample2x_nearest(x: Tensor) -> Tensor:
    N, C, H, W = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)).astype(x.data.dtype),)

    return _make("upsample2x_nearest", (x,), out_data, backward_fn)


def replicate_pad(x: Tensor, p: int) -> Tensor:
    if p < 0:
        raise ShapeError("replicate_pad: p must be >= 0")
    if p == 0:
        return _unary("replicate_pad", x, lambda v: v.copy(), lambda g, v, o: g)
    N, C, H, W = x.data.shape
    out_data = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def backward_fn(g):
        # fold the replicated border strips back onto the edge rows/cols
        t = g[:, :, :, p:p + W].copy()
        t[:, :, :, 0] += g[:, :, :, :p].sum(axis=3)
        t[:, :, :, W - 1] += g[:, :, :, W + p:].sum(axis=3)
        gx = t[:, :, p:p + H, :].copy()
        gx[:, :, 0, :] += t[:, :, :p, :].sum(axis=2)
        gx[:, :, H - 1, :] += t[:, :, H + p:, :].sum(axis=2)
        return (gx,)

    return _make("replicate_pad", (x,), out_data, backward_fn)


# ---------------------------------------------------------------------------
# convolution / pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    N, C = xp.shape[:2]
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(N * Ho * Wo, C * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation. Output size must divide exactly."""
    N, Cin, H, W = x.data.shape
    Cout, Cw, kh, kw = w.data.shape
    if Cw != Cin:
        raise ShapeError(f"conv2d: weight expects Cin={Cw}, input has {Cin}")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ShapeError("conv2d: stride >= 1, padding >= 0")
    if (H + 2 * p - kh) % s != 0 or (W + 2 * p - kw) % s != 0 \
            or H + 2 * p < kh or W + 2 * p < kw:
        raise ShapeError(
            f"conv2d: size {(H, W)} with k={(kh, kw)} s={s} p={p} does not divide exactly")
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if b is not None and b.data.shape != (1, Cout, 1, 1):
        raise ShapeError(f"conv2d: bias must be (1,{Cout},1,1), got {b.data.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, Ho, Wo)
    w_mat = w.data.reshape(Cout, Cin * kh * kw)
    with np.errstate(all="ignore"):  # finiteness is checked explicitly below
        out = cols @ w_mat.T
    out_data = out.reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    if b is not None:
        out_data = out_data + b.data

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N * Ho * Wo, Cout)
        gw = gb = gx = None
        if w.requires_grad:
            # cols rebuilt here instead of cached: trades a little time for memory
            cols_b = _im2col(xp, kh, kw, s, Ho, Wo)
            gw = (g2.T @ cols_b).reshape(w.data.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0).reshape(1, Cout, 1, 1)
        if x.requires_grad:
            gc = (g2 @ w_mat).reshape(N, Ho, Wo, Cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gc[:, :, i, j]
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)

    def backward_trim(g):
        grads = backward_fn(g)
        return grads[:len(inputs)]

    return _make("conv2d", inputs, out_data, backward_trim)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Valid average pooling; (H - k) and (W - k) must divide by stride."""
    s = k if stride is None else int(stride)
    N, C, H, W = x.data.shape
    if k < 1 or s < 1 or H < k or W < k or (H - k) % s or (W - k) % s:
        raise ShapeError(f"avg_pool2d: size {(H, W)} with k={k} s={s} does not divide exactly")
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    inv = 1.0 / (k * k)
    acc = np.zeros((N, C, Ho, Wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            acc += x.data[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    out_data = acc * inv

    def backward_fn(g):
        gi = g * inv
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gi
        return (gx,)

    return _make("avg_pool2d", (x,), out_data, backward_fn)


# ---------------------------------------------------------------------------
# bilinear sampling


def grid_sample_bilinear(src: Tensor, grid: Tensor) -> Tensor:
    """Sample src at continuous pixel coords; out-of-range clamps to border.

    grid is (N, 2, Hg, Wg): channel 0 holds x (column), channel 1 holds y
    (row), both in src pixel units. Gradients flow to src and to the grid;
    the grid gradient is zero where the clamp saturates.
    """
    N, C, H, W = src.data.shape
    Ng, two, Hg, Wg = grid.data.shape
    if two != 2 or Ng != N:
        raise ShapeError(f"grid must be ({N},2,Hg,Wg), got {grid.data.shape}")
    gx = grid.data[:, 0]
    gy = grid.data[:, 1]
    xc = np.clip(gx, 0.0, W - 1.0)
    yc = np.clip(gy, 0.0, H - 1.0)
    x0 = np.clip(np.floor(xc), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yc), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    # weights keep the promoted dtype: a float64 grid over a float32 source
    # must not round the coordinates through float32
    dt = np.result_type(src.data.dtype, grid.data.dtype)
    wx = (xc - x0).astype(dt)
    wy = (yc - y0).astype(dt)

    n_idx = np.arange(N).reshape(N, 1, 1, 1)
    c_idx = np.arange(C).reshape(1, C, 1, 1)
    x0e, x1e = x0[:, None], x1[:, None]
    y0e, y1e = y0[:, None], y1[:, None]
    v00 = src.data[n_idx, c_idx, y0e, x0e]
    v01 = src.data[n_idx, c_idx, y0e, x1e]
    v10 = src.data[n_idx, c_idx, y1e, x0e]
    v11 = src.data[n_idx, c_idx, y1e, x1e]
    wxe = wx[:, None]
    wye = wy[:, None]
    top = v00 + wxe * (v01 - v00)
    bot = v10 + wxe * (v11 - v10)
    out_data = top + wye * (bot - top)

    def backward_fn(g):
        gs = gg = None
        if src.requires_grad:
            w00 = (1 - wxe) * (1 - wye)
            w01 = wxe * (1 - wye)
            w10 = (1 - wxe) * wye
            w11 = wxe * wye
            base = (np.arange(N).reshape(N, 1, 1, 1) * C
                    + np.arange(C).reshape(1, C, 1, 1)) * (H * W)
            flat = np.zeros(N * C * H * W, dtype=np.float64)
            for wgt, yy, xx in ((w00, y0e, x0e), (w01, y0e, x1e),
                                (w10, y1e, x0e), (w11, y1e, x1e)):
                idx = (base + yy * W + xx).ravel()
                flat += np.bincount(idx, weights=(g * wgt).ravel(),
                                    minlength=N * C * H * W)
            gs = flat.reshape(N, C, H, W).astype(src.data.dtype)
        if grid.requires_grad:
            dx = (1 - wye) * (v01 - v00) + wye * (v11 - v10)
            dy = (1 - wxe) * (v10 - v00) + wxe * (v11 - v01)
            in_x = ((gx > 0) & (gx < W - 1)).astype(dt)[:, None]
            in_y = ((gy > 0) & (gy < H - 1)).astype(dt)[:, None]
            ggx = (g * dx * in_x).sum(axis=1)
            ggy = (g * dy * in_y).sum(axis=1)
            gg = np.stack([ggx, ggy], axis=1).astype(grid.data.dtype)
        return gs, gg

    return _make("grid_sample_bilinear", (src, grid), out_data, backward_fn)
