"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A Variable wraps a dense float array (the tensor: shape + row-major data)
together with an optional gradient buffer.  Operations executed while a Tape
is active record a backward rule; Tape.backward replays the rules in reverse
order and accumulates d(loss)/d(var) into every requires_grad Variable.

Conventions used throughout the package:
  - default dtype is float32; a float64 mode exists solely so gradients can
    be verified against central finite differences at tight tolerance
  - feature maps are [B, C, H, W]; single maps are [H, W]
  - elementwise ops require identical shapes (no general broadcasting);
    Python scalars are accepted as constants
  - values are never mutated by ops, so a Variable's array may be shared

Only forward/backward over a single tape is supported and it is
single-threaded; independent tapes may run concurrently.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype):
    """Set the dtype used for all new Variables (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def float64_verification():
    """Temporarily switch new Variables to float64 for gradient verification."""
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


class Variable:
    """A tensor value plus an optional gradient of identical shape."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=""):
        self.value = np.asarray(value, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        # leaf parameters get a zero-initialized grad buffer up front;
        # op outputs allocate lazily on first accumulation
        self.grad = np.zeros_like(self.value) if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad.fill(0.0)

    def detach(self):
        """A constant view of this Variable's value (no gradient path)."""
        return _make(self.value, False)

    def __repr__(self):
        return f"Variable(shape={tuple(self.value.shape)}, requires_grad={self.requires_grad}, name={self.name!r})"

    # thin operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __truediv__(self, other):
        return divide(self, other)


class Tape:
    """Records operations for one backward pass.

    Use as a context manager::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)

    backward may be called once; it clears the recording.
    """

    def __init__(self):
        self._ops = []
        self._used = False

    def __enter__(self):
        if _TAPE_STACK:
            raise RuntimeError("nested tapes are not supported")
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss):
        """Accumulate d(loss)/d(var) into every recorded requires_grad Variable."""
        if self._used:
            raise RuntimeError("this tape has already been replayed")
        if not isinstance(loss, Variable):
            raise TypeError("loss must be a Variable")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar (size 1), got shape {tuple(loss.value.shape)}")
        self._used = True
        _accumulate(loss, np.ones_like(loss.value))
        # reverse recording order is a valid topological order because ops
        # execute eagerly; entries are dropped as they run to release memory
        while self._ops:
            out, backward_fn = self._ops.pop()
            if out.grad is not None:
                backward_fn(out.grad)


_TAPE_STACK = []


def _make(value, requires_grad):
    v = Variable.__new__(Variable)
    v.value = value
    v.requires_grad = requires_grad
    v.grad = None
    v.name = ""
    return v


def _record(out, backward_fn):
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1]._ops.append((out, backward_fn))


def _accumulate(var, g):
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=var.value.dtype, copy=True)
    else:
        var.grad += g


def _as_variable(x):
    if isinstance(x, Variable):
        return x
    return _make(np.asarray(x, dtype=_DEFAULT_DTYPE), False)


def constant(value, name=""):
    """A Variable that never receives gradients."""
    v = _as_variable(value)
    v.name = name
    return v


def _check_same_shape(a, b, opname):
    if a.value.shape != b.value.shape:
        raise ValueError(
            f"{opname}: shape mismatch {tuple(a.value.shape)} vs {tuple(b.value.shape)}"
        )


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    if not isinstance(b, Variable) and not isinstance(a, Variable):
        raise TypeError("add requires at least one Variable")
    if not isinstance(b, Variable):  # variable + scalar
        a = _as_variable(a)
        bs = float(b)
        out = _make(a.value + a.value.dtype.type(bs), a.requires_grad)

        def backward_fn(g):
            _accumulate(a, g)

        _record(out, backward_fn)
        return out
    if not isinstance(a, Variable):
        return add(b, a)
    _check_same_shape(a, b, "add")
    out = _make(a.value + b.value, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    _record(out, backward_fn)
    return out


def subtract(a, b):
    if isinstance(b, Variable) and isinstance(a, Variable):
        _check_same_shape(a, b, "subtract")
        out = _make(a.value - b.value, a.requires_grad or b.requires_grad)

        def backward_fn(g):
            _accumulate(a, g)
            _accumulate(b, -g)

        _record(out, backward_fn)
        return out
    return add(a, multiply(b, -1.0) if isinstance(b, Variable) else -float(b))


def multiply(a, b):
    if not isinstance(b, Variable) and not isinstance(a, Variable):
        raise TypeError("multiply requires at least one Variable")
    if not isinstance(b, Variable):  # variable * scalar
        a = _as_variable(a)
        bs = a.value.dtype.type(float(b))
        out = _make(a.value * bs, a.requires_grad)

        def backward_fn(g):
            _accumulate(a, g * bs)

        _record(out, backward_fn)
        return out
    if not isinstance(a, Variable):
        return multiply(b, a)
    _check_same_shape(a, b, "multiply")
    out = _make(a.value * b.value, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * b.value)
        if b.requires_grad:
            _accumulate(b, g * a.value)

    _record(out, backward_fn)
    return out


def divide(a, b):
    if not isinstance(b, Variable):  # variable / scalar
        return multiply(a, 1.0 / float(b))
    a = _as_variable(a)
    _check_same_shape(a, b, "divide")
    out = _make(a.value / b.value, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g / b.value)
        if b.requires_grad:
            _accumulate(b, -g * out.value / b.value)

    _record(out, backward_fn)
    return out


def relu(x):
    out = _make(np.maximum(x.value, 0), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g * (out.value > 0))

    _record(out, backward_fn)
    return out


def exp_base(x, base):
    """Elementwise base**x (the exponential used by the spatial softmax)."""
    base = float(base)
    if base <= 0:
        raise ValueError(f"exp_base requires base > 0, got {base}")
    ln_b = x.value.dtype.type(np.log(base))
    out = _make(np.exp(x.value * ln_b), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g * out.value * ln_b)

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    out_value = x.value.reshape(shape)
    out = _make(out_value, x.requires_grad)
    in_shape = x.value.shape

    def backward_fn(g):
        _accumulate(x, g.reshape(in_shape))

    _record(out, backward_fn)
    return out


def concat_channels(parts):
    """Concatenate [B,C_i,H,W] Variables along the channel axis."""
    if not parts:
        raise ValueError("concat_channels: empty input list")
    for p in parts:
        if p.value.ndim != 4:
            raise ValueError(f"concat_channels expects 4-D inputs, got {p.value.shape}")
    base = parts[0].value.shape
    for p in parts[1:]:
        s = p.value.shape
        if s[0] != base[0] or s[2:] != base[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {base} vs {s}")
    out = _make(
        np.concatenate([p.value for p in parts], axis=1),
        any(p.requires_grad for p in parts),
    )
    sizes = [p.value.shape[1] for p in parts]

    def backward_fn(g):
        c0 = 0
        for p, c in zip(parts, sizes):
            _accumulate(p, g[:, c0 : c0 + c])
            c0 += c

    _record(out, backward_fn)
    return out


def batch_slice(x, start, stop):
    """Slice [start:stop] along the leading (batch) axis."""
    out = _make(x.value[start:stop], x.requires_grad)

    def backward_fn(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad[start:stop] += g

    _record(out, backward_fn)
    return out


def grid_windows(x, n):
    """Partition [B,C,H,W] into non-overlapping n-by-n windows.

    Returns [B, C, G, n*n] where G = (H//n)*(W//n); windows are ordered
    row-major over the grid and pixels row-major within each window.
    Border rows/columns that do not fill a window are dropped (their
    gradient is zero).
    """
    if x.value.ndim != 4:
        raise ValueError(f"grid_windows expects [B,C,H,W], got {x.value.shape}")
    B, C, H, W = x.value.shape
    if n < 1 or n > H or n > W:
        raise ValueError(f"grid_windows: window {n} does not fit in {H}x{W}")
    gh, gw = H // n, W // n
    core = x.value[:, :, : gh * n, : gw * n]
    out_value = (
        core.reshape(B, C, gh, n, gw, n)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, gh * gw, n * n)
    )
    out = _make(np.ascontiguousarray(out_value), x.requires_grad)

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        gx[:, :, : gh * n, : gw * n] = (
            g.reshape(B, C, gh, gw, n, n)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, gh * n, gw * n)
        )
        _accumulate(x, gx)

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    """Sum of all elements as a shape-[1] Variable."""
    out = _make(x.value.sum(dtype=x.value.dtype).reshape(1), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, np.full_like(x.value, g[0]))

    _record(out, backward_fn)
    return out


def sum_last(x):
    """Sum over the last axis, keeping it as size 1."""
    out = _make(x.value.sum(axis=-1, keepdims=True, dtype=x.value.dtype), x.requires_grad)
    k = x.value.shape[-1]

    def backward_fn(g):
        _accumulate(x, np.repeat(g, k, axis=-1))

    _record(out, backward_fn)
    return out


def repeat_last(x, k):
    """Repeat a trailing size-1 axis k times (inverse of sum_last's keepdim)."""
    if x.value.shape[-1] != 1:
        raise ValueError(f"repeat_last expects trailing axis 1, got {x.value.shape}")
    out = _make(np.repeat(x.value, k, axis=-1), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g.sum(axis=-1, keepdims=True, dtype=x.value.dtype))

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution


def _pad_spatial(x, ph, pw, padding):
    if ph == 0 and pw == 0:
        return x
    mode = {"zero": "constant", "replicate": "edge"}.get(padding)
    if mode is None:
        raise ValueError(f"unknown padding mode {padding!r}")
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=mode)


def _fold_pad_grad(gp, ph, pw, padding):
    # collapse gradient of a padded array back onto the unpadded one
    if ph == 0 and pw == 0:
        return gp
    if padding == "zero":
        return gp[:, :, ph:-ph, pw:-pw]
    # replicate: border pixels also received the padded copies' gradient
    g = gp.copy()
    if ph:
        g[:, :, ph, :] += g[:, :, :ph, :].sum(axis=2)
        g[:, :, -ph - 1, :] += g[:, :, -ph:, :].sum(axis=2)
    if pw:
        g[:, :, :, pw] += g[:, :, :, :pw].sum(axis=3)
        g[:, :, :, -pw - 1] += g[:, :, :, -pw:].sum(axis=3)
    return g[:, :, ph:-ph, pw:-pw]


def conv2d(x, kernel, bias=None, padding="zero"):
    """2-D cross-correlation with 'same' output size.

    x: [B,C_in,H,W] or [C_in,H,W]; kernel: [C_out,C_in,kh,kw] with odd kh,kw;
    bias: [C_out] or None.  padding selects the border rule: "zero" or
    "replicate".

    Internally the padded input moves to channels-last and the kernel is
    applied as one matmul per spatial offset; that keeps every GEMM operand
    contiguous along channels and avoids materializing im2col columns (whose
    gather copies dominate at these small channel counts).
    """
    if x.value.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.value.shape), kernel, bias, padding)
        return reshape(out, out.value.shape[1:])
    if x.value.ndim != 4:
        raise ValueError(f"conv2d expects [B,C,H,W] or [C,H,W], got {x.value.shape}")
    if kernel.value.ndim != 4:
        raise ValueError(f"conv2d kernel must be [C_out,C_in,kh,kw], got {kernel.value.shape}")
    B, C, H, W = x.value.shape
    O, Ci, kh, kw = kernel.value.shape
    if Ci != C:
        raise ValueError(f"conv2d: kernel expects C_in={Ci} but input has C_in={C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias is not None and bias.value.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.value.shape} != ({O},)")
    ph, pw = kh // 2, kw // 2
    dtype = x.value.dtype

    def pad_nhwc(values):
        xp = _pad_spatial(values, ph, pw, padding)
        return np.ascontiguousarray(xp.transpose(0, 2, 3, 1))

    # [kh,kw,C,O] so w_off[ky,kx] right-multiplies channels-last activations
    w_off = np.ascontiguousarray(kernel.value.transpose(2, 3, 1, 0))
    a = pad_nhwc(x.value)
    out_nhwc = np.empty((B, H, W, O), dtype=dtype)
    tmp = np.empty_like(out_nhwc)
    first = True
    for ky in range(kh):
        for kx in range(kw):
            src = a[:, ky : ky + H, kx : kx + W, :]
            if first:
                np.matmul(src, w_off[ky, kx], out=out_nhwc)
                first = False
            else:
                np.matmul(src, w_off[ky, kx], out=tmp)
                out_nhwc += tmp
    del a, tmp
    if bias is not None:
        out_nhwc += bias.value
    out_value = np.ascontiguousarray(out_nhwc.transpose(0, 3, 1, 2))
    del out_nhwc

    requires = x.requires_grad or kernel.requires_grad or (bias is not None and bias.requires_grad)
    out = _make(out_value, requires)

    def backward_fn(g):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3), dtype=dtype))
        need_w = kernel.requires_grad
        need_x = x.requires_grad
        if not (need_w or need_x):
            return
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        if need_w:
            # padded input is recomputed rather than captured: nine of these
            # can be live on the tape at once and each is batch-sized
            a_b = pad_nhwc(x.value)
            dw = np.empty((kh, kw, C, O), dtype=dtype)
            for ky in range(kh):
                for kx in range(kw):
                    src = a_b[:, ky : ky + H, kx : kx + W, :]
                    prod = np.matmul(src.transpose(0, 1, 3, 2), g_nhwc)
                    dw[ky, kx] = prod.sum(axis=(0, 1), dtype=dtype)
            del a_b
            _accumulate(kernel, np.ascontiguousarray(dw.transpose(3, 2, 0, 1)))
        if need_x:
            if O == 1 and (kh > 1 or kw > 1):
                # single output channel: one windows-GEMM over the flat
                # gradient (full correlation with the flipped kernel) beats
                # kh*kw shifted accumulation passes over the wide input
                gp = np.pad(g_nhwc[..., 0], ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                win = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
                w_flip = np.ascontiguousarray(w_off[::-1, ::-1, :, 0].reshape(kh * kw, C))
                hp, wp = H + 2 * ph, W + 2 * pw
                dxp = np.empty((B, hp, wp, C), dtype=dtype)
                chunk = max(1, (64 << 20) // (hp * wp * kh * kw * dtype.itemsize))
                for b0 in range(0, B, chunk):
                    b1 = min(b0 + chunk, B)
                    cols = np.ascontiguousarray(win[b0:b1]).reshape(-1, kh * kw)
                    dxp[b0:b1] = (cols @ w_flip).reshape(b1 - b0, hp, wp, C)
            else:
                dxp = np.zeros((B, H + 2 * ph, W + 2 * pw, C), dtype=dtype)
                tmp_c = np.empty((B, H, W, C), dtype=dtype)
                for ky in range(kh):
                    for kx in range(kw):
                        np.matmul(g_nhwc, w_off[ky, kx].T, out=tmp_c)
                        dxp[:, ky : ky + H, kx : kx + W, :] += tmp_c
                del tmp_c
            dx = np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))
            del dxp
            _accumulate(x, _fold_pad_grad(dx, ph, pw, padding))

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training,
    momentum=0.9,
    eps=1e-5,
    update_running=False,
):
    """Per-channel batch normalization over [B,C,H,W].

    Train mode normalizes by batch statistics (population variance); eval
    mode uses the provided running arrays.  running_mean/running_var are
    plain ndarrays mutated in place only when training and update_running
    are both set (kept separate so gradient checks can re-run the forward
    without drifting the statistics).
    """
    if x.value.ndim != 4:
        raise ValueError(f"batchnorm2d expects [B,C,H,W], got {x.value.shape}")
    B, C, H, W = x.value.shape
    if gamma.value.shape != (C,) or beta.value.shape != (C,):
        raise ValueError("batchnorm2d: gamma/beta must have shape [C]")
    dtype = x.value.dtype
    if training:
        mean = x.value.mean(axis=(0, 2, 3), dtype=dtype)
        var = x.value.var(axis=(0, 2, 3), dtype=dtype)
        if update_running:
            running_mean *= dtype.type(momentum)
            running_mean += dtype.type(1 - momentum) * mean
            running_var *= dtype.type(momentum)
            running_var += dtype.type(1 - momentum) * var
    else:
        mean = np.asarray(running_mean, dtype=dtype)
        var = np.asarray(running_var, dtype=dtype)
    ivar = 1.0 / np.sqrt(var + dtype.type(eps))
    mean4 = mean.reshape(1, C, 1, 1)
    ivar4 = ivar.reshape(1, C, 1, 1).astype(dtype)
    out_value = (x.value - mean4) * (ivar4 * gamma.value.reshape(1, C, 1, 1))
    out_value += beta.value.reshape(1, C, 1, 1)
    out = _make(out_value, x.requires_grad or gamma.requires_grad or beta.requires_grad)

    def backward_fn(g):
        xhat = (x.value - mean4) * ivar4
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3), dtype=dtype))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3), dtype=dtype))
        if not x.requires_grad:
            return
        gam4 = gamma.value.reshape(1, C, 1, 1)
        if not training:
            _accumulate(x, g * (gam4 * ivar4))
            return
        n = dtype.type(B * H * W)
        gx = g * gam4
        s1 = gx.sum(axis=(0, 2, 3), keepdims=True, dtype=dtype)
        s2 = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=dtype)
        _accumulate(x, (ivar4 / n) * (n * gx - s1 - xhat * s2))

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# bilinear interpolation family (align-corners-false / half-pixel centers)


def _resize_axis(n_in, n_out, dtype):
    # source array coordinate for each output index, edge-clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    np.minimum(i0, max(n_in - 2, 0), out=i0)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, frac


def _resize_matrix(n_in, n_out, dtype):
    # column j holds the two interpolation weights of output sample j, so
    # resizing one axis is a single GEMM (and its gradient a GEMM with the
    # transpose)
    i0, i1, frac = _resize_axis(n_in, n_out, np.float64)
    m = np.zeros((n_in, n_out), dtype=np.float64)
    j = np.arange(n_out)
    np.add.at(m, (i0, j), 1.0 - frac)
    np.add.at(m, (i1, j), frac)
    return m.astype(dtype)


def bilinear_resize(x, out_h, out_w):
    """Resize [B,C,H,W] (or [C,H,W]) to (out_h, out_w) with half-pixel-center
    bilinear interpolation; constant maps stay constant for any target size."""
    if x.value.ndim == 3:
        out = bilinear_resize(reshape(x, (1,) + x.value.shape), out_h, out_w)
        return reshape(out, out.value.shape[1:])
    if x.value.ndim != 4:
        raise ValueError(f"bilinear_resize expects [B,C,H,W] or [C,H,W], got {x.value.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target {out_h}x{out_w} must be >= 1x1")
    B, C, H, W = x.value.shape
    dtype = x.value.dtype
    m_h = _resize_matrix(H, out_h, dtype)
    m_w = _resize_matrix(W, out_w, dtype)
    rows = np.matmul(x.value.transpose(0, 1, 3, 2), m_h)       # [B,C,W,out_h]
    out_value = np.matmul(rows.transpose(0, 1, 3, 2), m_w)     # [B,C,out_h,out_w]
    del rows
    out = _make(np.ascontiguousarray(out_value), x.requires_grad)

    def backward_fn(g):
        d_rows = np.matmul(g, m_w.T).transpose(0, 1, 3, 2)     # [B,C,W,out_h]
        dx = np.matmul(d_rows, m_h.T).transpose(0, 1, 3, 2)    # [B,C,H,W]
        _accumulate(x, np.ascontiguousarray(dx))

    _record(out, backward_fn)
    return out


def gather_pixels(x, rows, cols):
    """Pick x[rows[k], cols[k]] from a [H,W] Variable -> [K]."""
    if x.value.ndim != 2:
        raise ValueError(f"gather_pixels expects [H,W], got {x.value.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = _make(x.value[rows, cols], x.requires_grad)

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (rows, cols), g)
        _accumulate(x, gx)

    _record(out, backward_fn)
    return out


def bilinear_sample(x, sx, sy):
    """Sample a [H,W] Variable at K continuous array coordinates.

    sx, sy are Variables (or arrays) of shape [K] holding column/row array
    coordinates (integers fall exactly on pixels).  Samples are edge-clamped;
    gradients flow to the map values and, inside the image, to the
    coordinates themselves.
    """
    if x.value.ndim != 2:
        raise ValueError(f"bilinear_sample expects [H,W], got {x.value.shape}")
    sx = _as_variable(sx)
    sy = _as_variable(sy)
    _check_same_shape(sx, sy, "bilinear_sample")
    H, W = x.value.shape
    dtype = x.value.dtype
    # non-finite coordinates (a NaN response upstream) must poison the
    # sample, not crash the integer index computation
    finite = np.isfinite(sx.value) & np.isfinite(sy.value)
    cx = np.clip(np.where(finite, sx.value, 0.0), 0.0, W - 1.0)
    cy = np.clip(np.where(finite, sy.value, 0.0), 0.0, H - 1.0)
    x0 = np.minimum(np.floor(cx).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (cx - x0).astype(dtype)
    fy = (cy - y0).astype(dtype)
    v00 = x.value[y0, x0]
    v01 = x.value[y0, x1]
    v10 = x.value[y1, x0]
    v11 = x.value[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out_value = top * (1.0 - fy) + bot * fy
    if not finite.all():
        out_value = np.where(finite, out_value, np.nan)
    out = _make(out_value.astype(dtype, copy=False), x.requires_grad or sx.requires_grad or sy.requires_grad)

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            np.add.at(gx, (y0, x0), g * (1.0 - fy) * (1.0 - fx))
            np.add.at(gx, (y0, x1), g * (1.0 - fy) * fx)
            np.add.at(gx, (y1, x0), g * fy * (1.0 - fx))
            np.add.at(gx, (y1, x1), g * fy * fx)
            _accumulate(x, gx)
        if sx.requires_grad:
            slope = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
            inside = (sx.value >= 0.0) & (sx.value <= W - 1.0)
            _accumulate(sx, g * slope * inside)
        if sy.requires_grad:
            slope = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx
            inside = (sy.value >= 0.0) & (sy.value <= H - 1.0)
            _accumulate(sy, g * slope * inside)

    _record(out, backward_fn)
    return out


def warp_bilinear(x, sample_rows, sample_cols):
    """Resample a [H,W] Variable on a dense constant grid of array coords.

    sample_rows/sample_cols are ndarrays of any common shape S; the result
    has shape S with edge-clamped bilinear samples.  Gradients flow to the
    map only (the grid is constant), scattered with bincount so backward
    stays O(|S|).
    """
    if x.value.ndim != 2:
        raise ValueError(f"warp_bilinear expects [H,W], got {x.value.shape}")
    H, W = x.value.shape
    dtype = x.value.dtype
    rows = np.asarray(sample_rows, dtype=np.float64)
    cols = np.asarray(sample_cols, dtype=np.float64)
    if rows.shape != cols.shape:
        raise ValueError(f"warp_bilinear: grid shapes differ {rows.shape} vs {cols.shape}")
    # degenerate homographies can put NaN in the grids; keep indices legal
    finite = np.isfinite(rows) & np.isfinite(cols)
    cy = np.clip(np.where(finite, rows, 0.0), 0.0, H - 1.0)
    cx = np.clip(np.where(finite, cols, 0.0), 0.0, W - 1.0)
    y0 = np.minimum(np.floor(cy).astype(np.int64), max(H - 2, 0))
    x0 = np.minimum(np.floor(cx).astype(np.int64), max(W - 2, 0))
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (cy - y0).astype(dtype)
    fx = (cx - x0).astype(dtype)
    v = x.value
    out_value = (
        v[y0, x0] * (1.0 - fy) * (1.0 - fx)
        + v[y0, x1] * (1.0 - fy) * fx
        + v[y1, x0] * fy * (1.0 - fx)
        + v[y1, x1] * fy * fx
    )
    if not finite.all():
        out_value = np.where(finite, out_value, np.nan)
    out = _make(out_value.astype(dtype, copy=False), x.requires_grad)

    def backward_fn(g):
        total = H * W
        flat = lambda yy, xx: (yy * W + xx).ravel()
        acc = np.bincount(flat(y0, x0), weights=(g * (1.0 - fy) * (1.0 - fx)).ravel(), minlength=total)
        acc += np.bincount(flat(y0, x1), weights=(g * (1.0 - fy) * fx).ravel(), minlength=total)
        acc += np.bincount(flat(y1, x0), weights=(g * fy * (1.0 - fx)).ravel(), minlength=total)
        acc += np.bincount(flat(y1, x1), weights=(g * fy * fx).ravel(), minlength=total)
        _accumulate(x, acc.reshape(H, W).astype(dtype))

    _record(out, backward_fn)
    return out


def gather_pixels_batch(x, rows, cols):
    """Per-sample pixel gather: x [B,H,W], rows/cols int [B,K] -> [B,K]."""
    if x.value.ndim != 3:
        raise ValueError(f"gather_pixels_batch expects [B,H,W], got {x.value.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    B = x.value.shape[0]
    bidx = np.arange(B, dtype=np.int64)[:, None]
    out = _make(x.value[bidx, rows, cols], x.requires_grad)

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (bidx, rows, cols), g)
        _accumulate(x, gx)

    _record(out, backward_fn)
    return out


def bilinear_sample_batch(x, sx, sy):
    """Per-sample bilinear sampling: x [B,H,W], sx/sy [B,K] array coords.

    Same semantics as bilinear_sample, vectorized over the leading batch
    axis; gradients flow to the maps and to the coordinates.
    """
    if x.value.ndim != 3:
        raise ValueError(f"bilinear_sample_batch expects [B,H,W], got {x.value.shape}")
    sx = _as_variable(sx)
    sy = _as_variable(sy)
    _check_same_shape(sx, sy, "bilinear_sample_batch")
    B, H, W = x.value.shape
    dtype = x.value.dtype
    bidx = np.arange(B, dtype=np.int64)[:, None]
    # non-finite coordinates (a NaN response upstream) must poison the
    # sample, not crash the integer index computation
    finite = np.isfinite(sx.value) & np.isfinite(sy.value)
    cx = np.clip(np.where(finite, sx.value, 0.0), 0.0, W - 1.0)
    cy = np.clip(np.where(finite, sy.value, 0.0), 0.0, H - 1.0)
    x0 = np.minimum(np.floor(cx).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (cx - x0).astype(dtype)
    fy = (cy - y0).astype(dtype)
    v00 = x.value[bidx, y0, x0]
    v01 = x.value[bidx, y0, x1]
    v10 = x.value[bidx, y1, x0]
    v11 = x.value[bidx, y1, x1]
    out_value = (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
    if not finite.all():
        out_value = np.where(finite, out_value, np.nan)
    out = _make(
        out_value.astype(dtype, copy=False),
        x.requires_grad or sx.requires_grad or sy.requires_grad,
    )

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            np.add.at(gx, (bidx, y0, x0), g * (1.0 - fy) * (1.0 - fx))
            np.add.at(gx, (bidx, y0, x1), g * (1.0 - fy) * fx)
            np.add.at(gx, (bidx, y1, x0), g * fy * (1.0 - fx))
            np.add.at(gx, (bidx, y1, x1), g * fy * fx)
            _accumulate(x, gx)
        if sx.requires_grad:
            slope = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
            inside = (sx.value >= 0.0) & (sx.value <= W - 1.0)
            _accumulate(sx, g * slope * inside)
        if sy.requires_grad:
            slope = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx
            inside = (sy.value >= 0.0) & (sy.value <= H - 1.0)
            _accumulate(sy, g * slope * inside)

    _record(out, backward_fn)
    return out


def warp_bilinear_batch(x, sample_rows, sample_cols):
    """Per-sample dense resampling: x [B,H,W], constant grids [B,H',W']."""
    if x.value.ndim != 3:
        raise ValueError(f"warp_bilinear_batch expects [B,H,W], got {x.value.shape}")
    B, H, W = x.value.shape
    dtype = x.value.dtype
    rows = np.asarray(sample_rows, dtype=np.float64)
    cols = np.asarray(sample_cols, dtype=np.float64)
    if rows.shape != cols.shape or rows.shape[0] != B:
        raise ValueError(
            f"warp_bilinear_batch: grids {rows.shape}/{cols.shape} do not match batch {B}"
        )
    bidx = np.arange(B, dtype=np.int64).reshape((B,) + (1,) * (rows.ndim - 1))
    # degenerate homographies can put NaN in the grids; keep indices legal
    finite = np.isfinite(rows) & np.isfinite(cols)
    cy = np.clip(np.where(finite, rows, 0.0), 0.0, H - 1.0)
    cx = np.clip(np.where(finite, cols, 0.0), 0.0, W - 1.0)
    y0 = np.minimum(np.floor(cy).astype(np.int64), max(H - 2, 0))
    x0 = np.minimum(np.floor(cx).astype(np.int64), max(W - 2, 0))
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (cy - y0).astype(dtype)
    fx = (cx - x0).astype(dtype)
    v = x.value
    out_value = (
        v[bidx, y0, x0] * (1.0 - fy) * (1.0 - fx)
        + v[bidx, y0, x1] * (1.0 - fy) * fx
        + v[bidx, y1, x0] * fy * (1.0 - fx)
        + v[bidx, y1, x1] * fy * fx
    )
    if not finite.all():
        out_value = np.where(finite, out_value, np.nan)
    out = _make(out_value.astype(dtype, copy=False), x.requires_grad)

    def backward_fn(g):
        total = B * H * W
        base = bidx * (H * W)
        flat = lambda yy, xx: (base + yy * W + xx).ravel()
        acc = np.bincount(flat(y0, x0), weights=(g * (1.0 - fy) * (1.0 - fx)).ravel(), minlength=total)
        acc += np.bincount(flat(y0, x1), weights=(g * (1.0 - fy) * fx).ravel(), minlength=total)
        acc += np.bincount(flat(y1, x0), weights=(g * fy * (1.0 - fx)).ravel(), minlength=total)
        acc += np.bincount(flat(y1, x1), weights=(g * fy * fx).ravel(), minlength=total)
        _accumulate(x, acc.reshape(B, H, W).astype(dtype))

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    eps: float = 0.0

    def __str__(self):
        lines = [f"grad_check: max relative error {self.max_rel_error:.3e} (eps={self.eps:g})"]
        for name, err in self.per_param.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(f, params, eps=1e-3, rel_floor=None):
    """Compare analytic gradients of f against central finite differences.

    f is a deterministic zero-argument callable returning a scalar Variable
    built from the given parameter Variables; it is re-evaluated with each
    parameter entry nudged by +/-eps.  The per-parameter error is
    ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, floor)
    where floor defaults to 1e-3 times the largest gradient magnitude over
    all checked parameters.  The global floor keeps parameters whose true
    gradient is exactly zero (for example a convolution bias that a
    following batch normalization cancels) from dividing finite-difference
    round-off noise by itself.
    """
    params = list(params)
    if not params:
        raise ValueError("grad_check: no parameters given")
    for p in params:
        if not p.requires_grad:
            raise ValueError(f"grad_check: parameter {p.name!r} has requires_grad=False")

    for p in params:
        # central differences below nudge entries through a flat view
        p.value = np.ascontiguousarray(p.value)
        p.grad = np.zeros_like(p.value)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.array(p.grad, dtype=np.float64, copy=True) for p in params]

    numerics = []
    for p in params:
        flat = p.value.reshape(-1)
        numeric = np.zeros(flat.shape[0], dtype=np.float64)
        for i in range(flat.shape[0]):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = float(f().value.reshape(-1)[0])
            flat[i] = saved - eps
            f_minus = float(f().value.reshape(-1)[0])
            flat[i] = saved
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        numerics.append(numeric)

    scales = [
        max(
            float(np.max(np.abs(a))) if a.size else 0.0,
            float(np.max(np.abs(n))) if n.size else 0.0,
        )
        for a, n in zip(analytic, numerics)
    ]
    global_scale = max(scales, default=0.0)
    if rel_floor is None:
        tiny = 1e-6 if get_default_dtype() == np.float32 else 1e-10
        rel_floor = max(1e-3 * global_scale, tiny)

    per_param = {}
    worst = 0.0
    for idx, p in enumerate(params):
        a = analytic[idx].reshape(-1)
        diff = float(np.max(np.abs(a - numerics[idx]))) if a.size else 0.0
        rel = diff / max(scales[idx], rel_floor)
        name = p.name or f"param{idx}"
        per_param[name] = rel
        worst = max(worst, rel)
    return GradCheckReport(max_rel_error=worst, per_param=per_param, eps=eps)
