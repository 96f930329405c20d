"""Dense float tensors with reverse-mode differentiation on an explicit tape.

A ``Tensor`` wraps a numpy array (float32 or float64) together with an
optional gradient buffer.  Differentiable operations append a record to the
currently active ``Tape``; because records are appended in execution order,
the record list is already a topological order of the data-flow graph and
``gatt.autodiff.backward`` simply replays it once, in reverse.

Numerical conventions, fixed for reproducibility:

* conv2d / matmul / bmm accumulate in float64 internally regardless of the
  storage dtype, then cast back.  With identical inputs this makes results
  bit-reproducible across runs and independent of BLAS threading.
* reductions use numpy's deterministic reduction kernels; ``max`` ties are
  resolved to the lowest flat index, which also fixes gradient routing.
* relu'(0) = 0.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"f32": np.float32, "f64": np.float64}
DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class Tape:
    """Append-only record of executed differentiable ops.

    Usable as a context manager; while active, ops on tensors with
    ``requires_grad`` append ``(backward_fn, out)`` pairs.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES.get(dtype, dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return DTYPE_TAGS[self.data.dtype]

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all defer to the module-level ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _ensure_grad(t):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _record(out, parents, backward_fn):
    """Mark `out` as requiring grad and put `backward_fn` on the active tape."""
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return
    out.requires_grad = True
    tape.records.append((backward_fn, out))


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(g.dtype, copy=False)


def _check_same_dtype(a, b):
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    b = _coerce(b, a)
    _check_same_dtype(a, b)
    out = Tensor(a.data + b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += _unbroadcast(g, a.shape).astype(a.data.dtype, copy=False)
        if b.requires_grad:
            _ensure_grad(b)
            b.grad += _unbroadcast(g, b.shape).astype(b.data.dtype, copy=False)

    _record(out, (a, b), bwd)
    return out


def sub(a, b):
    b = _coerce(b, a)
    _check_same_dtype(a, b)
    out = Tensor(a.data - b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += _unbroadcast(g, a.shape).astype(a.data.dtype, copy=False)
        if b.requires_grad:
            _ensure_grad(b)
            b.grad -= _unbroadcast(g, b.shape).astype(b.data.dtype, copy=False)

    _record(out, (a, b), bwd)
    return out


def mul(a, b):
    b = _coerce(b, a)
    _check_same_dtype(a, b)
    out = Tensor(a.data * b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += _unbroadcast(g * b.data, a.shape).astype(a.data.dtype, copy=False)
        if b.requires_grad:
            _ensure_grad(b)
            b.grad += _unbroadcast(g * a.data, b.shape).astype(b.data.dtype, copy=False)

    _record(out, (a, b), bwd)
    return out


def div(a, b):
    b = _coerce(b, a)
    _check_same_dtype(a, b)
    out = Tensor(a.data / b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += _unbroadcast(g / b.data, a.shape).astype(a.data.dtype, copy=False)
        if b.requires_grad:
            _ensure_grad(b)
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.shape).astype(
                b.data.dtype, copy=False)

    _record(out, (a, b), bwd)
    return out


def neg(a):
    out = Tensor(-a.data)

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad -= out.grad

    _record(out, (a,), bwd)
    return out


def relu(a):
    mask = a.data > 0  # relu'(0) = 0 by convention
    out = Tensor(np.where(mask, a.data, a.data.dtype.type(0)))

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += out.grad * mask

    _record(out, (a,), bwd)
    return out


def sigmoid(a):
    """Logistic function 1 / (1 + exp(-z)), computed via tanh for stability."""
    half = a.data.dtype.type(0.5)
    s = half * (np.tanh(half * a.data) + a.data.dtype.type(1.0))
    out = Tensor(s)

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += out.grad * s * (1.0 - s)

    _record(out, (a,), bwd)
    return out


def exp(a):
    e = np.exp(a.data)
    out = Tensor(e)

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += out.grad * e

    _record(out, (a,), bwd)
    return out


def log(a):
    out = Tensor(np.log(a.data))

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += out.grad / a.data

    _record(out, (a,), bwd)
    return out


def sqrt(a):
    r = np.sqrt(a.data)
    out = Tensor(r)

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += out.grad / (2.0 * r)

    _record(out, (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes, ndim):
    if axes is None:
        axes = tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def reduce(a, axes=None, mode="sum", keepdims=False):
    """Reduce over `axes` with mode in {sum, mean, max}.

    An empty axis tuple is the identity.  Max ties route gradient to the
    lowest flat index of the reduced block.
    """
    if mode not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduce mode {mode!r}")
    if axes == () or axes == []:
        out = Tensor(a.data.copy())

        def bwd_id():
            if a.requires_grad:
                _ensure_grad(a)
                a.grad += out.grad

        _record(out, (a,), bwd_id)
        return out

    axes = _norm_axes(axes, a.ndim)
    if mode == "sum":
        out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

        def bwd():
            if a.requires_grad:
                _ensure_grad(a)
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, axes)
                a.grad += np.broadcast_to(g, a.shape)

        _record(out, (a,), bwd)
        return out

    if mode == "mean":
        count = int(np.prod([a.shape[i] for i in axes]))
        out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

        def bwd():
            if a.requires_grad:
                _ensure_grad(a)
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, axes)
                a.grad += np.broadcast_to(g, a.shape) / a.data.dtype.type(count)

        _record(out, (a,), bwd)
        return out

    # max: move reduced axes last, flatten, argmax picks the first maximum
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    moved = a.data.transpose(perm)
    outer = moved.shape[:len(kept)]
    flat = moved.reshape(outer + (-1,))
    idx = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out_data = np.expand_dims(vals, axes) if axes else vals
    else:
        out_data = vals
    out = Tensor(out_data.copy())

    def bwd_max():
        if a.requires_grad:
            _ensure_grad(a)
            g = out.grad
            if keepdims:
                g = g.reshape(vals.shape)
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            inv = np.argsort(perm)
            a.grad += gmoved.transpose(inv)

    _record(out, (a,), bwd_max)
    return out


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += out.grad.reshape(a.shape)

    _record(out, (a,), bwd)
    return out


def transpose(a, axes):
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes).copy())
    inv = tuple(np.argsort(axes))

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += out.grad.transpose(inv)

    _record(out, (a,), bwd)
    return out


def narrow(a, axis, start, length):
    """Slice `length` entries from `start` along `axis`."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow out of range: axis {axis} extent {a.shape[axis]}, "
                         f"requested [{start}, {start + length})")
    sl = tuple(slice(None) if i != axis else slice(start, start + length)
               for i in range(a.ndim))
    out = Tensor(a.data[sl].copy())

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad[sl] += out.grad

    _record(out, (a,), bwd)
    return out


def concat(parts, axis):
    parts = list(parts)
    axis = axis % parts[0].ndim
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _ensure_grad(p)
                sl = tuple(slice(None) if i != axis else slice(lo, hi)
                           for i in range(p.ndim))
                p.grad += g[sl]

    _record(out, tuple(parts), bwd)
    return out


def stack(parts, axis=0):
    parts = list(parts)
    out = Tensor(np.stack([p.data for p in parts], axis=axis))

    def bwd():
        g = np.moveaxis(out.grad, axis, 0)
        for i, p in enumerate(parts):
            if p.requires_grad:
                _ensure_grad(p)
                p.grad += g[i]

    _record(out, tuple(parts), bwd)
    return out


def permute_axis(a, axis, perm, inv_perm):
    """Bijective reindex along `axis`: out[..., t, ...] = a[..., perm[t], ...]."""
    axis = axis % a.ndim
    out = Tensor(np.take(a.data, perm, axis=axis))

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += np.take(out.grad, inv_perm, axis=axis)

    _record(out, (a,), bwd)
    return out


def gather_axis(a, axis, idx):
    """General (possibly repeating) gather along `axis`; backward scatter-adds."""
    axis = axis % a.ndim
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(np.take(a.data, idx, axis=axis))

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            g = np.moveaxis(out.grad, axis, 0)
            dst = np.moveaxis(a.grad, axis, 0)
            np.add.at(dst, idx, g)

    _record(out, (a,), bwd)
    return out


def gather_plane(a, src_ij, inv_ij):
    """Bijective reindex of the last two axes.

    out[..., i, j] = a[..., I[i, j], J[i, j]] with (I, J) = src_ij; inv_ij is
    the index map of the inverse bijection, used for the backward pass.
    """
    I, J = src_ij
    out = Tensor(a.data[..., I, J])

    def bwd():
        if a.requires_grad:
            _ensure_grad(a)
            Ii, Ji = inv_ij
            a.grad += out.grad[..., Ii, Ji]

    _record(out, (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# matrix products (float64 accumulation)

def matmul(a, b):
    _check_same_dtype(a, b)
    out64 = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64))
    out = Tensor(out64.astype(a.data.dtype))

    def bwd():
        g = out.grad.astype(np.float64)
        if a.requires_grad:
            _ensure_grad(a)
            a.grad += np.matmul(g, b.data.astype(np.float64).T).astype(a.data.dtype)
        if b.requires_grad:
            _ensure_grad(b)
            b.grad += np.matmul(a.data.astype(np.float64).T, g).astype(b.data.dtype)

    _record(out, (a, b), bwd)
    return out


def bmm(a, b):
    """Batched matmul [..., M, K] @ [..., K, N]; batch axes broadcast."""
    _check_same_dtype(a, b)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = Tensor(np.matmul(a64, b64).astype(a.data.dtype))

    def bwd():
        g = out.grad.astype(np.float64)
        if a.requires_grad:
            _ensure_grad(a)
            ga = np.matmul(g, np.swapaxes(b64, -1, -2))
            a.grad += _unbroadcast(ga, a.shape).astype(a.data.dtype)
        if b.requires_grad:
            _ensure_grad(b)
            gb = np.matmul(np.swapaxes(a64, -1, -2), g)
            b.grad += _unbroadcast(gb, b.shape).astype(b.data.dtype)

    _record(out, (a, b), bwd)
    return out


# ---------------------------------------------------------------------------
# spatial ops

def _pad_amounts(extent, k, stride, padding):
    if padding == "valid":
        if extent < k:
            raise ValueError(f"valid conv needs extent >= kernel ({extent} < {k})")
        return 0, 0, (extent - k) // stride + 1
    if padding == "same":
        out = -(-extent // stride)
        total = max((out - 1) * stride + k - extent, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(fp, k, stride):
    win = sliding_window_view(fp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, yo, xo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, yo * xo)
    return cols, yo, xo


def _col2im(gcols, pad_shape, k, stride, yo, xo):
    n, c, yp, xp = pad_shape
    g = np.zeros(pad_shape, dtype=gcols.dtype)
    gw = gcols.reshape(n, c, k, k, yo, xo)
    for ki in range(k):
        for kj in range(k):
            g[:, :, ki:ki + stride * yo:stride, kj:kj + stride * xo:stride] += gw[:, :, ki, kj]
    return g


def _conv_checks(f, w, stride):
    if f.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects f [N,C,Y,X] and w [O,C,k,k]")
    if f.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {f.shape[1]} vs filter {w.shape[1]}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got {w.shape[2]}x{w.shape[3]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")


def conv2d(f, w, padding="same", stride=1):
    """Channel-summing cross-correlation: out(y) = sum_c sum_x f_c(x) w_c(x - y).

    `same` zero-pads to ceil(extent / stride) outputs; `valid` takes only fully
    covered positions.  Accumulation runs in float64.
    """
    _check_same_dtype(f, w)
    _conv_checks(f, w, stride)
    n, c, y, x = f.shape
    o = w.shape[0]
    k = w.shape[2]
    pt, pb, yo = _pad_amounts(y, k, stride, padding)
    pl, pr, xo = _pad_amounts(x, k, stride, padding)
    fp = np.pad(f.data.astype(np.float64), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols, yo2, xo2 = _im2col(fp, k, stride)
    assert (yo, xo) == (yo2, xo2)
    wm = w.data.astype(np.float64).reshape(o, c * k * k)
    out_flat = np.matmul(wm[None], cols)  # [N, O, P]
    out = Tensor(out_flat.reshape(n, o, yo, xo).astype(f.data.dtype))

    def bwd():
        g = out.grad.astype(np.float64).reshape(n, o, yo * xo)
        if w.requires_grad:
            _ensure_grad(w)
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            w.grad += gw.reshape(w.shape).astype(w.data.dtype)
        if f.requires_grad:
            _ensure_grad(f)
            gcols = np.matmul(wm.T[None], g)
            gp = _col2im(gcols, fp.shape, k, stride, yo, xo)
            f.grad += gp[:, :, pt:pt + y, pl:pl + x].astype(f.data.dtype)

    _record(out, (f, w), bwd)
    return out


def conv2d_multi(f, w, padding="same", stride=1):
    """Like conv2d but keeps per-input-channel responses: out [N, O, C, Yo, Xo].

    out[n, o, c] is the single-channel cross-correlation of f[n, c] with
    w[o, c]; summing over c reproduces conv2d up to accumulation order.
    """
    _check_same_dtype(f, w)
    _conv_checks(f, w, stride)
    n, c, y, x = f.shape
    o = w.shape[0]
    k = w.shape[2]
    pt, pb, yo = _pad_amounts(y, k, stride, padding)
    pl, pr, xo = _pad_amounts(x, k, stride, padding)
    fp = np.pad(f.data.astype(np.float64), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols, _, _ = _im2col(fp, k, stride)
    colsb = cols.reshape(n, c, k * k, yo * xo).transpose(1, 0, 2, 3).reshape(c, n * k * k, yo * xo)
    # per-channel batched product: [C, O, k2] @ [C, k2, P] done per sample
    colsc = cols.reshape(n, c, k * k, yo * xo).transpose(1, 2, 0, 3).reshape(c, k * k, n * yo * xo)
    wb = w.data.astype(np.float64).transpose(1, 0, 2, 3).reshape(c, o, k * k)
    prod = np.matmul(wb, colsc)  # [C, O, N*P]
    out_data = prod.reshape(c, o, n, yo * xo).transpose(2, 1, 0, 3).reshape(n, o, c, yo, xo)
    out = Tensor(out_data.astype(f.data.dtype))
    del colsb

    def bwd():
        g = out.grad.astype(np.float64).reshape(n, o, c, yo * xo)
        gc = g.transpose(2, 1, 0, 3).reshape(c, o, n * yo * xo)
        if w.requires_grad:
            _ensure_grad(w)
            gw = np.matmul(gc, colsc.transpose(0, 2, 1))  # [C, O, k2]
            w.grad += gw.transpose(1, 0, 2).reshape(w.shape).astype(w.data.dtype)
        if f.requires_grad:
            _ensure_grad(f)
            gcolsc = np.matmul(wb.transpose(0, 2, 1), gc)  # [C, k2, N*P]
            gcols = gcolsc.reshape(c, k * k, n, yo * xo).transpose(2, 0, 1, 3).reshape(
                n, c * k * k, yo * xo)
            gp = _col2im(gcols, fp.shape, k, stride, yo, xo)
            f.grad += gp[:, :, pt:pt + y, pl:pl + x].astype(f.data.dtype)

    _record(out, (f, w), bwd)
    return out


def max_pool2d(f, window=2, stride=2):
    """Non-overlapping spatial max pooling; ties go to the lowest index."""
    if f.ndim != 4:
        raise ValueError("max_pool2d expects [N,C,Y,X]")
    n, c, y, x = f.shape
    if window > y or window > x:
        raise ValueError(f"pool window {window} exceeds extent {(y, x)}")
    yo = (y - window) // stride + 1
    xo = (x - window) // stride + 1
    win = sliding_window_view(f.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, yo, xo, window * window)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].copy())

    def bwd():
        if f.requires_grad:
            _ensure_grad(f)
            ni, ci, yi, xi = np.indices((n, c, yo, xo))
            rows = yi * stride + idx // window
            colsx = xi * stride + idx % window
            np.add.at(f.grad, (ni, ci, rows, colsx), out.grad)

    _record(out, (f,), bwd)
    return out


def upsample_nearest(f, factor=2):
    if f.ndim != 4:
        raise ValueError("upsample_nearest expects [N,C,Y,X]")
    out = Tensor(np.repeat(np.repeat(f.data, factor, axis=2), factor, axis=3))

    def bwd():
        if f.requires_grad:
            _ensure_grad(f)
            n, c, y, x = f.shape
            g = out.grad.reshape(n, c, y, factor, x, factor)
            f.grad += g.sum(axis=(3, 5))

    _record(out, (f,), bwd)
    return out


def pad_zero(f, amount):
    """Symmetric spatial zero padding by `amount` on each side."""
    if f.ndim != 4:
        raise ValueError("pad_zero expects [N,C,Y,X]")
    a = int(amount)
    out = Tensor(np.pad(f.data, ((0, 0), (0, 0), (a, a), (a, a))))

    def bwd():
        if f.requires_grad:
            _ensure_grad(f)
            f.grad += out.grad[:, :, a:-a if a else None, a:-a if a else None]

    _record(out, (f,), bwd)
    return out


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch; labels are int class ids."""
    if logits.ndim != 2:
        raise ValueError("softmax_cross_entropy expects logits [N, K]")
    labels = np.asarray(labels)
    n = logits.shape[0]
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(e.sum(axis=1)))
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def bwd():
        if logits.requires_grad:
            _ensure_grad(logits)
            g = p.copy()
            g[np.arange(n), labels] -= 1.0
            logits.grad += (float(out.grad) * g / n).astype(logits.data.dtype)

    _record(out, (logits,), bwd)
    return out
