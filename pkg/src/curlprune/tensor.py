"""Dense tensors with a single-use reverse-mode tape.

Every differentiable op appends one entry to a thread-local tape when any of
its inputs requires gradients. ``backward`` walks the tape in reverse,
accumulates gradients into leaf tensors (``Parameter.grad``), and clears it.
"""

from __future__ import annotations

import contextlib
import io
import logging
import struct
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class Tensor:
    """An n-dimensional float32/float64 value that may carry a gradient."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in DTYPE_TAGS else np.float32
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, _wrap(1.0 / other, self.dtype))

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` is zero-initialized and accumulates."""

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)
        self.velocity: np.ndarray | None = None

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, trainable={self.trainable})"


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# tape


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class _TapeState(threading.local):
    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self.enabled = True


_tape = _TapeState()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def tape_size() -> int:
    return len(_tape.entries)


def clear_tape():
    _tape.entries.clear()


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.entries.append(_TapeEntry(out, tuple(inputs), backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf, then clear the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad or not _tape.entries:
        raise RuntimeError("backward: loss has no recorded history (empty tape)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for entry in reversed(_tape.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for inp, ig in zip(entry.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._op is None:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += ig
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
    finally:
        _tape.entries.clear()


# --------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result("relu", out, (x,), lambda g: (g * (out > 0),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _result("sum", np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean: reducing over empty axes of shape {x.shape}")
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)

    return _result("mean", np.asarray(out, dtype=x.dtype), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected [n,k] @ [k,m], got {a.shape} @ {b.shape}")
    return _result("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def pad(x: Tensor, padding: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes by ``padding`` on every side."""
    if padding < 0:
        raise ShapeError(f"pad: padding must be nonnegative, got {padding}")
    if x.ndim < 2:
        raise ShapeError(f"pad: need at least 2 dims, got shape {x.shape}")
    p = padding
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, width)
    h, w = x.shape[-2:]
    return _result("pad", out, (x,), lambda g: (np.ascontiguousarray(g[..., p : p + h, p : p + w]),))


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Take the ``height x width`` window at (top, left) of the trailing axes."""
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > h or left + width > w:
        raise ShapeError(f"crop: window ({top},{left},{height},{width}) outside spatial dims {(h, w)}")
    out = np.ascontiguousarray(x.data[..., top : top + height, left : left + width])

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., top : top + height, left : left + width] = g
        return (full,)

    return _result("crop", out, (x,), bw)


# --------------------------------------------------------------------------
# convolution


def _out_size(op, size, k, stride, padding):
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(f"{op}: kernel {k} with padding {padding} does not fit spatial extent {size}")
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D convolution lowered to matmul via im2col."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c != cg * groups:
        raise ShapeError(f"conv2d: input channels {c} != weight in_channels {cg} x groups {groups}")
    if o % groups:
        raise ShapeError(f"conv2d: out_channels {o} not divisible by groups {groups}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    oh = _out_size("conv2d", h, kh, stride, padding)
    ow = _out_size("conv2d", w, kw, stride, padding)
    og = o // groups
    pointwise = kh == kw == 1 and padding == 0
    if pointwise:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs.transpose(1, 0, 2, 3)).reshape(c, -1)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)  # [c*kh*kw, n*oh*ow]
    rows = cg * kh * kw
    w2 = weight.data.reshape(o, rows)
    if groups == 1:
        out2 = w2 @ cols
    else:
        out2 = np.empty((o, cols.shape[1]), dtype=x.dtype)
        for gi in range(groups):
            out2[gi * og : (gi + 1) * og] = w2[gi * og : (gi + 1) * og] @ cols[gi * rows : (gi + 1) * rows]
    if bias is not None:
        out2 += bias.data[:, None]
    out = np.ascontiguousarray(out2.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if groups == 1:
            dw = g2 @ cols.T
            dcols = w2.T @ g2
        else:
            dw = np.empty_like(w2)
            dcols = np.empty_like(cols)
            for gi in range(groups):
                go = g2[gi * og : (gi + 1) * og]
                cs = slice(gi * rows, (gi + 1) * rows)
                dw[gi * og : (gi + 1) * og] = go @ cols[cs].T
                dcols[cs] = w2[gi * og : (gi + 1) * og].T @ go
        dx = None
        if x.requires_grad:
            if pointwise:
                d = dcols.reshape(c, n, oh, ow).transpose(1, 0, 2, 3)
                if stride > 1:
                    dx = np.zeros_like(x.data)
                    dx[:, :, ::stride, ::stride] = d
                else:
                    dx = np.ascontiguousarray(d)
            else:
                dx = kernels.col2im(dcols, x.shape, kh, kw, stride, padding)
        db = g2.sum(axis=1) if bias is not None else None
        return (dx, dw.reshape(weight.shape), db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel convolution; ``weight`` is ``[C, 1, kh, kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"depthwise_conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight {weight.shape} does not match input channels {c}")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias shape {bias.shape} != ({c},)")
    kh, kw = weight.shape[2:]
    oh = _out_size("depthwise_conv2d", h, kh, stride, padding)
    ow = _out_size("depthwise_conv2d", w, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding).reshape(c, kh * kw, -1)
    w2 = weight.data.reshape(c, kh * kw)
    out2 = np.einsum("ck,ckl->cl", w2, cols)
    if bias is not None:
        out2 += bias.data[:, None]
    out = np.ascontiguousarray(out2.reshape(c, n, oh, ow).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c, -1)
        dw = np.einsum("cl,ckl->ck", g2, cols)
        dx = None
        if x.requires_grad:
            dcols = (w2[:, :, None] * g2[:, None, :]).reshape(c * kh * kw, -1)
            dx = kernels.col2im(dcols, x.shape, kh, kw, stride, padding)
        db = g2.sum(axis=1) if bias is not None else None
        return (dx, dw.reshape(weight.shape), db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("depthwise_conv2d", out, inputs, bw)


# --------------------------------------------------------------------------
# batch normalization


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all axes except 1.

    Training mode normalizes with biased batch statistics and updates the
    running estimates in place (unbiased variance); eval mode uses the
    running estimates.
    """
    if x.ndim < 2:
        raise ShapeError(f"batchnorm: expected [N, C, ...] input, got {x.shape}")
    n, c = x.shape[:2]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm: channel dim {c} does not match BN width {gamma.shape[0]}")
    dt = x.dtype
    if x.data.size == 0:
        raise ShapeError("batchnorm: empty batch")
    x3 = x.data.reshape(n, c, -1)
    count = x3.shape[0] * x3.shape[2]
    if training:
        mu, var = kernels.bn_stats(x3)
        unbiased = var * (count / max(count - 1, 1))
        running_mean[...] = (1 - momentum) * running_mean + momentum * mu
        running_var[...] = (1 - momentum) * running_var + momentum * unbiased
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv_std
    shift = beta.data - mu * scale
    out = kernels.affine(x3, scale.astype(dt), shift.astype(dt)).reshape(x.shape)

    def bw(g):
        dx, dgamma, dbeta = kernels.bn_backward(g.reshape(n, c, -1), x3, mu.astype(dt), inv_std.astype(dt),
                                                gamma.data, training)
        return dx.reshape(x.shape), dgamma, dbeta

    return _result("batchnorm", out, (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# dispatch


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "depthwise_conv2d": depthwise_conv2d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "batchnorm": batchnorm,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "exp": exp,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "pad": pad,
    "crop": crop,
}


def forward_op(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply ``op_kind`` to ``inputs``; attributes are passed as keywords."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# optimizer


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> bool:
    """Momentum SGD (PyTorch convention: v = m*v + g + wd*w; w -= lr*v).

    Returns False and leaves values untouched when any gradient is
    non-finite. Gradients are zeroed either way.
    """
    if lr < 0:
        raise ValueError(f"sgd_step: lr must be nonnegative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"sgd_step: momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"sgd_step: weight_decay must be nonnegative, got {weight_decay}")
    trainable = [p for p in params if p.trainable]
    bad = [i for i, p in enumerate(trainable) if not np.all(np.isfinite(p.grad))]
    if bad:
        logger.warning("sgd_step aborted: non-finite gradient in %d parameter(s), first index %d", len(bad), bad[0])
        for p in trainable:
            p.grad[...] = 0
        return False
    for p in trainable:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            if p.velocity is None:
                p.velocity = np.array(g, dtype=p.dtype)
            else:
                p.velocity *= momentum
                p.velocity += g
            g = p.velocity
        if lr:
            p.data -= (lr * g).astype(p.dtype, copy=False)
        p.grad[...] = 0
    return True


# --------------------------------------------------------------------------
# serialization


def write_tensor(fh, arr: np.ndarray) -> None:
    """Header: dtype tag u8, rank u8, extents u32 (little-endian); then raw payload."""
    arr = np.asarray(arr)
    if arr.dtype not in DTYPE_TAGS:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    fh.write(struct.pack("<BB", DTYPE_TAGS[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(fh) -> np.ndarray:
    head = fh.read(2)
    if len(head) != 2:
        raise ValueError("truncated tensor header")
    tag, rank = struct.unpack("<BB", head)
    if tag not in TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise ValueError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    dtype = TAG_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise ValueError(f"truncated tensor payload: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))
