"""The closed op set of the engine.

Every op takes DiffTensors (plain arrays and scalars are wrapped as constants),
computes its forward value in float64, and, when an input requires a gradient
and a tape is active, records a closure mapping the output gradient to one
gradient per input.

Layout convention for volumetric ops is channel-last: ``(N, T, H, W, C)``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DiffTensor, TensorError, active_tape, as_tensor

Axis = int | tuple[int, ...] | None


def _emit(kind: str, inputs: Sequence[DiffTensor], value: np.ndarray,
          backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> DiffTensor:
    needs = any(t.requires_grad for t in inputs)
    out = DiffTensor(value, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.add(kind, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: DiffTensor, b: DiffTensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError(op, "operands are not broadcast-compatible", [a.shape, b.shape]) from None


# -- elementwise binary --------------------------------------------------------

def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.value + b.value,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if ra else None
        gb = _unbroadcast(g * a.value, b.shape) if rb else None
        return ga, gb

    return _emit("mul", (a, b), a.value * b.value, backward)


def matmul(a, b) -> DiffTensor:
    """``(..., k) @ (k, m) -> (..., m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise TensorError("matmul", "expected (..., k) @ (k, m)", [a.shape, b.shape])
    value = a.value @ b.value
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        ga = g @ b.value.T if ra else None
        gb = None
        if rb:
            gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _emit("matmul", (a, b), value, backward)


# -- scalar ops ----------------------------------------------------------------

def add_scalar(x, c: float) -> DiffTensor:
    x = as_tensor(x)
    return _emit("add_scalar", (x,), x.value + c, lambda g: (g,))


def mul_scalar(x, c: float) -> DiffTensor:
    x = as_tensor(x)
    return _emit("mul_scalar", (x,), x.value * c, lambda g: (g * c,))


def pow_scalar(x, p: float) -> DiffTensor:
    x = as_tensor(x)
    return _emit("pow_scalar", (x,), x.value ** p,
                 lambda g: (g * p * x.value ** (p - 1),))


def exp(x) -> DiffTensor:
    x = as_tensor(x)
    y = np.exp(x.value)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def log(x) -> DiffTensor:
    x = as_tensor(x)
    if np.any(x.value <= 0):
        raise TensorError("log", "input must be positive", [x.shape])
    return _emit("log", (x,), np.log(x.value), lambda g: (g / x.value,))


def abs_(x) -> DiffTensor:
    x = as_tensor(x)
    return _emit("abs", (x,), np.abs(x.value), lambda g: (g * np.sign(x.value),))


def reciprocal(x) -> DiffTensor:
    x = as_tensor(x)
    if np.any(x.value == 0):
        raise TensorError("reciprocal", "division by zero", [x.shape])
    y = 1.0 / x.value
    return _emit("reciprocal", (x,), y, lambda g: (-g * y * y,))


def maximum_scalar(x, c: float) -> DiffTensor:
    """``max(x, c)``; the gradient is passed only where ``x > c``."""
    x = as_tensor(x)
    keep = x.value > c
    return _emit("maximum_scalar", (x,), np.where(keep, x.value, c),
                 lambda g: (g * keep,))


def square(x) -> DiffTensor:
    x = as_tensor(x)
    return _emit("square", (x,), x.value * x.value, lambda g: (2.0 * g * x.value,))


def sqrt(x) -> DiffTensor:
    x = as_tensor(x)
    if np.any(x.value < 0):
        raise TensorError("sqrt", "input must be nonnegative", [x.shape])
    y = np.sqrt(x.value)
    return _emit("sqrt", (x,), y, lambda g: (g * 0.5 / np.where(y > 0, y, np.inf),))


def relu(x) -> DiffTensor:
    x = as_tensor(x)
    gate = x.value > 0
    return _emit("relu", (x,), np.where(gate, x.value, 0.0), lambda g: (g * gate,))


def sigmoid(x) -> DiffTensor:
    """Composite: ``1 / (1 + exp(-x))``."""
    return reciprocal(add_scalar(exp(mul_scalar(x, -1.0)), 1.0))


# -- reductions ----------------------------------------------------------------

def _norm_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis: Axis = None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    value = x.value.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", (x,), value, backward)


def mean(x, axis: Axis = None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    value = x.value.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _emit("mean", (x,), value, backward)


# -- shape ops -----------------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> DiffTensor:
    x = as_tensor(x)
    try:
        value = x.value.reshape(tuple(shape))
    except ValueError:
        raise TensorError("reshape", f"cannot reshape to {tuple(shape)}", [x.shape]) from None
    return _emit("reshape", (x,), value, lambda g: (g.reshape(x.shape),))


def slice_(x, index) -> DiffTensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not (isinstance(i, (slice, int)) or i is Ellipsis or i is None):
            raise TensorError("slice", f"unsupported index {i!r}", [x.shape])
    value = x.value[index]

    def backward(g):
        out = np.zeros_like(x.value)
        out[index] = g
        return (out,)

    return _emit("slice", (x,), value, backward)


def concat(tensors: Sequence, axis: int = 0) -> DiffTensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise TensorError("concat", "no inputs")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise TensorError("concat", f"shapes disagree off axis {axis}", [t.shape for t in ts])
    value = np.concatenate([t.value for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _emit("concat", ts, value, backward)


def broadcast_to(x, shape: Sequence[int]) -> DiffTensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(x.value, shape).copy()
    except ValueError:
        raise TensorError("broadcast", f"cannot broadcast to {shape}", [x.shape]) from None
    return _emit("broadcast", (x,), value, lambda g: (_unbroadcast(g, x.shape),))


def upsample_nearest(x, factor: int = 2) -> DiffTensor:
    """Composite spatial nearest-neighbour upsampling of ``(N, T, H, W, C)``."""
    n, t, h, w, c = x.shape
    y = reshape(x, (n, t, h, 1, w, 1, c))
    y = broadcast_to(y, (n, t, h, factor, w, factor, c))
    return reshape(y, (n, t, h * factor, w * factor, c))


# -- volumetric ops ------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise TensorError("conv3d", f"expected 3 values, got {v}")
    return v


def conv3d(x, w, padding=1) -> DiffTensor:
    """Stride-1 3D convolution (cross-correlation).

    x: ``(N, T, H, W, Cin)``; w: ``(kt, kh, kw, Cin, Cout)``; zero padding
    ``padding`` per spatial-temporal axis.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[4] != w.shape[3]:
        raise TensorError("conv3d", "expected x (N,T,H,W,Cin), w (kt,kh,kw,Cin,Cout)",
                          [x.shape, w.shape])
    pt, ph, pw = _triple(padding)
    kt, kh, kw, cin, cout = w.shape
    n, t, h, wd, _ = x.shape
    to, ho, wo = t + 2 * pt - kt + 1, h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if min(to, ho, wo) < 1:
        raise TensorError("conv3d", "kernel larger than padded input", [x.shape, w.shape])
    xp = np.pad(x.value, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((n, to, ho, wo, cout))
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                out += xp[:, a:a + to, b:b + ho, c:c + wo, :] @ w.value[a, b, c]
    rx, rw = x.requires_grad, w.requires_grad

    def backward(g):
        gx = gw = None
        if rx:
            gxp = np.zeros_like(xp)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        gxp[:, a:a + to, b:b + ho, c:c + wo, :] += g @ w.value[a, b, c].T
            gx = gxp[:, pt:pt + t, ph:ph + h, pw:pw + wd, :]
        if rw:
            g2 = g.reshape(-1, cout)
            gw = np.empty_like(w.value)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        gw[a, b, c] = xp[:, a:a + to, b:b + ho, c:c + wo, :].reshape(-1, cin).T @ g2
        return gx, gw

    return _emit("conv3d", (x, w), out, backward)


def avg_pool3d(x, kernel=(1, 2, 2)) -> DiffTensor:
    """Non-overlapping average pooling (stride equals kernel)."""
    x = as_tensor(x)
    kt, kh, kw = _triple(kernel)
    if x.ndim != 5:
        raise TensorError("avg_pool3d", "expected (N,T,H,W,C)", [x.shape])
    n, t, h, w, c = x.shape
    if t % kt or h % kh or w % kw:
        raise TensorError("avg_pool3d", f"kernel {(kt, kh, kw)} does not divide input", [x.shape])
    blocks = x.value.reshape(n, t // kt, kt, h // kh, kh, w // kw, kw, c)
    value = blocks.mean(axis=(2, 4, 6))
    scale = 1.0 / (kt * kh * kw)

    def backward(g):
        gb = np.broadcast_to(g[:, :, None, :, None, :, None, :] * scale, blocks.shape)
        return (gb.reshape(x.shape),)

    return _emit("avg_pool3d", (x,), value, backward)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5,
               update_running: bool = True) -> DiffTensor:
    """Per-channel (last axis) batch normalisation.

    In training mode the batch statistics normalise ``x`` and, when
    ``update_running`` is set, the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.  In eval mode the
    running statistics are used and the op is affine in ``x``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError("batch_norm", "gamma/beta must match channel count",
                          [x.shape, gamma.shape, beta.shape])
    axes = tuple(range(x.ndim - 1))
    if training:
        m = x.value.size // c
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        if update_running:
            unbiased = var * m / max(m - 1, 1)
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    value = xhat * gamma.value + beta.value
    rx, rg, rb = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if rg else None
        gb = g.sum(axis=axes) if rb else None
        gx = None
        if rx:
            gxhat = g * gamma.value
            if training:
                m = x.value.size // c
                gx = inv / m * (m * gxhat - gxhat.sum(axis=axes)
                                - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return _emit("batch_norm", (x, gamma, beta), value, backward)


OPS: dict[str, Callable[..., DiffTensor]] = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul,
    "conv3d": conv3d, "avg_pool3d": avg_pool3d, "relu": relu,
    "batch_norm": batch_norm, "mean": mean, "sum": sum_, "square": square,
    "sqrt": sqrt, "add_scalar": add_scalar, "mul_scalar": mul_scalar,
    "pow_scalar": pow_scalar, "exp": exp, "log": log, "abs": abs_,
    "reciprocal": reciprocal, "maximum_scalar": maximum_scalar,
    "reshape": reshape, "slice": slice_, "concat": concat, "broadcast": broadcast_to,
}


def record(kind: str, inputs: Sequence, **attrs) -> DiffTensor:
    """Dispatch ``kind`` over ``inputs`` with keyword attributes."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise TensorError(kind, f"unknown op kind; supported: {sorted(OPS)}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
