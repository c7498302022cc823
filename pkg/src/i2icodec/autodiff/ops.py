"""Differentiable kernels.

Every function takes :class:`Tensor` (or array-like) operands and returns a
new :class:`Tensor`.  Images are laid out channels-first; batched kernels
accept an extra leading batch axis (N x C x H x W) and rank-3 inputs are
treated as a batch of one.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy import special

from .tensor import ShapeError, Tensor, make_node

LEAKY_SLOPE = 0.2


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return make_node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _t(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


_local = threading.local()


@contextmanager
def activation_tape(masks: list | None = None):
    """Record leaky-ReLU sign masks (``masks`` None) or replay a recorded list in order.

    Yields the list being recorded.  Replaying freezes the piecewise-linear
    pattern, so a network built only from linear maps and leaky ReLUs becomes
    affine in its input.
    """
    saved = getattr(_local, "tape", None)
    tape = _local.tape = {"masks": [] if masks is None else masks, "replay": masks is not None, "pos": 0}
    try:
        yield tape["masks"]
    finally:
        _local.tape = saved


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = _t(x)
    _tape = getattr(_local, "tape", None)
    if _tape is None:
        pos = x.data > 0
    elif _tape["replay"]:
        pos = _tape["masks"][_tape["pos"]]
        _tape["pos"] += 1
        if pos.shape != x.shape:
            raise ShapeError(f"replayed mask {pos.shape} does not fit activation {x.shape}")
    else:
        pos = x.data > 0
        _tape["masks"].append(pos)
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x) -> Tensor:
    x = _t(x)
    out = special.expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x) -> Tensor:
    x = _t(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),))


def softplus(x) -> Tensor:
    x = _t(x)
    out = np.logaddexp(0, x.data).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * special.expit(x.data),))


def exp(x) -> Tensor:
    x = _t(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _t(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    sign = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: (g * sign,))


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero where the floor is active."""
    x = _t(x)
    active = x.data >= floor
    out = np.where(active, x.data, np.asarray(floor, dtype=x.dtype))
    return make_node(out, (x,), lambda g: (g * active,))


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_cdf(x) -> Tensor:
    """Standard normal cumulative distribution function."""
    x = _t(x)
    out = special.ndtr(x.data).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * (_INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)),))


# -- reductions and shape ---------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _t(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
    return make_node(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def l1_distance(a, b) -> Tensor:
    """Mean absolute difference over all elements."""
    return mean(abs(sub(a, b)))


def mse(a, b) -> Tensor:
    """Mean squared difference over all elements."""
    d = sub(a, b)
    return mean(mul(d, d))


def reshape(x, shape) -> Tensor:
    x = _t(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _t(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = _t(x)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:  # no repeated positions
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)
    return make_node(x.data[index], (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))
    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def select_rows(x, index: np.ndarray) -> Tensor:
    """out[n] = x[n, index[n]] for a (N, K, ...) tensor."""
    x = _t(x)
    index = np.asarray(index)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)
    return make_node(x.data[rows, index], (x,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return make_node(np.matmul(a.data, b.data), (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """weight . x + bias for a vector x (n_in,) or a batch (N, n_in).

    ``weight`` has shape (n_out, n_in).
    """
    x, weight = _t(x), _t(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    vector = x.ndim == 1
    if vector:
        x = reshape(x, (1, -1))
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (weight.shape[0],)) if vector else out


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-3 or rank-4 image tensor, got shape {x.shape}")
    return x, False


def _im2col(xpad: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a (C, N, Hp, Wp) array as a tap-major (k*k*C, N*ho*wo) matrix."""
    c, n = xpad.shape[:2]
    if k == 1 and stride == 1:
        return xpad.reshape(c, n * ho * wo)
    cols = np.empty((k * k, c, n, ho, wo), dtype=xpad.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    t = 0
    for i in range(k):
        for j in range(k):
            cols[t] = xpad[:, :, i:i + span_h:stride, j:j + span_w:stride]
            t += 1
    return cols.reshape(k * k * c, n * ho * wo)


def _padded_cnhw(x: np.ndarray, p: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
    return out


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is C_in x H x W (or N x C_in x H x W); ``kernel`` is C_out x C_in x k x k.
    """
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"conv2d: stride must be a positive integer, got {stride!r}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding!r}")
    x, kernel = _pair(x, kernel)
    xb, squeeze = _as_batch(x)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x k x k, got {kernel.shape}")
    n, cin, h, w = xb.shape
    cout, kcin, k, _ = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} too large for input {h}x{w} with padding {padding}")

    p = padding
    cols = _im2col(_padded_cnhw(xb.data, p), k, stride, ho, wo)
    # tap-major weight matrix: (cout, k, k, cin)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gk = (gmat @ cols.T).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gx = None
        if xb.requires_grad:
            gcols = (wmat.T @ gmat).reshape(k, k, cin, n, ho, wo)
            gxp = np.zeros((cin, n, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
            gx = np.ascontiguousarray(gxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))
        return gx, np.ascontiguousarray(gk)

    out_t = make_node(out, (xb, kernel), backward)
    if bias is not None:
        bias = _t(bias, x)
        out_t = add(out_t, reshape(bias, (1, cout, 1, 1)))
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def resample(x, factor: int, direction: str) -> Tensor:
    """Nearest-neighbour upsampling ("up") or average pooling ("down")."""
    if factor < 2:
        raise ValueError(f"resample: factor must be >= 2, got {factor}")
    x = _t(x)
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    f = factor
    if direction == "up":
        out = np.repeat(np.repeat(xb.data, f, axis=2), f, axis=3)

        def backward(g):
            return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)
    elif direction == "down":
        if h % f or w % f:
            raise ShapeError(f"resample: extents {h}x{w} not divisible by {f}")
        out = xb.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

        def backward(g):
            g = g / (f * f)
            return (np.repeat(np.repeat(g, f, axis=2), f, axis=3),)
    else:
        raise ValueError(f"resample: direction must be 'up' or 'down', got {direction!r}")
    out_t = make_node(out, (xb,), backward)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def normalize_instance(x, eps: float = 1e-5) -> Tensor:
    """Per-channel zero-mean, unit-variance normalisation over spatial axes."""
    if eps <= 0:
        raise ValueError("normalize_instance: eps must be positive")
    x = _t(x)
    xb, squeeze = _as_batch(x)
    d = xb.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out_t = make_node(xhat.astype(d.dtype, copy=False), (xb,), backward)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def global_mean(x) -> Tensor:
    """Average over spatial axes: N x C x H x W -> N x C."""
    return mean(x, axis=(2, 3))
