"""Differentiable operations on :class:`~normlab.tensor.Tensor`.

Elementwise binary ops require identical shapes (Python scalars are the only
implicit broadcast). Anything else must go through :func:`broadcast_to`
explicitly, or through :func:`dense`, whose bias broadcasts over rows.
"""

from __future__ import annotations

import math
from numbers import Real

import numpy as np

from .exceptions import ConfigurationError, InputError, ShapeError
from .tensor import Tensor, as_tensor, make_result

# Branch patterns of piecewise-linear ops (relu masks, max-pool argmaxes).
# While recording, every such op appends its pattern; while replaying, each
# op takes its pattern from the list instead of computing it, which pins the
# function to one linear piece for finite-difference checks.
_branch_record: list | None = None
_branch_replay: list | None = None


def _branch(pattern_fn):
    global _branch_replay
    if _branch_replay is not None:
        if not _branch_replay:
            raise InputError("branch replay ran out of recorded patterns")
        return _branch_replay.pop(0)
    pattern = pattern_fn()
    if _branch_record is not None:
        _branch_record.append(pattern)
    return pattern


class branch_patterns:
    """Record (``replay=None``) or replay the branch patterns of relu and max pool."""

    def __init__(self, replay: list | None = None):
        self.replay = replay

    def __enter__(self) -> list:
        global _branch_record, _branch_replay
        self._saved = (_branch_record, _branch_replay)
        if self.replay is None:
            _branch_record, _branch_replay = [], None
            return _branch_record
        _branch_record, _branch_replay = None, list(self.replay)
        return _branch_replay

    def __exit__(self, *exc) -> None:
        global _branch_record, _branch_replay
        _branch_record, _branch_replay = self._saved


def _same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (use broadcast_to)")


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    if isinstance(b, Real):
        a = as_tensor(a)
        return make_result("add", a.data + b, (a,), lambda g: (g,))
    if isinstance(a, Real):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if isinstance(b, Real):
        return add(a, -float(b))
    if isinstance(a, Real):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, Real):
        a, s = as_tensor(a), float(b)
        return make_result("mul", a.data * s, (a,), lambda g: (g * s,))
    if isinstance(a, Real):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    if isinstance(b, Real):
        return mul(a, 1.0 / float(b))
    if isinstance(a, Real):
        b = as_tensor(b)
        bd, s = b.data, float(a)
        return make_result("rdiv", s / bd, (b,), lambda g: (-g * s / (bd * bd),))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result("log", np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = _branch(lambda: x.data > 0)
    return make_result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return make_result("softplus", out, (x,), lambda g: (g * sig,))


# --------------------------------------------------------------------------
# reductions and shape manipulation

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return make_result("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result("transpose", out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    shape = tuple(int(s) for s in shape)
    src = x.shape
    if len(src) != len(shape):
        raise ShapeError(f"broadcast_to: rank {len(src)} -> {len(shape)}; reshape first")
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)
    return make_result("broadcast_to", out, (x,), lambda g: (np.sum(g, axis=axes, keepdims=True),))


def index(x: Tensor, key) -> Tensor:
    shape = x.shape
    out = np.array(x.data[key], dtype=np.float64)

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return make_result("index", out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result("concat", out, tuple(tensors), backward)


# --------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not conform to weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return make_result("dense", out, (x, weight), lambda g: (g @ wd.T, xd.T @ g))
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = out + bias.data
    return make_result("dense", out, (x, weight, bias),
                       lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# --------------------------------------------------------------------------
# softmax family

def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(xd - m), axis=axis, keepdims=True))
    p = np.exp(xd - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return make_result("logsumexp", out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - np.max(xd, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return make_result("softmax", p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    out = xd - m - np.log(np.sum(np.exp(xd - m), axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N x L logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise InputError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -np.mean(logp[rows, labels])

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (float(np.asarray(g).reshape(-1)[0]) / n),)

    return make_result("softmax_cross_entropy", np.array(loss), (logits,), backward)


# --------------------------------------------------------------------------
# normalization primitives

def standardize(x: Tensor, axes, eps: float) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` with biased moments over ``axes``.

    Fused so that normalization layers backpropagate through their batch
    statistics without materialising a dozen intermediates.
    """
    axes = _norm_axes(axes, x.ndim)
    xd = x.data
    mu = np.mean(xd, axis=axes, keepdims=True)
    centered = xd - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = np.mean(g, axis=axes, keepdims=True)
        gx = np.mean(g * xhat, axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_result("standardize", xhat, (x,), backward)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor | None = None) -> Tensor:
    """Per-channel ``scale * x + shift`` for ``(N, C, ...)`` inputs."""
    c = x.shape[1]
    if scale.shape != (c,) or (shift is not None and shift.shape != (c,)):
        raise ShapeError(f"channel_affine: expected ({c},) parameters")
    view = (1, c) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    xd, sd = x.data, scale.data.reshape(view)
    out = xd * sd
    if shift is None:
        return make_result("channel_affine", out, (x, scale),
                           lambda g: (g * sd, np.sum(g * xd, axis=red)))
    out = out + shift.data.reshape(view)
    return make_result("channel_affine", out, (x, scale, shift),
                       lambda g: (g * sd, np.sum(g * xd, axis=red), np.sum(g, axis=red)))


# --------------------------------------------------------------------------
# convolution and pooling

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv geometry: ({size} + 2*{pad} - {k}) / {stride} + 1 is not a positive integer")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``(N, C_in, H, W)`` with ``(C_out, C_in, kH, kW)``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    if stride < 1 or pad < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and pad >= 0")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    # NHWC layout makes every kernel tap a contiguous (N*Ho*Wo, C) @ (C, C_out) GEMM.
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    wd = kernel.data
    wt = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))  # (kH, kW, C_in, C_out), BLAS-friendly taps
    out = np.zeros((n * ho * wo, c_out))

    def patch(i, j):
        return xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :].reshape(-1, c)

    for i in range(kh):
        for j in range(kw):
            out += patch(i, j) @ wt[i, j]
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out += bias.data
    result = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        gwt = np.empty_like(wt)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gwt[i, j] = patch(i, j).T @ g2
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                    (g2 @ wt[i, j].T).reshape(n, ho, wo, c)
        gw = np.ascontiguousarray(gwt.transpose(3, 2, 0, 1))
        gx = gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv2d", np.ascontiguousarray(result), inputs, backward)


def pool_output_size(size: int, window: int, stride: int, pad: int, ceil_mode: bool) -> int:
    span = size + 2 * pad - window
    if window < 1 or stride < 1 or pad < 0 or span < 0:
        raise ConfigurationError(f"pool geometry invalid: size={size} window={window} stride={stride} pad={pad}")
    if ceil_mode:
        out = -(-span // stride) + 1
        # the last window must start inside the (padded) input
        if (out - 1) * stride >= size + pad:
            out -= 1
        return out
    return span // stride + 1


def pool2d(x: Tensor, kind: str = "max", window: int = 2, stride: int | None = None,
           pad: int = 0, ceil_mode: bool = False) -> Tensor:
    """Max or average pooling over square windows.

    Max pooling routes the gradient to the first maximum in row-major window
    order. Average pooling divides by the number of window cells that fall
    inside the padded input, so ceil-mode overhang cells are not counted.
    """
    if kind not in ("max", "avg"):
        raise ConfigurationError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects rank-4 input, got {x.shape}")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    ho = pool_output_size(h, window, stride, pad, ceil_mode)
    wo = pool_output_size(w, window, stride, pad, ceil_mode)
    extra_h = max(0, (ho - 1) * stride + window - (h + 2 * pad))
    extra_w = max(0, (wo - 1) * stride + window - (w + 2 * pad))
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad + extra_h), (pad, pad + extra_w)), constant_values=fill)

    def tap(arr, i, j):
        return arr[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]

    if kind == "max":
        def argmax_pattern():
            best = np.full((n, c, ho, wo), -np.inf)
            arg = np.zeros((n, c, ho, wo), dtype=np.int64)
            for k in range(window * window):
                v = tap(xp, k // window, k % window)
                better = v > best
                best = np.where(better, v, best)
                arg = np.where(better, k, arg)
            return arg

        arg = _branch(argmax_pattern)
        out = np.zeros((n, c, ho, wo))
        for k in range(window * window):
            out = np.where(arg == k, tap(xp, k // window, k % window), out)

        def backward(g):
            gxp = np.zeros_like(xp)
            k = 0
            for i in range(window):
                for j in range(window):
                    tap(gxp, i, j)[...] += np.where(arg == k, g, 0.0)
                    k += 1
            return (gxp[:, :, pad:pad + h, pad:pad + w].copy(),)

        return make_result("max_pool2d", out, (x,), backward)

    valid = np.pad(np.ones((1, 1, h + 2 * pad, w + 2 * pad)), ((0, 0), (0, 0), (0, extra_h), (0, extra_w)))
    count = np.zeros((1, 1, ho, wo))
    total = np.zeros((n, c, ho, wo))
    for i in range(window):
        for j in range(window):
            total += tap(xp, i, j)
            count += tap(valid, i, j)
    out = total / count

    def backward(g):
        gs = g / count
        gxp = np.zeros_like(xp)
        for i in range(window):
            for j in range(window):
                tap(gxp, i, j)[...] += gs
        return (gxp[:, :, pad:pad + h, pad:pad + w].copy(),)

    return make_result("avg_pool2d", out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], int(math.prod(x.shape[1:]))))
