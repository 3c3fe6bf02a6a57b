"""Forward ops with backward closures.

Every op validates shapes up front (raising ShapeError with the op name and
both shapes), computes eagerly with numpy, and registers a backward closure
on the active tape. Convolution dispatches to the compiled kernels when
available.
"""

import math

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are not broadcastable")


def add(a, b):
    b = _wrap(b, a)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    record("add", (a, b), out, backward_fn)
    return out


def sub(a, b):
    b = _wrap(b, a)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    record("sub", (a, b), out, backward_fn)
    return out


def mul(a, b):
    b = _wrap(b, a)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    record("mul", (a, b), out, backward_fn)
    return out


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not align")
    out = Tensor(a.data @ b.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    record("matmul", (a, b), out, backward_fn)
    return out


def conv2d(x, w):
    """3x3 stride-1 zero-same-padded convolution, NHWC / [3,3,Ci,Co]."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [B,H,W,C], got {x.data.shape}")
    if w.data.shape[:2] != (3, 3) or w.data.ndim != 4 or w.data.shape[2] != x.data.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.data.shape} incompatible with input {x.data.shape}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = Tensor(kernels.conv2d_fwd(xd, wd))

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x.accumulate_grad(kernels.conv2d_bwd_input(g, wd))
        if w.requires_grad:
            w.accumulate_grad(kernels.conv2d_bwd_weight(xd, g))

    record("conv2d", (x, w), out, backward_fn)
    return out


def avg_pool2x2(x):
    b, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2: spatial dims must be even, got {x.data.shape}")
    out = Tensor(x.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)))

    def backward_fn(g):
        if x.requires_grad:
            gx = np.broadcast_to(
                g[:, :, None, :, None, :] * np.asarray(0.25, dtype=g.dtype),
                (b, h // 2, 2, w // 2, 2, c),
            ).reshape(b, h, w, c)
            x.accumulate_grad(gx)

    record("avg_pool2x2", (x,), out, backward_fn)
    return out


def upsample2x(x):
    b, h, w, c = x.data.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)))

    record("upsample2x", (x,), out, backward_fn)
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    record("relu", (x,), out, backward_fn)
    return out


def gelu(x):
    # tanh approximation; the backward differentiates the approximation.
    xd = x.data
    u = _SQRT_2_OVER_PI * (xd + _GELU_C * xd**3)
    th = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + th))

    def backward_fn(g):
        if x.requires_grad:
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * xd**2)
            x.accumulate_grad(g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * du))

    record("gelu", (x,), out, backward_fn)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the channel (last) dim with learnable gain/bias."""
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.data.shape}/{bias.data.shape} must be ({c},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward_fn(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, c).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad((gh - m1 - xhat * m2) * inv)

    record("layer_norm", (x, gain, bias), out, backward_fn)
    return out


def softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    record("softmax", (x,), out, backward_fn)
    return out


def cross_entropy_logits(logits, targets):
    """Per-position negative log-likelihood of integer targets.

    logits: [..., C]; targets: integer array of shape logits.shape[:-1].
    Fused log-softmax + gather for numerical stability.
    """
    c = logits.data.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy_logits: targets {targets.shape} vs logits {logits.data.shape}"
        )
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(
            f"cross_entropy_logits: target ids must lie in [0, {c}), got "
            f"[{targets.min()}, {targets.max()}]"
        )
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=-1, keepdims=True)
    lse = np.log(se)
    picked = np.take_along_axis(z, targets[..., None], axis=-1)
    out = Tensor((lse - picked)[..., 0])

    def backward_fn(g):
        if logits.requires_grad:
            p = e / se
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            logits.accumulate_grad(g[..., None] * (p - onehot))

    record("cross_entropy_logits", (logits,), out, backward_fn)
    return out


def concat_channels(tensors):
    base = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != base:
            raise ShapeError(
                "concat_channels: leading shapes differ: "
                f"{tensors[0].data.shape} vs {t.data.shape}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    sizes = [t.data.shape[-1] for t in tensors]

    def backward_fn(g):
        ofs = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                t.accumulate_grad(g[..., ofs : ofs + n])
            ofs += n

    record("concat_channels", tuple(tensors), out, backward_fn)
    return out


def slice_channels(x, start, stop):
    c = x.data.shape[-1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {x.data.shape}")
    out = Tensor(x.data[..., start:stop])

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[..., start:stop] = g
            x.accumulate_grad(gx)

    record("slice_channels", (x,), out, backward_fn)
    return out


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    record("reshape", (x,), out, backward_fn)
    return out


def reduce_sum(x, axis=None):
    out = Tensor(x.data.sum(axis=axis))

    def backward_fn(g):
        if x.requires_grad:
            if axis is None:
                x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())
            else:
                x.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    record("reduce_sum", (x,), out, backward_fn)
    return out


def reduce_mean(x, axis=None):
    n = x.data.size if axis is None else x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis))
    inv = 1.0 / n

    def backward_fn(g):
        if x.requires_grad:
            if axis is None:
                x.accumulate_grad(np.broadcast_to(g * inv, x.data.shape).copy())
            else:
                x.accumulate_grad(
                    np.broadcast_to(np.expand_dims(g * inv, axis), x.data.shape).copy()
                )

    record("reduce_mean", (x,), out, backward_fn)
    return out
