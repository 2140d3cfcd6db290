"""Differentiable operators.

Every forward function builds its output with ``make_output`` and has a
matching adjoint registered in ``VJP`` under the same op name.
"""

from __future__ import annotations

import math
import warnings
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    as_tensor,
    make_output,
    register_vjp,
)


class EmptyTargetWarning(UserWarning):
    """Every pixel of a cross-entropy target was ignored."""


class LabelRangeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(a, b):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    ref = (ta or tb).dtype
    if ta is None:
        ta = Tensor(np.asarray(a, dtype=ref))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=ref))
    return ta, tb


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_output("add", a.data + b.data, (a, b))


@register_vjp("add")
def _add_vjp(g, ctx, inputs, out):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_output("sub", a.data - b.data, (a, b))


@register_vjp("sub")
def _sub_vjp(g, ctx, inputs, out):
    a, b = inputs
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return make_output("scale", a.data * a.data.dtype.type(c), (a,), c)
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = _coerce(a, b)
    return make_output("mul", a.data * b.data, (a, b))


@register_vjp("scale")
def _scale_vjp(g, c, inputs, out):
    return (g * g.dtype.type(c),)


@register_vjp("mul")
def _mul_vjp(g, ctx, inputs, out):
    a, b = inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def relu(x: Tensor) -> Tensor:
    return make_output("relu", np.maximum(x.data, 0), (x,))


@register_vjp("relu")
def _relu_vjp(g, ctx, inputs, out):
    return (g * (inputs[0].data > 0),)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    cdf = cdf.astype(x.dtype, copy=False)
    return make_output("gelu", x.data * cdf, (x,), cdf)


@register_vjp("gelu")
def _gelu_vjp(g, cdf, inputs, out):
    x = inputs[0].data
    pdf = (_INV_SQRT_2PI * np.exp(-0.5 * x * x)).astype(x.dtype, copy=False)
    return (g * (cdf + x * pdf),)


def activation(x: Tensor, kind: str = "gelu") -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return make_output("reshape", x.data.reshape(shape), (x,))


@register_vjp("reshape")
def _reshape_vjp(g, ctx, inputs, out):
    return (g.reshape(inputs[0].shape),)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    return make_output("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), axes)


@register_vjp("transpose")
def _transpose_vjp(g, axes, inputs, out):
    return (g.transpose(np.argsort(axes)),)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    return make_output("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, (axis, sizes))


@register_vjp("concat")
def _concat_vjp(g, ctx, inputs, out):
    axis, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def flip(x: Tensor, axis: int = -1) -> Tensor:
    return make_output("flip", np.ascontiguousarray(np.flip(x.data, axis=axis)), (x,), axis)


@register_vjp("flip")
def _flip_vjp(g, axis, inputs, out):
    return (np.flip(g, axis=axis),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return make_output("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), (axis, keepdims))


@register_vjp("sum")
def _sum_vjp(g, ctx, inputs, out):
    axis, keepdims = ctx
    shape = inputs[0].shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    return make_output("matmul", np.matmul(a.data, b.data), (a, b))


@register_vjp("matmul")
def _matmul_vjp(g, ctx, inputs, out):
    a, b = inputs
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear input {x.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y += bias.data
        return make_output("linear", y, (x, weight, bias))
    return make_output("linear", y, (x, weight))


@register_vjp("linear")
def _linear_vjp(g, ctx, inputs, out):
    x, w = inputs[0], inputs[1]
    g2 = g.reshape(-1, g.shape[-1])
    gx = (g @ w.data) if x.requires_grad else None
    gw = g2.T @ x.data.reshape(-1, x.shape[-1])
    grads = [gx, gw]
    if len(inputs) == 3:
        grads.append(g2.sum(axis=0))
    return tuple(grads)


# -- convolution ------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    ho, wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    if ho < 1 or wo < 1 or kh > H + 2 * pad or kw > W + 2 * pad:
        raise DimensionError(f"conv2d output size non-positive for input {x.shape}, kernel {w.shape}, pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, C * kh * kw)
    y = cols @ w.data.reshape(cout, -1).T
    if bias is not None:
        y += bias.data
    y = np.ascontiguousarray(y.reshape(B, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, w) if bias is None else (x, w, bias)
    return make_output("conv2d", y, inputs, (cols, stride, pad))


@register_vjp("conv2d")
def _conv2d_vjp(g, ctx, inputs, out):
    cols, stride, pad = ctx
    x, w = inputs[0], inputs[1]
    B, C, H, W = x.shape
    cout, cin, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = (g2.T @ cols).reshape(w.shape)
    gx = None
    if x.requires_grad:
        dcols = (g2 @ w.data.reshape(cout, -1)).reshape(B, ho, wo, C, kh, kw)
        dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
    grads = [gx, gw]
    if len(inputs) == 3:
        grads.append(g2.sum(axis=0))
    return tuple(grads)


# -- normalisation / attention pieces ----------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    return make_output("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), (xhat, rstd))


@register_vjp("layer_norm")
def _layer_norm_vjp(g, ctx, inputs, out):
    xhat, rstd = ctx
    x, gamma, _ = inputs
    lead = tuple(range(g.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gx = None
    if x.requires_grad:
        dxhat = g * gamma.data
        gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, ggamma, gbeta


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_output("softmax", y, (x,), axis)


@register_vjp("softmax")
def _softmax_vjp(g, axis, inputs, out):
    y = out.data
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


# -- resampling -------------------------------------------------------------

@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation weights, align_corners=False."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    return _interp_matrix(int(n_in), int(n_out)).astype(dtype, copy=False)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes (half-pixel centres)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    H, W = x.shape[-2], x.shape[-1]
    if (H, W) == (out_h, out_w):
        return make_output("resize_identity", x.data.copy(), (x,))
    rh = interp_matrix(H, out_h, x.dtype)
    rw = interp_matrix(W, out_w, x.dtype)
    y = np.matmul(np.matmul(rh, x.data), rw.T)
    return make_output("bilinear_resize", y, (x,), (rh, rw))


@register_vjp("resize_identity")
def _resize_identity_vjp(g, ctx, inputs, out):
    return (g,)


@register_vjp("bilinear_resize")
def _bilinear_resize_vjp(g, ctx, inputs, out):
    rh, rw = ctx
    return (np.matmul(np.matmul(rh.T, g), rw),)


# -- loss -------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean negative log-softmax over non-ignored pixels.

    ``logits`` is (B, M, H, W) and ``labels`` an integer array (B, H, W).
    An all-ignored target yields 0 and emits ``EmptyTargetWarning``.
    """
    labels = np.asarray(labels)
    B, M = logits.shape[0], logits.shape[1]
    if labels.shape != (B,) + logits.shape[2:]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= M):
        raise LabelRangeError(f"labels must lie in [0, {M}) or equal {ignore_index}")
    count = int(valid.sum())
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    lse = np.log(se) + zmax
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(z, safe[:, None], axis=1)
    if count == 0:
        warnings.warn("cross_entropy: every pixel is ignored, loss defined as 0", EmptyTargetWarning, stacklevel=2)
        loss = np.zeros((), dtype=z.dtype)
    else:
        loss = np.asarray(((lse - picked)[:, 0] * valid).sum() / count, dtype=z.dtype)
    return make_output("cross_entropy", loss, (logits,), (e / se, safe, valid, count))


@register_vjp("cross_entropy")
def _cross_entropy_vjp(g, ctx, inputs, out):
    prob, safe, valid, count = ctx
    if count == 0:
        return (np.zeros_like(prob),)
    grad = prob.copy()
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad -= onehot
    grad *= valid[:, None]
    return (grad * (g / count),)
