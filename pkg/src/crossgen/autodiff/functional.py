"""Differentiable ops over :class:`Tensor`.

Image tensors are batch-first ``[B, C, H, W]``. ``conv2d`` and
``conv_transpose2d`` also accept an unbatched ``[C, H, W]`` input and return an
unbatched result.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, accumulate

LOG_FLOOR_EPS = 1e-7


class DimensionError(ValueError):
    pass


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _scalar_or_tensor(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _t(a)
    b = _scalar_or_tensor(b, a)

    def _bw(g):
        accumulate(a, g)
        accumulate(b, g)

    return Tensor._make(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _scalar_or_tensor(a, b)
    b = _scalar_or_tensor(b, a)

    def _bw(g):
        accumulate(a, g)
        accumulate(b, -g)

    return Tensor._make(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a = _t(a)
    b = _scalar_or_tensor(b, a)

    def _bw(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return Tensor._make(a.data * b.data, (a, b), _bw)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _scalar_or_tensor(a, b)
    b = _scalar_or_tensor(b, a)

    def _bw(g):
        if a.requires_grad:
            accumulate(a, g / b.data)
        if b.requires_grad:
            accumulate(b, -g * a.data / (b.data * b.data))

    return Tensor._make(a.data / b.data, (a, b), _bw)


def power(a: Tensor, exponent: float) -> Tensor:
    def _bw(g):
        accumulate(a, g * exponent * a.data ** (exponent - 1))

    return Tensor._make(a.data ** exponent, (a,), _bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _bw(g):
        accumulate(a, g * out)

    return Tensor._make(out, (a,), _bw)


def log(a: Tensor) -> Tensor:
    def _bw(g):
        accumulate(a, g / a.data)

    return Tensor._make(np.log(a.data), (a,), _bw)


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(g, a.shape).copy())

    return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def _bw(g):
        accumulate(a, g.reshape(a.shape))

    return Tensor._make(a.data.reshape(shape), (a,), _bw)


def getitem(a: Tensor, index) -> Tensor:
    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        accumulate(a, full)

    return Tensor._make(a.data[index], (a,), _bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        accumulate(x, g * mask)

    # maximum (not where) so NaN inputs stay NaN instead of being masked to 0
    return Tensor._make(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), _bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)

    def _bw(g):
        accumulate(x, g * scale)

    return Tensor._make(x.data * scale, (x,), _bw)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def _bw(g):
        accumulate(x, g * out * (1 - out))

    return Tensor._make(out, (x,), _bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def _bw(g):
        accumulate(x, g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (x,), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (x,), _bw)


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# ---------------------------------------------------------------------------
# dense / convolution / pooling / normalization
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[n]`` or ``[B, n]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"dense: input width {x.shape[-1]} != weight columns {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        if x.requires_grad:
            accumulate(x, g @ weight.data)
        if weight.requires_grad:
            if g.ndim == 1:
                accumulate(weight, np.outer(g, x.data))
            else:
                accumulate(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            accumulate(bias, g if g.ndim == 1 else g.sum(axis=0))

    return Tensor._make(out, parents, _bw)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view ``[B, C, ho, wo, k, k]`` of a padded batch."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _fold(cols: np.ndarray, out: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Scatter-add ``cols[B, C, h, w, k, k]`` into ``out[B, C, H, W]``."""
    h, w = cols.shape[2], cols.shape[3]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += cols[:, :, :, :, i, j]
    return out


def _batched(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected [C,H,W] or [B,C,H,W], got {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with ``weight[C_out, C_in, k, k]``."""
    x, squeeze = _batched(x, "conv2d")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    b, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise DimensionError("conv2d: only square kernels are supported")
    if c != c_in:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{w}+2*{padding}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, k, stride, ho, wo)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        if weight.requires_grad:
            accumulate(weight, np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # [B, ho, wo, C, k, k]
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            _fold(dcols.transpose(0, 3, 1, 2, 4, 5), dxp, k, stride)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            accumulate(x, dxp)

    out_t = Tensor._make(out, parents, _bw)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with ``weight[C_in, C_out, k, k]``.

    Forward is the input-gradient of :func:`conv2d` with the same weight,
    stride and padding.
    """
    x, squeeze = _batched(x, "conv_transpose2d")
    if stride < 1:
        raise DimensionError("conv_transpose2d: stride must be >= 1")
    b, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    if c != c_in:
        raise DimensionError(f"conv_transpose2d: input has {c} channels, weight expects {c_in}")
    ho = conv_transpose_output_size(h, k, stride, padding)
    wo = conv_transpose_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv_transpose2d: non-positive output extent {ho}x{wo}")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # [B, h, w, C_out, k, k]
    full = np.zeros((b, c_out, hf, wf), dtype=np.result_type(x.data, weight.data))
    _fold(cols.transpose(0, 3, 1, 2, 4, 5), full, k, stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gf = np.zeros((b, c_out, hf, wf), dtype=g.dtype)
        gf[:, :, padding : padding + ho, padding : padding + wo] = g
        win = _windows(gf, k, stride, h, w)  # [B, C_out, h, w, k, k]
        if x.requires_grad:
            accumulate(x, np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            accumulate(weight, np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 2, 3)))

    out_t = Tensor._make(out, parents, _bw)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; gradient goes to the first maximum in row-major scan order."""
    stride = k if stride is None else stride
    x, squeeze = _batched(x, "maxpool2d")
    b, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = _windows(x.data, k, stride, ho, wo).reshape(b, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        dx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                hit = g * (arg == i * k + j)
                dx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += hit
        accumulate(x, dx)

    out_t = Tensor._make(out, (x,), _bw)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over ``[B, C]`` or ``[B, C, H, W]``.

    In training mode the running buffers are updated in place.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm: expected [B,C] or [B,C,H,W], got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    g_ = gamma.data.reshape(bshape)
    if training:
        n = x.data.size // x.shape[1]
        if x.shape[0] < 2:
            raise ValueError("batchnorm: batch size must be >= 2 in train mode")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (n / max(n - 1, 1))
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std
    out = xhat * g_ + beta.data.reshape(bshape)

    def _bw(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx = g * g_
            if training:
                gx = inv_std * (gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gx * inv_std
            accumulate(x, gx)

    return Tensor._make(out.astype(x.dtype, copy=False), (x, gamma, beta), _bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def binary_cross_entropy(p: Tensor, target, eps: float = LOG_FLOOR_EPS, reduction: str = "sum") -> Tensor:
    """Bernoulli negative log-likelihood of ``target`` under probabilities ``p``.

    Each log term is floored at ``log(eps)``, which matches clamping ``p`` to
    ``[eps, 1 - eps]`` while giving an exact zero for ``p == target`` in {0, 1}.
    The gradient is taken at the clamped probability so it never vanishes
    because of the floor.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=p.dtype)
    floor = math.log(eps)
    with np.errstate(divide="ignore"):
        log_p = np.maximum(np.log(p.data), floor)
        log_q = np.maximum(np.log1p(-p.data), floor)
    elem = -(np.where(t > 0, t * log_p, 0.0) + np.where(t < 1, (1 - t) * log_q, 0.0))
    if reduction == "sum":
        val = elem.sum()
    elif reduction == "none":
        val = elem
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    pc = np.clip(p.data, eps, 1 - eps)

    def _bw(g):
        accumulate(p, g * (pc - t) / (pc * (1 - pc)))

    return Tensor._make(np.asarray(val, dtype=p.dtype), (p,), _bw)


def nll_from_log_probs(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` given ``[B, K]`` log-probs."""
    b = log_probs.shape[0]
    picked = log_probs.data[np.arange(b), labels]

    def _bw(g):
        full = np.zeros_like(log_probs.data)
        full[np.arange(b), labels] = -g / b
        accumulate(log_probs, full)

    return Tensor._make(np.asarray(-picked.mean(), dtype=log_probs.dtype), (log_probs,), _bw)
