"""Activations and fused network operations with hand-written backward rules.

Spatial operations accept either a single example (``C×H×W`` / ``C×T``) or a
batch with a leading example axis (``N×C×H×W`` / ``N×C×T``).
"""

from __future__ import annotations

import numpy as np

from hsattn.autodiff.tensor import Tensor, as_tensor, make_result
from hsattn.errors import DimensionError

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1
LAYER_NORM_EPS = 1e-5


# -- activations --------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def selu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    expm = np.exp(np.minimum(xd, 0))
    out = SELU_LAMBDA * np.where(pos, xd, SELU_ALPHA * (expm - 1))
    dout = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * expm)
    return make_result(out.astype(x.dtype), (x,), lambda g: (g * dout.astype(x.dtype),))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def _softmax_array(xd: np.ndarray, axis: int) -> np.ndarray:
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_array(x.data, axis)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


# -- convolution ----------------------------------------------------------------

def _batched(x: Tensor, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x.data[None], True
    if x.ndim == rank + 1:
        return x.data, False
    raise DimensionError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding=(0, 0)) -> Tensor:
    """2-D cross-correlation, stride 1: ``out_j = sum_i w_ij * x_i + b_j``."""
    xd, single = _batched(x, 3)
    w, b = kernels.data, bias.data
    if w.ndim != 4:
        raise DimensionError(f"kernels must be C_out×C_in×kH×kW, got {w.shape}")
    n, c_in, h, wd = xd.shape
    c_out, kc, kh, kw = w.shape
    if kc != c_in:
        raise DimensionError(f"kernels expect {kc} input channels, input has {c_in}")
    if b.shape != (c_out,):
        raise DimensionError(f"bias must have shape ({c_out},), got {b.shape}")
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    if kh > h + 2 * ph or kw > wd + 2 * pw:
        raise DimensionError(f"kernel {kh}×{kw} larger than padded input {h + 2 * ph}×{wd + 2 * pw}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    length = ho * wo

    out = np.zeros((n, c_out, length), dtype=np.result_type(xd, w))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di:di + ho, dj:dj + wo].reshape(n, c_in, length)
            out += w[:, :, di, dj] @ patch
    out += b[None, :, None]
    out = out.reshape(n, c_out, ho, wo)

    def backward(g):
        gb = g.reshape(n, c_out, length)
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[:, :, di:di + ho, dj:dj + wo].reshape(n, c_in, length)
                gw[:, :, di, dj] = np.tensordot(gb, patch, axes=([0, 2], [0, 2]))
                gx[:, :, di:di + ho, dj:dj + wo] += (w[:, :, di, dj].T @ gb).reshape(n, c_in, ho, wo)
        gx = gx[:, :, ph:ph + h, pw:pw + wd]
        if single:
            gx = gx[0]
        return gx, gw, gb.sum(axis=(0, 2))

    return make_result(out[0] if single else out, (x, kernels, bias), backward)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """1-D cross-correlation along time, stride 1, no padding."""
    xd, single = _batched(x, 2)
    w, b = kernels.data, bias.data
    if w.ndim != 3:
        raise DimensionError(f"kernels must be C_out×C_in×k, got {w.shape}")
    n, c_in, t = xd.shape
    c_out, kc, k = w.shape
    if kc != c_in:
        raise DimensionError(f"kernels expect {kc} input channels, input has {c_in}")
    if b.shape != (c_out,):
        raise DimensionError(f"bias must have shape ({c_out},), got {b.shape}")
    if k > t:
        raise DimensionError(f"kernel size {k} exceeds sequence length {t}")
    to = t - k + 1
    out = np.zeros((n, c_out, to), dtype=np.result_type(xd, w))
    for d in range(k):
        out += w[:, :, d] @ xd[:, :, d:d + to]
    out += b[None, :, None]

    def backward(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(w)
        for d in range(k):
            gw[:, :, d] = np.tensordot(g, xd[:, :, d:d + to], axes=([0, 2], [0, 2]))
            gx[:, :, d:d + to] += w[:, :, d].T @ g
        return (gx[0] if single else gx), gw, g.sum(axis=(0, 2))

    return make_result(out[0] if single else out, (x, kernels, bias), backward)


# -- pooling --------------------------------------------------------------------

def max_pool2d(x: Tensor) -> Tensor:
    """2×2 max-pooling with stride 2; trailing odd rows/columns are dropped.

    Ties go to the first cell of the window in row-major order.
    """
    xd, single = _batched(x, 3)
    n, c, h, w = xd.shape
    if h < 2 or w < 2:
        raise DimensionError(f"max_pool2d needs H, W >= 2, got {h}×{w}")
    ho, wo = h // 2, w // 2
    windows = (
        xd[:, :, :2 * ho, :2 * wo]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    idx = np.argmax(windows, axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        gx = np.zeros_like(xd)
        gx[:, :, :2 * ho, :2 * wo] = gw
        return (gx[0] if single else gx,)

    return make_result(out[0] if single else out, (x,), backward)


# -- normalization ----------------------------------------------------------------

def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes, count: int):
    return inv_std * (g - g.sum(axis=axes, keepdims=True) / count
                      - xhat * (g * xhat).sum(axis=axes, keepdims=True) / count)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
) -> Tensor:
    """Per-channel normalization over batch and spatial positions.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (the variance estimate is unbiased).
    In eval mode the running statistics are used.
    """
    xd, single = _batched(x, 3)
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}")
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    gd = gamma.data.reshape(shape)
    if train:
        count = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.reshape(c).astype(running_var.dtype)
    else:
        count = 0
        mu = running_mean.reshape(shape).astype(xd.dtype)
        var = running_var.reshape(shape).astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = gd * xhat + beta.data.reshape(shape)

    def backward(g):
        if single:
            g = g[None]
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if train:
            gx = _normalize_backward(g * gd, xhat, inv_std, axes, count)
        else:
            gx = g * gd * inv_std
        return (gx[0] if single else gx), gg, gbeta

    return make_result(out[0] if single else out, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize every row over the last axis, then scale and shift."""
    xd = x.data
    q = xd.shape[-1]
    if gamma.shape != (q,) or beta.shape != (q,):
        raise DimensionError(f"gamma/beta must have shape ({q},), got {gamma.shape} / {beta.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = gamma.data * xhat + beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = _normalize_backward(g * gamma.data, xhat, inv_std, -1, q)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight columns {weight.shape[1]}")
    return x @ weight.T + bias
