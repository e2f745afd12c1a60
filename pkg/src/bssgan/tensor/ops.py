"""Layer primitives used by the discriminator and generator.

All image tensors are NHWC. Convolution kernels are stored as
``(3, 3, in_channels, out_channels)``; a transposed convolution reuses the
same layout as the convolution it is the adjoint of, so its kernel is
``(3, 3, out_channels, in_channels)`` from its own point of view.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bssgan.errors import ConfigError
from bssgan.tensor.core import Tensor, flatten, record

KERNEL = 3
BN_EPS = 1e-5


def _same(n: int, stride: int) -> tuple[int, int, int]:
    """Output length and (before, after) padding for "same" convolution."""
    out = -(-n // stride)
    total = max((out - 1) * stride + KERNEL - n, 0)
    return out, total // 2, total - total // 2


def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")


def _geometry(h: int, w: int, stride: int):
    ho, pt, pb = _same(h, stride)
    wo, pl, pr = _same(w, stride)
    return ho, wo, (pt, pb), (pl, pr)


def im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """Patches of a "same"-padded NHWC array as rows of length 9*C."""
    n, h, w, c = x.shape
    ho, wo, ph, pw = _geometry(h, w, stride)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (N, ho, wo, C, kh, kw) -> (N*ho*wo, kh*kw*C), matching the kernel layout
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, KERNEL * KERNEL * c)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    n, h, w, c = shape
    ho, wo, ph, pw = _geometry(h, w, stride)
    cols = cols.reshape(n, ho, wo, KERNEL, KERNEL, c)
    xp = np.zeros((n, h + sum(ph), w + sum(pw), c), dtype=cols.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, :, i, j]
    return xp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w]


def _check_kernel(kernels: Tensor, channels: int, axis: int, what: str) -> None:
    if kernels.ndim != 4 or kernels.shape[:2] != (KERNEL, KERNEL):
        raise ConfigError(f"{what} kernels must be (3, 3, cin, cout), got {kernels.shape}")
    if kernels.shape[axis] != channels:
        raise ConfigError(
            f"{what}: input has {channels} channels but kernels expect {kernels.shape[axis]}"
        )


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with "same" padding; output spatial = ceil(in / stride)."""
    _check_stride(stride)
    if x.ndim != 4:
        raise ConfigError(f"conv2d expects NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    _check_kernel(kernels, c, 2, "conv2d")
    cout = kernels.shape[3]
    ho, wo, _, _ = _geometry(h, w, stride)
    cols = im2col(x.data, stride)
    k2 = kernels.data.reshape(-1, cout)
    out = cols @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def grad(g):
        g2 = g.reshape(-1, cout)
        gx = col2im(g2 @ k2.T, x.shape, stride) if x.requires_grad else None
        gk = (cols.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record("conv2d", inputs, out, grad)


def transposed_conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernels; output spatial = in * stride."""
    _check_stride(stride)
    if x.ndim != 4:
        raise ConfigError(f"transposed_conv2d expects NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    _check_kernel(kernels, c, 3, "transposed_conv2d")
    cout = kernels.shape[2]
    out_shape = (n, h * stride, w * stride, cout)
    k2 = kernels.data.reshape(-1, c)
    x2 = x.data.reshape(-1, c)
    out = col2im(x2 @ k2.T, out_shape, stride)
    if bias is not None:
        out = out + bias.data

    def grad(g):
        gcols = im2col(g, stride)
        gx = (gcols @ k2).reshape(x.shape) if x.requires_grad else None
        gk = (gcols.T @ x2).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g.sum(axis=(0, 1, 2)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record("transposed_conv2d", inputs, out, grad)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2:
        x = flatten(x)
    if weights.ndim != 2 or weights.shape[0] != x.shape[1]:
        raise ConfigError(f"dense: input width {x.shape[1]} does not match weights {weights.shape}")
    out = x.data @ weights.data
    if bias is not None:
        out = out + bias.data

    def grad(g):
        gx = g @ weights.data.T if x.requires_grad else None
        gw = x.data.T @ g if weights.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return record("dense", inputs, out, grad)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    momentum: float = 0.8,
    training: bool = True,
    eps: float = BN_EPS,
) -> Tensor:
    """Channel-wise normalisation over every axis but the last.

    In training mode the running statistics are updated in place as
    ``running <- momentum * running + (1 - momentum) * batch``.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data[...] = momentum * running_mean.data + (1.0 - momentum) * mu
        running_var.data[...] = momentum * running_var.data + (1.0 - momentum) * var
    else:
        mu = running_mean.data
        var = running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data
    count = x.size // x.shape[-1]

    def grad(g):
        gxhat = g * gamma.data
        if training:
            gx = inv_std / count * (
                count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes)
            )
        else:
            gx = gxhat * inv_std
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batch_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), grad)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data >= 0, 1.0, alpha).astype(x.dtype)
    return record("leaky_relu", (x,), x.data * slope, lambda g: (g * slope,))


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.dtype)
    return record("relu", (x,), x.data * mask, lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), out, grad)


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x)
    if kind in ("linear", None):
        return x
    raise ConfigError(f"unknown activation {kind!r}")
