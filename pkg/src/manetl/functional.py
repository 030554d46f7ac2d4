"""Differentiable layer primitives.

All image tensors use the (batch, channel, height, width) layout. Every op keeps
the dtype of its inputs, so the same code path runs in float32 for training and
in float64 for finite-difference checks.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor, ensure_shape, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "padding"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"ConvSpec.{name} must be non-negative")
        if self.stride < 1:
            raise ConfigurationError("ConvSpec.stride must be >= 1")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigurationError("ConvSpec kernel extents must be >= 1")

    def output_size(self, in_h, in_w):
        out_h = (in_h + 2 * self.padding - self.kernel_h) // self.stride + 1
        out_w = (in_w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if in_h + 2 * self.padding < self.kernel_h:
            raise DimensionError(
                f"kernel height {self.kernel_h} exceeds padded input height "
                f"{in_h + 2 * self.padding} (axis 2)"
            )
        if in_w + 2 * self.padding < self.kernel_w:
            raise DimensionError(
                f"kernel width {self.kernel_w} exceeds padded input width "
                f"{in_w + 2 * self.padding} (axis 3)"
            )
        return out_h, out_w


def _window_extent(size, kernel, stride, padding, axis, op):
    padded = size + 2 * padding
    if padded < kernel:
        raise DimensionError(
            f"{op}: window {kernel} larger than padded input extent {padded} on axis {axis}"
        )
    return (padded - kernel) // stride + 1


def _scatter_windows(dpad, cols, kh, kw, stride, out_h, out_w):
    """Add ``cols[:, :, i, j]`` back onto every strided window offset (i, j)."""
    h_end = stride * (out_h - 1) + 1
    w_end = stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dpad[:, :, i:i + h_end:stride, j:j + w_end:stride] += cols[:, :, i, j]


def _crop(arr, padding):
    if padding == 0:
        return arr
    return arr[:, :, padding:-padding, padding:-padding]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding (no kernel flip)."""
    ensure_shape(x, 4, "conv2d input")
    ensure_shape(weight, 4, "conv2d weight")
    batch, channels, height, width = x.shape
    out_c, in_c, kh, kw = weight.shape
    if channels != in_c:
        raise DimensionError(
            f"conv2d: input channel axis (1) has {channels} channels, weights expect {in_c}"
        )
    if bias is not None and bias.shape != (out_c,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {out_c} output channels")
    out_h = _window_extent(height, kh, stride, padding, 2, "conv2d")
    out_w = _window_extent(width, kw, stride, padding, 3, "conv2d")

    xd = x.data
    wd = weight.data.reshape(out_c, -1)
    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = np.ascontiguousarray(xs).reshape(batch, channels, out_h * out_w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(batch, channels * kh * kw, out_h * out_w)
    out = np.matmul(wd, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(batch, out_c, out_h, out_w)

    def backward(g):
        g2 = g.reshape(batch, out_c, out_h * out_w)
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wd.T, g2)
            if pointwise:
                dcols = dcols.reshape(batch, channels, out_h, out_w)
                if stride > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride][:, :, :out_h, :out_w] = dcols
                else:
                    gx = dcols
            else:
                dcols = dcols.reshape(batch, channels, kh, kw, out_h, out_w)
                dpad = np.zeros(
                    (batch, channels, height + 2 * padding, width + 2 * padding), dtype=xd.dtype
                )
                _scatter_windows(dpad, dcols, kh, kw, stride, out_h, out_w)
                gx = _crop(dpad, padding)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def dense(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape (batch, in)."""
    ensure_shape(x, 2, "dense input")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"dense: input feature axis (1) has {x.shape[1]} features, weights expect {weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "dense")


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over (B, N) or spatially over (B, C, H, W).

    ``running_mean``/``running_var`` are numpy arrays updated in place in
    training mode; the running variance uses the unbiased batch estimate.
    """
    if x.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise DimensionError(f"batch_norm: expected 2-d or 4-d input, got shape {x.shape}")
    features = x.shape[1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise DimensionError(f"batch_norm: affine terms do not match {features} features (axis 1)")

    xd = x.data
    count = xd.size // features
    if training:
        if x.shape[0] < 2:
            raise ConfigurationError("batch_norm in training mode needs a batch of at least 2")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(view)) * inv_std.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)

    def backward(g):
        gg = gamma.data.reshape(view)
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            if training:
                gsum = g.sum(axis=axes).reshape(view)
                gxhat_sum = (g * xhat).sum(axis=axes).reshape(view)
                gx = (gg * inv_std.reshape(view) / count) * (count * g - gsum - xhat * gxhat_sum)
            else:
                gx = g * gg * inv_std.reshape(view)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum lets NaN through so a blown-up activation reaches the loss check
    out = np.maximum(x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def avg_pool2d(x, kernel, stride=None, padding=0):
    """Mean over each window; zero padding counts toward the mean."""
    ensure_shape(x, 4, "avg_pool2d input")
    stride = stride or kernel
    batch, channels, height, width = x.shape
    out_h = _window_extent(height, kernel, stride, padding, 2, "avg_pool2d")
    out_w = _window_extent(width, kernel, stride, padding, 3, "avg_pool2d")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(4, 5)).astype(xd.dtype)

    def backward(g):
        share = g / (kernel * kernel)
        dpad = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding), dtype=xd.dtype)
        h_end = stride * (out_h - 1) + 1
        w_end = stride * (out_w - 1) + 1
        for i in range(kernel):
            for j in range(kernel):
                dpad[:, :, i:i + h_end:stride, j:j + w_end:stride] += share
        return (_crop(dpad, padding),)

    return make_result(out, (x,), backward, "avg_pool2d")


def max_pool2d(x, kernel, stride=None, padding=0):
    """Max over each window; padding never wins. Ties route gradient to the first max."""
    ensure_shape(x, 4, "max_pool2d input")
    stride = stride or kernel
    batch, channels, height, width = x.shape
    out_h = _window_extent(height, kernel, stride, padding, 2, "max_pool2d")
    out_w = _window_extent(width, kernel, stride, padding, 3, "max_pool2d")
    xd = x.data
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = xd
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(batch, channels, out_h, out_w, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dpad = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding), dtype=xd.dtype)
        h_end = stride * (out_h - 1) + 1
        w_end = stride * (out_w - 1) + 1
        for i in range(kernel):
            for j in range(kernel):
                routed = np.where(arg == i * kernel + j, g, 0)
                dpad[:, :, i:i + h_end:stride, j:j + w_end:stride] += routed
        return (_crop(dpad, padding),)

    return make_result(out, (x,), backward, "max_pool2d")


def global_avg_pool(x):
    ensure_shape(x, 4, "global_avg_pool input")
    batch, channels, height, width = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (height * width), x.shape).copy(),)

    return make_result(out, (x,), backward, "global_avg_pool")


def softmax(x):
    ensure_shape(x, 2, "softmax input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


def log_softmax_array(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def dropout(x, rate, training, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval mode is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * scale

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward, "dropout")


def concat_channels(a, b):
    """Concatenate along axis 1; ``a``'s channels come first."""
    if a.ndim != b.ndim or a.ndim < 2:
        raise DimensionError(f"concat_channels: incompatible ranks {a.shape} and {b.shape}")
    for axis in range(a.ndim):
        if axis != 1 and a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"concat_channels: axis {axis} differs ({a.shape} vs {b.shape})"
            )
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :split], g[:, split:]

    return make_result(out, (a, b), backward, "concat_channels")


def channel_scale(x, gates):
    """Multiply every (batch, channel) plane of ``x`` by ``gates[batch, channel]``."""
    ensure_shape(x, 4, "channel_scale input")
    if gates.shape != x.shape[:2]:
        raise DimensionError(f"channel_scale: gates {gates.shape} do not match {x.shape[:2]}")
    w = gates.data[:, :, None, None]
    out = x.data * w

    def backward(g):
        gx = g * w if x.requires_grad else None
        gw = (g * x.data).sum(axis=(2, 3)) if gates.requires_grad else None
        return gx, gw

    return make_result(out, (x, gates), backward, "channel_scale")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    ensure_shape(logits, 2, "cross_entropy logits")
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"cross_entropy: {labels.shape} labels for {batch} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"cross_entropy: labels must lie in [0, {classes})")
    labels = labels.astype(np.intp)
    logp = log_softmax_array(logits.data)
    rows = np.arange(batch)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return make_result(loss, (logits,), backward, "cross_entropy")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


__all__ = [
    "ConvSpec",
    "Tensor",
    "avg_pool2d",
    "batch_norm",
    "channel_scale",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "cross_entropy",
    "dense",
    "dropout",
    "global_avg_pool",
    "max_pool2d",
    "relu",
    "softmax",
]
