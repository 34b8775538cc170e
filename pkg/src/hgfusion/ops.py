"""Differentiable NCHW kernels used by the hourglass network."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DegenerateInputError
from .tensor import DTYPE, Parameter, Tensor, make_result

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum an NCHW array over (N, H, W); inner-axis reduction is much faster."""
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"{op} expects an NCHW tensor, got shape {x.shape}")


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, zero padded, via im2col and one batched matmul.

    ``out[n, co, y, x] = bias[co] + sum(input[n, ci, y*s - p + dy, x*s - p + dx]
    * weight[co, ci, dy, dx])``.  Output extents use floor division, as in
    every mainstream framework.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ConfigurationError(f"conv2d weight must be (Cout, Cin, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ConfigurationError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: invalid stride={stride} / padding={padding}")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(
            f"conv2d: non-positive output extent {ho}x{wo} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )

    w2 = weight.data.reshape(co, ci * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)

    def backward_fn(g):
        g2 = g.reshape(n, co, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            # batched GEMM against a transposed view; avoids copying cols
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=2).sum(axis=0)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(n, c, kh, kw, ho, wo)
                hp, wp = h + 2 * padding, w + 2 * padding
                dxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
                ys, xs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                for dy in range(kh):
                    for dx in range(kw):
                        dxp[:, :, dy:dy + ys:stride, dx:dx + xs:stride] += dcols[:, :, dy, dx]
                gx = dxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward_fn, "conv2d")


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, name: str = "bn", **kw) -> "BatchNormState":
        return cls(
            gamma=Parameter(np.ones(channels), name=f"{name}.gamma"),
            beta=Parameter(np.zeros(channels), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalise each channel over (N, H, W).

    Train mode uses batch statistics (biased variance) and folds them into the
    running averages; inference mode uses the running averages only.
    """
    _require_4d(x, "batch_norm")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ConfigurationError(f"batch_norm: input has {c} channels, state has {state.channels}")
    m = n * h * w
    if m == 0:
        raise DegenerateInputError("batch_norm: zero elements per channel")
    gamma, beta = state.gamma, state.beta
    g4 = gamma.data[None, :, None, None]

    if state.mode == "train":
        mean = _channel_sum(x.data) / m
        xhat = x.data - mean[None, :, None, None]
        var = _channel_sum(xhat * xhat) / m
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        xhat *= inv_std[None, :, None, None]
        state.running_mean *= 1.0 - state.momentum
        state.running_mean += state.momentum * mean
        state.running_var *= 1.0 - state.momentum
        state.running_var += state.momentum * var
    elif state.mode == "inference":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        raise ConfigurationError(f"batch_norm: unknown mode {state.mode!r}")
    out = xhat * g4
    out += beta.data[None, :, None, None]
    train = state.mode == "train"

    def backward_fn(g):
        ggamma = _channel_sum(g * xhat)
        gbeta = _channel_sum(g)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if train:
                # sum(dxhat) = gamma * gbeta and sum(dxhat * xhat) = gamma * ggamma
                gx = xhat * (-ggamma / m)[None, :, None, None]
                gx += g
                gx -= (gbeta / m)[None, :, None, None]
                gx *= scale
            else:
                gx = g * scale
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward_fn, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return make_result(np.maximum(x.data, 0.0), (x,), backward_fn, "relu")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; ties send the gradient to the first element
    of the window in row-major order."""
    _require_4d(x, "max_pool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool2 needs even extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        hit = arg[..., None] == np.arange(4)
        gw = (hit * g[..., None]).reshape(n, c, h // 2, w // 2, 2, 2)
        return (gw.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(out, (x,), backward_fn, "max_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    _require_4d(x, "upsample_nearest2")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward_fn, "upsample_nearest2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    (na, ca, ha, wa), (nb, cb, hb, wb) = a.shape, b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ConfigurationError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return make_result(out, (a, b), backward_fn, "concat_channels")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward_fn(g):
        return g, g

    return make_result(a.data + b.data, (a, b), backward_fn, "add")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element; a 0-d tensor."""
    if pred.shape != target.shape:
        raise ConfigurationError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size

    def backward_fn(g):
        d = (2.0 / count) * g * diff
        return d, -d

    return make_result(np.asarray(np.mean(diff * diff)), (pred, target), backward_fn, "mse_loss")
