"""Dense tensor operations with hand-written forward/backward pairs.

Exactly the operator set the detector needs: grouped 2-D convolution,
batch norm, sub-spectral norm, swish/relu, frequency pooling/broadcast,
channel dropout, and time trimming. There is no autodiff graph; the model
composes these pairs in reverse order itself.

Activations are laid out [batch, channels, frequency, time]; 3-D inputs
[channels, frequency, time] are treated as batch 1 and returned 3-D.
Kernels are [out_channels, in_channels/groups, k_freq, k_time]. All ops
preserve the input dtype so tests can run a float-64 shadow path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

_AXIS_NAMES = ("frequency", "time")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution (cross-correlation convention)."""

    kernel: tuple[int, int]          # (k_freq, k_time)
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        for name in ("kernel", "stride", "dilation"):
            if any(v < 1 for v in getattr(self, name)):
                raise ShapeError(f"ConvSpec.{name} entries must be >= 1")
        if any(v < 0 for v in self.padding):
            raise ShapeError("ConvSpec.padding entries must be >= 0")
        if self.groups < 1:
            raise ShapeError("ConvSpec.groups must be >= 1")

    def out_extent(self, axis: int, extent: int) -> int:
        k, s = self.kernel[axis], self.stride[axis]
        d, p = self.dilation[axis], self.padding[axis]
        out = (extent + 2 * p - d * (k - 1) - 1) // s + 1
        if out < 1:
            raise ShapeError(
                f"convolution output extent on the {_AXIS_NAMES[axis]} axis "
                f"is {out} (input {extent}, kernel {k}, stride {s}, "
                f"dilation {d}, padding {p})"
            )
        return out


def _as4d(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a 3-D or 4-D activation, got ndim={x.ndim}")


def _windows(xp, spec: ConvSpec, fo: int, to: int):
    """Gather convolution taps: [N, Ci, Fo, To, kf, kt] view of padded input."""
    kf, kt = spec.kernel
    (df, dt), (sf, st) = spec.dilation, spec.stride
    span_f = df * (kf - 1) + 1
    span_t = dt * (kt - 1) + 1
    v = np.lib.stride_tricks.sliding_window_view(xp, (span_f, span_t),
                                                 axis=(2, 3))
    return v[:, :, ::sf, ::st, ::df, ::dt][:, :, :fo, :to]


def conv2d_forward(x, weight, bias, spec: ConvSpec):
    """Grouped 2-D cross-correlation.

    Output extent per axis is floor((L + 2p - d*(k-1) - 1)/s) + 1; a
    non-positive extent raises ShapeError naming the axis. Depthwise
    convolution is groups == channels.
    """
    x4, was3d = _as4d(x)
    n, ci, f, t = x4.shape
    co = weight.shape[0]
    g = spec.groups
    if ci % g != 0 or co % g != 0:
        raise ShapeError(f"channels ({ci}->{co}) not divisible by groups={g}")
    if weight.shape[1] != ci // g or weight.shape[2:] != spec.kernel:
        raise ShapeError(
            f"kernel shape {weight.shape} does not match input channels "
            f"{ci}, groups {g}, kernel {spec.kernel}"
        )
    fo = spec.out_extent(0, f)
    to = spec.out_extent(1, t)

    pf, pt = spec.padding
    xp = np.pad(x4, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if pf or pt else x4
    kf, kt = spec.kernel
    cig, cog = ci // g, co // g

    v = _windows(xp, spec, fo, to)
    # [N, g, Fo*To, Cig*kf*kt] @ [g, Cig*kf*kt, Cog] -> [N, g, Fo*To, Cog]
    xcol = (v.reshape(n, g, cig, fo, to, kf, kt)
             .transpose(0, 1, 3, 4, 2, 5, 6)
             .reshape(n, g, fo * to, cig * kf * kt))
    wmat = weight.reshape(g, cog, cig * kf * kt).transpose(0, 2, 1)
    y = np.matmul(xcol, wmat)
    y = y.transpose(0, 1, 3, 2).reshape(n, co, fo, to)
    if bias is not None:
        y = y + bias.reshape(1, co, 1, 1)
    return y[0] if was3d else y


def conv2d_backward(grad_out, x, weight, spec: ConvSpec):
    """Exact adjoints of conv2d_forward: (grad_input, grad_weight, grad_bias)."""
    x4, was3d = _as4d(x)
    gy4, gwas3d = _as4d(grad_out)
    if was3d != gwas3d or gy4.shape[0] != x4.shape[0]:
        raise ShapeError("grad_out batch does not match input batch")
    n, ci, f, t = x4.shape
    co = weight.shape[0]
    g = spec.groups
    fo = spec.out_extent(0, f)
    to = spec.out_extent(1, t)
    if gy4.shape != (n, co, fo, to):
        raise ShapeError(
            f"grad_out shape {gy4.shape} does not match forward output "
            f"{(n, co, fo, to)}"
        )

    pf, pt = spec.padding
    kf, kt = spec.kernel
    (df, dt), (sf, st) = spec.dilation, spec.stride
    cig, cog = ci // g, co // g

    grad_bias = gy4.sum(axis=(0, 2, 3))

    xp = np.pad(x4, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if pf or pt else x4
    v = _windows(xp, spec, fo, to)
    xcol = (v.reshape(n, g, cig, fo, to, kf, kt)
             .transpose(0, 1, 3, 4, 2, 5, 6)
             .reshape(n, g, fo * to, cig * kf * kt))
    gcol = (gy4.reshape(n, g, cog, fo, to)
               .transpose(0, 1, 3, 4, 2)
               .reshape(n, g, fo * to, cog))

    # grad_weight[g, cog, K] = sum_n gcol^T @ xcol
    gw = np.matmul(gcol.transpose(1, 3, 0, 2).reshape(g, cog, n * fo * to),
                   xcol.transpose(1, 0, 2, 3).reshape(g, n * fo * to, -1))
    grad_weight = gw.reshape(weight.shape)

    # grad_input: scatter gcol @ W back onto the padded grid, one tap at a time
    gxcol = np.matmul(gcol, weight.reshape(g, cog, cig * kf * kt))
    gxcol = (gxcol.reshape(n, g, fo, to, cig, kf, kt)
                  .transpose(0, 1, 4, 2, 3, 5, 6)
                  .reshape(n, ci, fo, to, kf, kt))
    gxp = np.zeros((n, ci, f + 2 * pf, t + 2 * pt), dtype=x4.dtype)
    for i in range(kf):
        for j in range(kt):
            gxp[:, :,
                i * df:i * df + sf * fo:sf,
                j * dt:j * dt + st * to:st] += gxcol[:, :, :, :, i, j]
    grad_input = gxp[:, :, pf:pf + f, pt:pt + t]

    if was3d:
        return grad_input[0], grad_weight, grad_bias
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(x, scale, shift, running_mean, running_var, mode,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    Train mode normalizes by batch statistics over (batch, freq, time) and
    updates the running arrays in place with the given momentum; infer mode
    normalizes by the running statistics and touches nothing.

    Returns (y, cache); pass the cache to batchnorm_backward (train mode).
    """
    x4, was3d = _as4d(x)
    c = x4.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"norm parameters must have shape ({c},)")
    if mode == "train":
        mean = x4.mean(axis=(0, 2, 3))
        var = x4.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x4 - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    xhat = xhat.astype(x4.dtype, copy=False)
    y = scale.reshape(1, c, 1, 1) * xhat + shift.reshape(1, c, 1, 1)
    cache = (xhat, inv_std.astype(x4.dtype, copy=False), scale, was3d)
    return (y[0] if was3d else y), cache


def batchnorm_backward(grad_out, cache):
    """Backward for train-mode batchnorm: (grad_x, grad_scale, grad_shift)."""
    xhat, inv_std, scale, was3d = cache
    gy4, _ = _as4d(grad_out)
    c = xhat.shape[1]
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]

    grad_shift = gy4.sum(axis=(0, 2, 3))
    grad_scale = (gy4 * xhat).sum(axis=(0, 2, 3))

    gxhat = gy4 * scale.reshape(1, c, 1, 1)
    sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxhat - sum_g - xhat * sum_gx)
    gx = gx.astype(xhat.dtype, copy=False)
    return (gx[0] if was3d else gx), grad_scale, grad_shift


def _ssn_reshape(x4, groups):
    n, c, f, t = x4.shape
    if f % groups != 0:
        raise ShapeError(
            f"frequency extent {f} is not divisible by {groups} sub-bands"
        )
    return x4.reshape(n, c, groups, f // groups, t).reshape(
        n, c * groups, f // groups, t)


def subspectral_forward(x, scale, shift, running_mean, running_var, groups,
                        mode, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch norm applied independently to each contiguous frequency band.

    Parameters and running statistics are flat arrays of length
    channels * groups (band-major within each channel). groups == 1 is
    plain batchnorm.
    """
    x4, was3d = _as4d(x)
    n, c, f, t = x4.shape
    xg = _ssn_reshape(x4, groups)
    y, cache = batchnorm_forward(xg, scale, shift, running_mean, running_var,
                                 mode, momentum, eps)
    y = y.reshape(n, c, f, t)
    return (y[0] if was3d else y), (cache, x4.shape, was3d)


def subspectral_backward(grad_out, cache):
    bn_cache, shape, was3d = cache
    gy4, _ = _as4d(grad_out)
    n, c, f, t = shape
    groups = bn_cache[0].shape[1] // c
    gx, gscale, gshift = batchnorm_backward(_ssn_reshape(gy4, groups), bn_cache)
    gx = gx.reshape(n, c, f, t)
    return (gx[0] if was3d else gx), gscale, gshift


# ---------------------------------------------------------------------------
# Pointwise and shape ops
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish_forward(x):
    s = sigmoid(x)
    return x * s, (x, s)


def swish_backward(grad_out, cache):
    x, s = cache
    return grad_out * (s * (1.0 + x * (1.0 - s)))


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out, mask):
    return grad_out * mask


def freq_avgpool_forward(x):
    """Mean over the frequency axis, keeping a singleton dimension."""
    x4, was3d = _as4d(x)
    y = x4.mean(axis=2, keepdims=True)
    return (y[0] if was3d else y), (x4.shape[2], was3d)


def freq_avgpool_backward(grad_out, cache):
    f, was3d = cache
    gy4, _ = _as4d(grad_out)
    gx = np.broadcast_to(gy4 / f, gy4.shape[:2] + (f,) + gy4.shape[3:])
    gx = np.ascontiguousarray(gx)
    return gx[0] if was3d else gx


def freq_broadcast_add(pooled, x):
    """Add a 1-frequency tensor across every frequency bin of x."""
    p4, _ = _as4d(pooled)
    x4, was3d = _as4d(x)
    if p4.shape[2] != 1:
        raise ShapeError("broadcast operand must have frequency extent 1")
    y = x4 + p4
    return y[0] if was3d else y


def freq_broadcast_add_backward(grad_out):
    """Gradients for (pooled, x): the pooled side sums over frequency."""
    gy4, was3d = _as4d(grad_out)
    gp = gy4.sum(axis=2, keepdims=True)
    if was3d:
        return gp[0], grad_out
    return gp, grad_out


def channel_dropout_forward(x, p, mode, rng=None):
    """Zero whole channels with probability p and rescale by 1/(1-p).

    Identity in infer mode or when p == 0. Train mode requires an explicit
    numpy Generator so results are reproducible.
    """
    if mode == "infer" or p == 0.0:
        return x, None
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("train-mode channel dropout needs an explicit rng")
    x4, was3d = _as4d(x)
    keep = (rng.random((x4.shape[0], x4.shape[1])) >= p)
    factor = (keep / (1.0 - p)).astype(x4.dtype)[:, :, None, None]
    y = x4 * factor
    return (y[0] if was3d else y), (factor, was3d)


def channel_dropout_backward(grad_out, cache):
    if cache is None:
        return grad_out
    factor, was3d = cache
    gy4, _ = _as4d(grad_out)
    gx = gy4 * factor
    return gx[0] if was3d else gx


def time_trim_forward(x, left, right):
    """Drop `left` leading and `right` trailing time frames."""
    x4, was3d = _as4d(x)
    t = x4.shape[3]
    if left + right >= t:
        raise ShapeError(
            f"cannot trim {left}+{right} frames from a length-{t} time axis"
        )
    y = x4[:, :, :, left:t - right]
    return (y[0] if was3d else y), (t, left, right, was3d)


def time_trim_backward(grad_out, cache):
    t, left, right, was3d = cache
    gy4, _ = _as4d(grad_out)
    gx = np.zeros(gy4.shape[:3] + (t,), dtype=gy4.dtype)
    gx[:, :, :, left:t - right] = gy4
    return gx[0] if was3d else gx
