"""Differentiable primitives: convolution, interpolation, softmax, pooling.

Convolutions are computed directly from sliding windows (no FFT) so that
the arithmetic can be audited against nested-loop references.  All ops have
hand-written vector-Jacobian products validated by finite differences.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of one convolution.

    ``kernel``, ``stride``, ``padding`` and ``dilation`` are per-spatial-axis
    tuples; ``has_affine`` marks whether a learnable per-channel scale+shift
    follows the convolution (the reduced stand-in for batch norm).
    """

    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    in_channels: int
    out_channels: int
    has_affine: bool = False
    dilation: tuple[int, ...] = None  # defaults to all-ones

    def __post_init__(self):
        if self.dilation is None:
            object.__setattr__(self, "dilation", (1,) * len(self.kernel))
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ValueError(f"kernel and stride must be >= 1, got {self}")
        if any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be >= 0, got {self}")
        if any(d < 1 for d in self.dilation):
            raise ValueError(f"dilation must be >= 1, got {self}")

    @property
    def ndim_spatial(self) -> int:
        return len(self.kernel)

    def weight_shape(self, depthwise=False) -> tuple[int, ...]:
        if depthwise:
            return (self.out_channels, 1) + self.kernel
        return (self.out_channels, self.in_channels) + self.kernel


def conv_spec(kernel, stride, padding, in_channels, out_channels, nd,
              has_affine=False, dilation=1) -> ConvSpec:
    """Build a ConvSpec broadcasting scalar kernel/stride/padding over nd axes."""
    as_tuple = lambda v: tuple(v) if isinstance(v, (tuple, list)) else (v,) * nd
    return ConvSpec(as_tuple(kernel), as_tuple(stride), as_tuple(padding),
                    in_channels, out_channels, has_affine, as_tuple(dilation))


def _out_extent(size, k, s, p, d) -> int:
    keff = (k - 1) * d + 1
    if size + 2 * p < keff:
        raise ValueError(
            f"spatial extent {size} with padding {p} is smaller than the "
            f"effective kernel {keff}")
    return (size + 2 * p - keff) // s + 1


def _windows(xp: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """View of padded input as [N, C, *out, *kernel] honoring stride/dilation."""
    nd = spec.ndim_spatial
    keff = tuple((k - 1) * d + 1 for k, d in zip(spec.kernel, spec.dilation))
    win = sliding_window_view(xp, keff, axis=tuple(range(2, 2 + nd)))
    sel = (slice(None), slice(None))
    sel += tuple(slice(None, None, s) for s in spec.stride)
    sel += tuple(slice(None, None, d) for d in spec.dilation)
    return win[sel]


def _validate_conv(x: Tensor, spec: ConvSpec, weights: Tensor, depthwise: bool):
    nd = spec.ndim_spatial
    if x.ndim != nd + 2:
        raise ValueError(f"expected {nd + 2}D input [N,C,*spatial], got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels but spec expects {spec.in_channels}")
    want = spec.weight_shape(depthwise)
    if depthwise and spec.in_channels != spec.out_channels:
        raise ValueError("depthwise convolution requires in_channels == out_channels")
    if tuple(weights.shape) != want:
        raise ValueError(
            f"weight shape {tuple(weights.shape)} does not match spec "
            f"{spec}: expected {want}")


def _is_pointwise(spec: ConvSpec) -> bool:
    return (all(k == 1 for k in spec.kernel) and all(s == 1 for s in spec.stride)
            and all(p == 0 for p in spec.padding))


def _conv_pointwise(x: Tensor, spec: ConvSpec, weights: Tensor) -> Tensor:
    """Fast path for 1x1 convolutions: a pure per-pixel channel map."""
    nd = spec.ndim_spatial
    w2 = weights.data.reshape(spec.out_channels, spec.in_channels)
    out = np.moveaxis(np.tensordot(x.data, w2, axes=([1], [1])), -1, 1)

    def vjp(g):
        gx = np.moveaxis(np.tensordot(g, w2, axes=([1], [0])), -1, 1)
        red = (0,) + tuple(range(2, 2 + nd))
        gw = np.tensordot(g, x.data, axes=(red, red))
        return gx, gw.reshape(weights.shape)

    return make_node(out, (x, weights), vjp)


def _conv_nd(x: Tensor, spec: ConvSpec, weights: Tensor, depthwise: bool) -> Tensor:
    x, weights = as_tensor(x), as_tensor(weights)
    _validate_conv(x, spec, weights, depthwise)
    if not depthwise and _is_pointwise(spec):
        return _conv_pointwise(x, spec, weights)
    nd = spec.ndim_spatial
    pad = [(0, 0), (0, 0)] + [(p, p) for p in spec.padding]
    out_spatial = tuple(
        _out_extent(x.shape[2 + i], spec.kernel[i], spec.stride[i],
                    spec.padding[i], spec.dilation[i])
        for i in range(nd))

    xp = np.pad(x.data, pad)
    win = _windows(xp, spec)  # [N, C, *out, *k]
    if depthwise:
        # out[n,c,y] = sum_t w[c,0,t] * win[n,c,y,t]
        kern_axes = tuple(range(2 + nd, 2 + 2 * nd))
        w = weights.data[:, 0]
        wb = w.reshape((1, spec.out_channels) + (1,) * nd + spec.kernel)
        out = (win * wb).sum(axis=kern_axes)
    else:
        axes_win = (1,) + tuple(range(2 + nd, 2 + 2 * nd))
        axes_w = (1,) + tuple(range(2, 2 + nd))
        out = np.tensordot(win, weights.data, axes=(axes_win, axes_w))
        out = np.moveaxis(out, -1, 1)  # [N, C', *out]

    def vjp(g):
        # d/dw: contract grad with the input windows over batch and output axes.
        if depthwise:
            kern_axes = tuple(range(2 + nd, 2 + 2 * nd))
            gexp = g.reshape(g.shape + (1,) * nd)
            gw = (win * gexp).sum(axis=(0,) + tuple(range(2, 2 + nd)))
            gw = gw[:, None]  # [C, 1, *k]
        else:
            contract = (0,) + tuple(range(2, 2 + nd))
            gw = np.tensordot(g, win, axes=(contract, contract))  # [C', C, *k]
        gx = _conv_input_grad(g, x.shape, xp.shape, spec, weights.data,
                              depthwise, out_spatial)
        return gx, gw

    return make_node(out, (x, weights), vjp)


def _conv_input_grad(g, x_shape, xp_shape, spec: ConvSpec, w, depthwise,
                     out_spatial):
    nd = spec.ndim_spatial
    keff = tuple((k - 1) * d + 1 for k, d in zip(spec.kernel, spec.dilation))
    if (all(s == 1 for s in spec.stride)
            and all(spec.padding[i] <= keff[i] - 1 for i in range(nd))):
        # Transpose convolution: correlate the padded output gradient with
        # the spatially flipped kernel (input/output channels swapped).
        gpad = [(0, 0), (0, 0)] + [
            (keff[i] - 1 - spec.padding[i],) * 2 for i in range(nd)]
        gp = np.pad(g, gpad)
        flip = (slice(None), slice(None)) + (slice(None, None, -1),) * nd
        tspec = ConvSpec(spec.kernel, (1,) * nd, (0,) * nd,
                         spec.out_channels, spec.in_channels,
                         dilation=spec.dilation)
        gwin = _windows(gp, tspec)  # [N, C', *in, *k]
        wf = w[flip]
        if depthwise:
            wb = wf[:, 0].reshape((1, spec.out_channels) + (1,) * nd + spec.kernel)
            return (gwin * wb).sum(axis=tuple(range(2 + nd, 2 + 2 * nd)))
        axes_win = (1,) + tuple(range(2 + nd, 2 + 2 * nd))
        axes_w = (0,) + tuple(range(2, 2 + nd))
        gx = np.tensordot(gwin, wf, axes=(axes_win, axes_w))
        return np.moveaxis(gx, -1, 1)
    # Strided case: scatter per kernel offset onto the padded input.
    gxp = np.zeros(xp_shape)
    if not depthwise:
        gwin = np.tensordot(g, w, axes=([1], [0]))
        gwin = np.moveaxis(gwin, 1 + nd, 1)  # [N, C, *out, *k]
    for t in itertools.product(*(range(k) for k in spec.kernel)):
        sel = tuple(
            slice(t[i] * spec.dilation[i],
                  t[i] * spec.dilation[i] + out_spatial[i] * spec.stride[i],
                  spec.stride[i])
            for i in range(nd))
        if depthwise:
            wt = w[(slice(None), 0) + t]  # [C]
            contrib = g * wt.reshape((1, -1) + (1,) * nd)
        else:
            contrib = gwin[(Ellipsis,) + t]
        gxp[(slice(None), slice(None)) + sel] += contrib
    unpad = (slice(None), slice(None)) + tuple(
        slice(p, p + x_shape[2 + i]) for i, p in enumerate(spec.padding))
    return gxp[unpad]


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor) -> Tensor:
    """2D convolution [N,C,H,W] -> [N,C',H',W'] with H' = (H+2p-keff)//s + 1."""
    if spec.ndim_spatial != 2:
        raise ValueError(f"conv2d needs a 2-axis spec, got {spec.ndim_spatial}")
    return _conv_nd(x, spec, weights, depthwise=False)


def conv3d(x: Tensor, spec: ConvSpec, weights: Tensor) -> Tensor:
    """3D convolution over [N,C,D,H,W]."""
    if spec.ndim_spatial != 3:
        raise ValueError(f"conv3d needs a 3-axis spec, got {spec.ndim_spatial}")
    return _conv_nd(x, spec, weights, depthwise=False)


def conv_depthwise(x: Tensor, spec: ConvSpec, weights: Tensor) -> Tensor:
    """Per-channel (depthwise) convolution; weights [C,1,*k]."""
    return _conv_nd(x, spec, weights, depthwise=True)


def channel_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each (sample, channel) slice over its spatial extent.

    The stateless stand-in for batch norm: deterministic, independent of
    batch composition, no running statistics.  Slices with (near-)zero
    variance come out as zeros.
    """
    x = as_tensor(x)
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    sigma = np.sqrt(var + eps)
    y = (x.data - mu) / sigma

    def vjp(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return ((g - gm - y * gy) / sigma,)

    return make_node(y, (x,), vjp)


def channel_affine(x: Tensor, scl: Tensor, shift: Tensor) -> Tensor:
    """y[n,c,...] = x[n,c,...] * scl[c] + shift[c] (the learnable affine)."""
    x, scl, shift = as_tensor(x), as_tensor(scl), as_tensor(shift)
    c = x.shape[1]
    if scl.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"affine params must have shape ({c},)")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = x.data * scl.data.reshape(bshape) + shift.data.reshape(bshape)

    def vjp(g):
        red = (0,) + tuple(range(2, x.ndim))
        return (g * scl.data.reshape(bshape),
                (g * x.data).sum(axis=red),
                g.sum(axis=red))

    return make_node(out, (x, scl, shift), vjp)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)
    return make_node(out, (x,), lambda g: (np.where(mask, g, slope * g),))


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax; outputs sum to 1 along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return make_node(p, (x,), vjp)


# ---- resampling -----------------------------------------------------------------


def _axis_weights(src: int, dst: int) -> np.ndarray:
    """Endpoint-aligned linear resampling matrix [dst, src].

    Output t samples source coordinate t*(src-1)/(dst-1); a single output
    point samples the source midpoint.
    """
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    for t in range(dst):
        pos = (src - 1) / 2 if dst == 1 else t * (src - 1) / (dst - 1)
        i0 = int(np.floor(pos))
        i0 = min(i0, src - 2)
        f = pos - i0
        m[t, i0] += 1.0 - f
        m[t, i0 + 1] += f
    return m


def _apply_axis(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(arr, m, axes=([axis], [1]))
    return np.moveaxis(out, -1, axis)


def interpolate(x: Tensor, target_spatial) -> Tensor:
    """Bilinear (2 spatial axes) or trilinear (3) resample of [N,C,*spatial].

    Endpoint-aligned sampling; exact identity when target equals source.
    """
    x = as_tensor(x)
    target_spatial = tuple(int(t) for t in target_spatial)
    nd = len(target_spatial)
    if x.ndim != nd + 2:
        raise ValueError(
            f"interpolate target has {nd} axes but input shape is {x.shape}")
    if any(t < 1 for t in target_spatial):
        raise ValueError(f"target extents must be >= 1, got {target_spatial}")
    src = x.shape[2:]
    if tuple(src) == target_spatial:
        return make_node(x.data, (x,), lambda g: (g,))

    mats = [None if src[i] == target_spatial[i] else _axis_weights(src[i], target_spatial[i])
            for i in range(nd)]
    out = x.data
    for i, m in enumerate(mats):
        if m is not None:
            out = _apply_axis(out, m, 2 + i)

    def vjp(g):
        gx = g
        for i, m in enumerate(mats):
            if m is not None:
                gx = _apply_axis(gx, m.T, 2 + i)
        return (gx,)

    return make_node(out, (x,), vjp)


# ---- pooling --------------------------------------------------------------------


def _pool(x: Tensor, kernel: int, mode: str) -> Tensor:
    """Shape-preserving kxk(xk) pooling, stride 1, zero/-inf padding.

    Average pooling divides by the full window size (padding included);
    max pooling ignores padded positions.  Tied maxima all receive gradient.
    """
    x = as_tensor(x)
    nd = x.ndim - 2
    if kernel % 2 != 1:
        raise ValueError("pooling kernel must be odd to preserve shape")
    p = kernel // 2
    fill = 0.0 if mode == "avg" else -np.inf
    pad = [(0, 0), (0, 0)] + [(p, p)] * nd
    xp = np.pad(x.data, pad, constant_values=fill)
    win = sliding_window_view(xp, (kernel,) * nd, axis=tuple(range(2, 2 + nd)))
    kern_axes = tuple(range(2 + nd, 2 + 2 * nd))
    if mode == "avg":
        out = win.mean(axis=kern_axes)
    else:
        out = win.max(axis=kern_axes)

    def vjp(g):
        gxp = np.zeros(xp.shape)
        nwin = kernel ** nd
        for t in itertools.product(*(range(kernel),) * nd):
            sel = tuple(slice(t[i], t[i] + x.shape[2 + i]) for i in range(nd))
            full = (slice(None), slice(None)) + sel
            if mode == "avg":
                gxp[full] += g / nwin
            else:
                gxp[full] += g * (xp[full] == out)
        unpad = (slice(None), slice(None)) + tuple(
            slice(p, p + x.shape[2 + i]) for i in range(nd))
        return (gxp[unpad],)

    return make_node(out, (x,), vjp)


def avg_pool(x: Tensor, kernel: int = 3) -> Tensor:
    return _pool(x, kernel, "avg")


def max_pool(x: Tensor, kernel: int = 3) -> Tensor:
    return _pool(x, kernel, "max")
