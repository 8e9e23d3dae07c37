"""Geometry glue: 4D feature volume, soft-argmin projection, training loss.

The feature volume replicates left features across the disparity axis and
pairs them with right features shifted by d pixels at the feature scale;
out-of-frame shifts are zero-filled (zero marks "no evidence").  The cost
volume produced by the matching network is upsampled to full resolution
first, then projected to disparities with a soft-argmin, so its output is
already in full-resolution pixel units.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor, backward, make_node, tsum


def build_feature_volume(f_left: Tensor, f_right: Tensor, num_shifts: int) -> Tensor:
    """Concatenate left features with d-shifted right features for each d.

    Output [N, 2C, D', H', W'] with V[:, :C, d] = left and
    V[:, C:, d, h, w] = right[h, w-d] (zero where w-d < 0).
    """
    f_left, f_right = as_tensor(f_left), as_tensor(f_right)
    if f_left.shape != f_right.shape:
        raise ValueError(
            f"left/right feature shapes differ: {f_left.shape} vs {f_right.shape}")
    n, c, h, w = f_left.shape
    if not 1 <= num_shifts <= w:
        raise ValueError(
            f"disparity shift count {num_shifts} must be in [1, {w}] for "
            f"feature width {w}")
    out = np.zeros((n, 2 * c, num_shifts, h, w))
    for d in range(num_shifts):
        out[:, :c, d] = f_left.data
        if d == 0:
            out[:, c:, d] = f_right.data
        else:
            out[:, c:, d, :, d:] = f_right.data[:, :, :, :-d]

    def vjp(g):
        gl = g[:, :c].sum(axis=2)
        gr = np.zeros_like(f_right.data)
        for d in range(num_shifts):
            if d == 0:
                gr += g[:, c:, d]
            else:
                gr[:, :, :, :-d] += g[:, c:, d, :, d:]
        return gl, gr

    return make_node(out, (f_left, f_right), vjp)


def _disparity_axis_matrix(src_bins: int, full_bins: int) -> np.ndarray:
    """Zero-anchored linear resampling of the disparity axis.

    Source bin b holds the cost of a b-pixel shift at the feature scale,
    i.e. full-resolution disparity b*(full/src); output index t therefore
    samples source position t*src/full, which recovers pixel units exactly
    (endpoint alignment would stretch the axis).  Positions beyond the last
    measured shift replicate it.
    """
    m = np.zeros((full_bins, src_bins))
    for t in range(full_bins):
        pos = t * src_bins / full_bins
        i0 = int(np.floor(pos))
        if i0 >= src_bins - 1:
            m[t, src_bins - 1] = 1.0
        else:
            f = pos - i0
            m[t, i0] = 1.0 - f
            m[t, i0 + 1] = f
    return m


def _resample_disparity_axis(x: Tensor, full_bins: int) -> Tensor:
    """Apply the zero-anchored matrix along axis 1 of [N, D', H, W]."""
    x = as_tensor(x)
    src = x.shape[1]
    if src == full_bins:
        return x
    m = _disparity_axis_matrix(src, full_bins)

    def vjp(g):
        return (F._apply_axis(g, m.T, 1),)

    return make_node(F._apply_axis(x.data, m, 1), (x,), vjp)


def project_disparity(cost: Tensor, full_resolution, max_disparity: int) -> Tensor:
    """Cost volume -> disparity map in full-resolution pixels.

    Upsamples the [N,1,D',H',W'] cost trilinearly to [N,1,D,H,W] with
    D = max_disparity (bilinear endpoint-aligned spatially, zero-anchored
    along the disparity axis so bin units stay full-resolution pixels),
    then takes the expectation of d under softmax(-cost) along the
    disparity axis.  Output lies in [0, D-1].
    """
    cost = as_tensor(cost)
    if cost.ndim != 5 or cost.shape[1] != 1:
        raise ValueError(f"cost volume must be [N,1,D,H,W], got {cost.shape}")
    if not np.all(np.isfinite(cost.data)):
        raise ValueError("cost volume contains non-finite values")
    h, w = full_resolution
    planes = cost[:, 0]                      # [N, D', H', W']
    if tuple(planes.shape[2:]) != (h, w):
        planes = F.interpolate(planes, (h, w))   # D' as channel axis
    full = _resample_disparity_axis(planes, max_disparity)
    prob = F.softmax(-full, axis=1)
    dvals = Tensor(np.arange(max_disparity, dtype=np.float64).reshape(1, -1, 1, 1))
    return tsum(prob * dvals, axis=1)        # [N, H, W]


def smooth_l1_loss(pred: Tensor, gt: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean over valid pixels of 0.5*x^2 (|x|<1) else |x|-0.5, x = pred-gt."""
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or gt.shape != valid.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {valid.shape}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("validity mask is empty; the mean loss is undefined")
    x = pred.data - gt
    small = np.abs(x) < 1.0
    per_pixel = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    loss = float(per_pixel[valid].sum() / n_valid)

    def vjp(g):
        dldx = np.where(small, x, np.sign(x)) * valid / n_valid
        return (g * dldx,)

    return make_node(np.asarray(loss), (pred,), vjp)


def full_forward(model, left, right, gt, valid, max_disparity: int):
    """Run the whole pipeline; returns (disparity map tensor, scalar loss).

    ``model`` provides extract_features / compute_cost / feature_scale;
    left and right share the feature extractor weights (Siamese).
    """
    left, right = as_tensor(left), as_tensor(right)
    n, _, h, w = left.shape
    f_left = model.extract_features(left)
    f_right = model.extract_features(right)
    scale = model.feature_scale
    num_shifts = max(1, max_disparity // scale)
    volume = build_feature_volume(f_left, f_right, num_shifts)
    cost = model.compute_cost(volume)
    disp = project_disparity(cost, (h, w), max_disparity)
    loss = smooth_l1_loss(disp, gt, valid)
    return disp, loss
