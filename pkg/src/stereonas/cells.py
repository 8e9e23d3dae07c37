"""Searchable cell: a DAG of candidate operations under continuous relaxation.

A cell has two input nodes, three intermediate nodes and one output node.
Every edge from a lower-indexed node into an intermediate node carries a
softmax-weighted mixture of the candidate operations; the output node
concatenates the three intermediate nodes (plus, for residual cells, a
1x1-aligned copy of the preprocessed second input).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .modules import Module, ModuleList, uniform_fanin
from .tensor import (Tensor, concat, index, narrow, pad_axis, weighted_sum,
                     zeros_like)

REDUCED_OPS = ("conv3x3", "skip", "zero")
LARGE_OPS = ("conv3x3", "sep_conv3x3", "sep_conv5x5", "dil_conv3x3",
             "dil_conv5x5", "avg_pool3x3", "max_pool3x3", "skip", "zero")

# Node indexing inside a cell: 0,1 inputs; 2,3,4 intermediate; edges feed
# only intermediate nodes, ordered by (target, source).
CELL_EDGES = tuple((i, j) for j in (2, 3, 4) for i in range(j))
INTERMEDIATE_NODES = (2, 3, 4)


@dataclass(frozen=True)
class OperationSet:
    """Candidate operations for one cell kind.

    ``kind`` selects the convolution dimensionality: feature cells use 2D
    kernels, matching cells the 3D analogues of the same operations.
    """

    kind: str
    names: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ("feature", "matching"):
            raise ValueError(f"unknown cell kind {self.kind!r}")
        unknown = set(self.names) - set(LARGE_OPS)
        if unknown:
            raise ValueError(f"unknown operations: {sorted(unknown)}")

    @property
    def num_ops(self) -> int:
        return len(self.names)

    @property
    def ndim_spatial(self) -> int:
        return 2 if self.kind == "feature" else 3

    def nonzero_names(self):
        return tuple(n for n in self.names if n != "zero")


def make_opset(kind: str, variant: str) -> OperationSet:
    if variant == "reduced":
        return OperationSet(kind, REDUCED_OPS)
    if variant == "large":
        return OperationSet(kind, LARGE_OPS)
    raise ValueError(f"unknown opset variant {variant!r} (want reduced|large)")


class ConvUnit(Module):
    """conv -> standardize -> per-channel affine -> leaky ReLU (slope 0.01).

    The standardization keeps activations at unit scale regardless of
    depth; without it the deep matching trellis either attenuates or
    saturates at initialization.
    """

    def __init__(self, in_ch, out_ch, nd, kernel, stride, rng, dilation=1):
        super().__init__()
        pad = dilation * (kernel - 1) // 2 if stride == 1 else 0
        self.spec = F.conv_spec(kernel, stride, pad, in_ch, out_ch, nd,
                                has_affine=True, dilation=dilation)
        self.w = uniform_fanin(rng, self.spec.weight_shape(), in_ch * kernel ** nd)
        self.scale = Tensor(np.ones(out_ch), requires_grad=True)
        self.shift = Tensor(np.zeros(out_ch), requires_grad=True)

    def forward(self, x):
        y = F.channel_norm(F._conv_nd(x, self.spec, self.w, depthwise=False))
        return F.leaky_relu(F.channel_affine(y, self.scale, self.shift))


class LinearConv(Module):
    """Plain 1x1 (or 1x1x1) convolution used for channel alignment."""

    def __init__(self, in_ch, out_ch, nd, rng):
        super().__init__()
        self.spec = F.conv_spec(1, 1, 0, in_ch, out_ch, nd)
        self.w = uniform_fanin(rng, self.spec.weight_shape(), in_ch)

    def forward(self, x):
        return F._conv_nd(x, self.spec, self.w, depthwise=False)


class SepConvOp(Module):
    """Depthwise (optionally dilated) conv + pointwise 1x1, then affine + ReLU."""

    def __init__(self, channels, nd, kernel, rng, dilation=1):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.dw_spec = F.conv_spec(kernel, 1, pad, channels, channels, nd,
                                   dilation=dilation)
        self.dw = uniform_fanin(rng, self.dw_spec.weight_shape(depthwise=True),
                                kernel ** nd)
        self.pw_spec = F.conv_spec(1, 1, 0, channels, channels, nd)
        self.pw = uniform_fanin(rng, self.pw_spec.weight_shape(), channels)
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x):
        y = F.conv_depthwise(x, self.dw_spec, self.dw)
        y = F.channel_norm(F._conv_nd(y, self.pw_spec, self.pw, depthwise=False))
        return F.leaky_relu(F.channel_affine(y, self.scale, self.shift))


class PoolOp(Module):
    def __init__(self, mode):
        super().__init__()
        self.mode = mode

    def forward(self, x):
        return F.avg_pool(x, 3) if self.mode == "avg" else F.max_pool(x, 3)


class SkipOp(Module):
    """Identity, parameter-free.

    Across a shape mismatch the skip stays parameter-free: channels are
    zero-padded or truncated, resolution is fixed by interpolation.
    """

    def forward(self, x, out_channels=None, out_spatial=None):
        if out_spatial is not None and tuple(x.shape[2:]) != tuple(out_spatial):
            x = F.interpolate(x, out_spatial)
        if out_channels is not None and x.shape[1] != out_channels:
            if x.shape[1] > out_channels:
                x = narrow(x, 1, 0, out_channels)
            else:
                x = pad_axis(x, 1, 0, out_channels - x.shape[1])
        return x


class ZeroOp(Module):
    def forward(self, x):
        return zeros_like(x)


def build_op(name: str, channels: int, nd: int, rng) -> Module:
    if name == "conv3x3":
        return ConvUnit(channels, channels, nd, 3, 1, rng)
    if name == "sep_conv3x3":
        return SepConvOp(channels, nd, 3, rng)
    if name == "sep_conv5x5":
        return SepConvOp(channels, nd, 5, rng)
    if name == "dil_conv3x3":
        return SepConvOp(channels, nd, 3, rng, dilation=2)
    if name == "dil_conv5x5":
        return SepConvOp(channels, nd, 5, rng, dilation=2)
    if name == "avg_pool3x3":
        return PoolOp("avg")
    if name == "max_pool3x3":
        return PoolOp("max")
    if name == "skip":
        return SkipOp()
    if name == "zero":
        return ZeroOp()
    raise ValueError(f"unknown operation {name!r}")


def _nonzero_indices(opset: OperationSet) -> np.ndarray:
    return np.array([r for r, n in enumerate(opset.names) if n != "zero"])


def _mixed_from_probs(x: Tensor, probs_row_nz: Tensor, opset: OperationSet,
                      edge_ops: ModuleList, nz: np.ndarray) -> Tensor:
    outs = [edge_ops[r](x) for r in nz]
    if not outs:
        return zeros_like(x)
    return weighted_sum(outs, probs_row_nz)


def mixed_op(x: Tensor, edge_alpha: Tensor, opset: OperationSet,
             edge_ops: ModuleList) -> Tensor:
    """Softmax(alpha)-weighted sum of every candidate operation on one edge.

    The zero operation contributes exactly nothing to the sum, so it is
    skipped; its logit still participates in the softmax normalization.
    """
    if edge_alpha.shape != (opset.num_ops,):
        raise ValueError(
            f"alpha vector has shape {edge_alpha.shape}, expected "
            f"({opset.num_ops},) for opset {opset.names}")
    nz = _nonzero_indices(opset)
    probs = F.softmax(edge_alpha, 0)
    return _mixed_from_probs(x, index(probs, nz), opset, edge_ops, nz)


class Preproc(Module):
    """Align a cell input to a target resolution and channel count.

    Resizing uses interpolation, channel change a linear 1x1 convolution;
    both are skipped entirely when the input already matches.
    """

    def __init__(self, in_ch, out_ch, nd, rng):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        if in_ch != out_ch:
            self.align = LinearConv(in_ch, out_ch, nd, rng)
        else:
            self.align = None

    def forward(self, x, target_spatial):
        if x.shape[1] != self.in_ch:
            raise ValueError(
                f"preproc built for {self.in_ch} channels got {x.shape[1]}")
        if tuple(x.shape[2:]) != tuple(target_spatial):
            x = F.interpolate(x, target_spatial)
        if self.align is not None:
            x = self.align(x)
        return x


class Cell(Module):
    """One searchable cell; op weights are shared across its invocations."""

    def __init__(self, opset: OperationSet, channels: int, residual: bool, rng):
        super().__init__()
        self.opset = opset
        self.channels = channels
        self.residual = residual
        nd = opset.ndim_spatial
        self.edges = ModuleList(
            ModuleList(build_op(name, channels, nd, rng) for name in opset.names)
            for _ in CELL_EDGES)
        if residual:
            self.res_align = LinearConv(channels, 3 * channels, nd, rng)

    @property
    def out_channels(self) -> int:
        return 3 * self.channels

    def forward(self, s0: Tensor, s1: Tensor, alpha: Tensor) -> Tensor:
        if s0.shape != s1.shape:
            raise AssertionError(
                f"cell inputs disagree after preprocessing: {s0.shape} vs "
                f"{s1.shape}; this is an internal wiring bug")
        if alpha.shape != (len(CELL_EDGES), self.opset.num_ops):
            raise ValueError(
                f"alpha has shape {alpha.shape}, expected "
                f"({len(CELL_EDGES)}, {self.opset.num_ops})")
        nz = _nonzero_indices(self.opset)
        probs = F.softmax(alpha, 1)
        states = [s0, s1]
        for j in INTERMEDIATE_NODES:
            acc = None
            for e, (i, jj) in enumerate(CELL_EDGES):
                if jj != j:
                    continue
                row = index(probs, (e, nz))
                term = _mixed_from_probs(states[i], row, self.opset,
                                         self.edges[e], nz)
                acc = term if acc is None else acc + term
            states.append(acc)
        out = concat(states[2:5], axis=1)
        if self.residual:
            out = out + self.res_align(s1)
        return out


def preprocess_inputs(c_prev_prev: Tensor, c_prev: Tensor,
                      pre0: Preproc, pre1: Preproc, target_spatial):
    """Adjust both cell inputs to the cell's resolution and channel count."""
    s0 = pre0(c_prev_prev, target_spatial)
    s1 = pre1(c_prev, target_spatial)
    if s0.shape != s1.shape:
        raise AssertionError(
            f"preprocess produced mismatched shapes {s0.shape} vs {s1.shape}")
    return s0, s1


def cell_forward(cell: Cell, pre0: Preproc, pre1: Preproc,
                 c_prev_prev: Tensor, c_prev: Tensor, alpha: Tensor,
                 target_spatial) -> Tensor:
    """Preprocess both inputs, then run the cell DAG."""
    s0, s1 = preprocess_inputs(c_prev_prev, c_prev, pre0, pre1, target_spatial)
    return cell(s0, s1, alpha)
