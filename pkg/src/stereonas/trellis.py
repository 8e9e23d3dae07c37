"""Network-level search space: a trellis of cells over resolution levels.

Both sub-networks share the same machinery: an L-layer grid whose level s
runs at 1/2^s of the trellis base resolution with 2^s times the base filter
count.  Scalar routing weights (one per arrow between consecutive layers)
are softmax-normalized over the arrows entering each node.  The feature
trellis hangs off a fixed three-layer stem that reduces the input to 1/3
resolution, so its four levels sit at {1/3, 1/6, 1/12, 1/24} of the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .cells import Cell, ConvUnit, LinearConv, OperationSet, Preproc, make_opset
from .modules import Module, ModuleDict, rng_for
from .tensor import Tensor, weighted_sum

STEM_DOWNSAMPLE = 3
NUM_CELL_EDGES = 9


@dataclass(frozen=True)
class TrellisConfig:
    """Static layout of one trellis."""

    kind: str                 # "feature" | "matching"
    num_layers: int
    base_filters: int
    source_channels: int      # channels of the layer-0 activation feeding layer 1
    num_levels: int = 4
    residual: bool = True
    opset_variant: str = "reduced"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("trellis needs at least one layer")
        if self.num_levels < 1 or self.num_levels > 4:
            raise ValueError("trellis supports 1..4 resolution levels")

    @property
    def opset(self) -> OperationSet:
        return make_opset(self.kind, self.opset_variant)

    def filters(self, level: int) -> int:
        return self.base_filters * (2 ** level)

    def out_channels(self, level: int) -> int:
        """Channels of a cell output at this level (concat of 3 nodes)."""
        return 3 * self.filters(level)

    def populated(self, layer: int) -> range:
        """Levels that hold an activation at this layer (the start-up ramp)."""
        if layer <= 0:
            return range(0, 1)
        return range(0, min(layer, self.num_levels - 1) + 1)

    def in_sources(self, layer: int, level: int) -> tuple[int, ...]:
        """Source levels (ascending) of the arrows entering node (layer, level)."""
        prev = self.populated(layer - 1)
        return tuple(s for s in (level - 1, level, level + 1) if s in prev)

    def channels_at(self, layer: int, level: int) -> int:
        if layer == 0:
            return self.source_channels
        return self.out_channels(level)

    def level_resolution(self, base_spatial, level: int) -> tuple[int, ...]:
        return tuple(max(1, e // (2 ** level)) for e in base_spatial)

    def nodes(self):
        for layer in range(1, self.num_layers + 1):
            for level in self.populated(layer):
                yield layer, level


class BetaParams:
    """Per-arrow routing logits, grouped by receiving node, plus exit logits.

    The logits of the arrows entering one node form one softmax group; the
    exit group weighs the last layer's levels in the search-phase output.
    """

    def __init__(self, config: TrellisConfig):
        self.config = config
        self.node_logits: dict[tuple[int, int], Tensor] = {}
        for layer, level in config.nodes():
            n_in = len(config.in_sources(layer, level))
            self.node_logits[(layer, level)] = Tensor(
                np.zeros(n_in), requires_grad=True)
        n_exit = len(config.populated(config.num_layers))
        self.exit_logits = Tensor(np.zeros(n_exit), requires_grad=True)

    def named(self, prefix="beta"):
        for (layer, level), t in self.node_logits.items():
            yield f"{prefix}.l{layer}s{level}", t
        yield f"{prefix}.exit", self.exit_logits


class ArchParams:
    """Continuous architecture parameters for both trellises."""

    def __init__(self, feature_cfg: TrellisConfig, matching_cfg: TrellisConfig):
        self.alpha_feature = Tensor(
            np.zeros((NUM_CELL_EDGES, feature_cfg.opset.num_ops)), requires_grad=True)
        self.alpha_matching = Tensor(
            np.zeros((NUM_CELL_EDGES, matching_cfg.opset.num_ops)), requires_grad=True)
        self.beta_feature = BetaParams(feature_cfg)
        self.beta_matching = BetaParams(matching_cfg)

    def named(self):
        yield "alpha.feature", self.alpha_feature
        yield from self.beta_feature.named("beta.feature")
        yield "alpha.matching", self.alpha_matching
        yield from self.beta_matching.named("beta.matching")

    def tensors(self):
        for _, t in self.named():
            yield t

    def feature_group(self):
        yield "alpha.feature", self.alpha_feature
        yield from self.beta_feature.named("beta.feature")

    def matching_group(self):
        yield "alpha.matching", self.alpha_matching
        yield from self.beta_matching.named("beta.matching")

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()


class TrellisNode(Module):
    """One (layer, level) slot: a shared cell plus per-arrow input adapters."""

    def __init__(self, config: TrellisConfig, layer: int, level: int, rng):
        super().__init__()
        f_cell = config.filters(level)
        nd = config.opset.ndim_spatial
        self.cell = Cell(config.opset, f_cell, config.residual, rng)
        self.sources = config.in_sources(layer, level)
        self.pre1 = ModuleDict({
            src: Preproc(config.channels_at(layer - 1, src), f_cell, nd, rng)
            for src in self.sources})
        # When (layer-2, level) never exists, the first input falls back to
        # the arrow's own source activation, whose channel count varies.
        self.pp_exists = layer - 2 >= 0 and level in config.populated(layer - 2)
        if self.pp_exists:
            self.pre0 = Preproc(config.channels_at(layer - 2, level), f_cell, nd, rng)
        else:
            self.pre0_by_src = ModuleDict({
                src: Preproc(config.channels_at(layer - 1, src), f_cell, nd, rng)
                for src in self.sources})


class Trellis(Module):
    """The full grid; forward returns the last layer's per-level activations."""

    def __init__(self, config: TrellisConfig, rng):
        super().__init__()
        self.config = config
        self.grid = ModuleDict({
            f"l{layer}s{level}": TrellisNode(config, layer, level, rng)
            for layer, level in config.nodes()})
        last = config.num_layers
        self.exit_align = ModuleDict({
            s: Preproc(config.out_channels(s), config.out_channels(0),
                       config.opset.ndim_spatial, rng)
            for s in config.populated(last)})

    def forward(self, source: Tensor, alpha: Tensor, beta: BetaParams):
        cfg = self.config
        base = tuple(source.shape[2:])
        res = {s: cfg.level_resolution(base, s) for s in range(cfg.num_levels)}
        h = {(0, 0): source}
        for layer, level in cfg.nodes():
            node: TrellisNode = self.grid[f"l{layer}s{level}"]
            outs = []
            for src in node.sources:
                c_prev = h[(layer - 1, src)]
                if node.pp_exists:
                    c_pp, pre0 = h[(layer - 2, level)], node.pre0
                else:
                    c_pp, pre0 = c_prev, node.pre0_by_src[src]
                s0 = pre0(c_pp, res[level])
                s1 = node.pre1[src](c_prev, res[level])
                outs.append(node.cell(s0, s1, alpha))
            w = F.softmax(beta.node_logits[(layer, level)], 0)
            h[(layer, level)] = weighted_sum(outs, w)
        last = cfg.num_layers
        return {s: h[(last, s)] for s in cfg.populated(last)}

    def exit_merge(self, level_outputs: dict, beta: BetaParams) -> Tensor:
        """Search-phase exit: align every last-layer level to level 0 and
        combine with the dedicated exit softmax."""
        levels = sorted(level_outputs)
        target = tuple(level_outputs[0].shape[2:])
        w = F.softmax(beta.exit_logits, 0)
        aligned = [self.exit_align[s](level_outputs[s], target) for s in levels]
        return weighted_sum(aligned, w)


class Stem(Module):
    """Fixed entry: three 3x3 convolutions, the first with stride 3."""

    def __init__(self, in_channels: int, base_filters: int, rng):
        super().__init__()
        f0 = base_filters
        self.conv1 = ConvUnit(in_channels, f0, 2, 3, STEM_DOWNSAMPLE, rng)
        self.conv2 = ConvUnit(f0, 3 * f0, 2, 3, 1, rng)
        self.conv3 = ConvUnit(3 * f0, 3 * f0, 2, 3, 1, rng)

    def forward(self, x):
        return self.conv3(self.conv2(self.conv1(x)))


def check_input_extents(h: int, w: int, divisor: int = 24) -> None:
    if h % divisor or w % divisor:
        raise ValueError(
            f"input extents {h}x{w} must be divisible by {divisor}; pad by "
            f"+{(-h) % divisor} rows and +{(-w) % divisor} cols")


@dataclass(frozen=True)
class NetworkConfig:
    """Everything needed to build the searchable pipeline."""

    feature_layers: int = 6
    matching_layers: int = 12
    feature_filters: int = 4
    matching_filters: int = 4
    num_levels: int = 4
    residual: bool = True
    opset_variant: str = "reduced"
    max_disparity: int = 12
    extra_skips: tuple = field(default=((2, 5), (5, 9)))

    def feature_trellis(self) -> TrellisConfig:
        return TrellisConfig(
            kind="feature", num_layers=self.feature_layers,
            base_filters=self.feature_filters,
            source_channels=3 * self.feature_filters,
            num_levels=self.num_levels, residual=self.residual,
            opset_variant=self.opset_variant)

    def matching_trellis(self, volume_channels: int) -> TrellisConfig:
        return TrellisConfig(
            kind="matching", num_layers=self.matching_layers,
            base_filters=self.matching_filters,
            source_channels=volume_channels,
            num_levels=self.num_levels, residual=self.residual,
            opset_variant=self.opset_variant)

    @property
    def feature_exit_channels(self) -> int:
        return 3 * self.feature_filters

    @property
    def volume_channels(self) -> int:
        return 2 * self.feature_exit_channels


class Supernet(Module):
    """Both trellises with continuous architecture parameters attached.

    Architecture parameters live outside the module tree so that
    ``parameters()`` yields network weights only; the two groups feed
    different optimizers.
    """

    def __init__(self, config: NetworkConfig, seed: int):
        super().__init__()
        self.config = config
        rng = rng_for(seed, "supernet")
        fcfg = config.feature_trellis()
        mcfg = config.matching_trellis(config.volume_channels)
        self.stem = Stem(3, config.feature_filters, rng)
        self.feature = Trellis(fcfg, rng)
        self.matching = Trellis(mcfg, rng)
        self.cost_head = LinearConv(mcfg.out_channels(0), 1, 3, rng)
        self.arch = ArchParams(fcfg, mcfg)

    @property
    def feature_scale(self) -> int:
        """Full-resolution pixels per feature pixel at the exit."""
        return STEM_DOWNSAMPLE

    def extract_features(self, image: Tensor) -> Tensor:
        check_input_extents(image.shape[2], image.shape[3])
        stem_out = self.stem(image)
        levels = self.feature(stem_out, self.arch.alpha_feature, self.arch.beta_feature)
        return self.feature.exit_merge(levels, self.arch.beta_feature)

    def compute_cost(self, volume: Tensor) -> Tensor:
        if volume.ndim != 5:
            raise ValueError(f"feature volume must be 5D, got shape {volume.shape}")
        levels = self.matching(volume, self.arch.alpha_matching, self.arch.beta_matching)
        merged = self.matching.exit_merge(levels, self.arch.beta_matching)
        # Standardized per sample: caps the soft-argmin logit range so the
        # projection can sharpen without ever saturating its gradients.
        return F.channel_norm(self.cost_head(merged))
