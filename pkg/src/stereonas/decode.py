"""Discrete architecture extraction and the decoded (post-search) network.

Cell decoding keeps, per intermediate node, the two incoming edges whose
strongest non-zero operation has the highest mixing probability; path
decoding finds the maximum-probability route through the trellis by
dynamic programming over resolution levels.  Both are deterministic under
ties: lower source index, then op list order; lower level for paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import (CELL_EDGES, INTERMEDIATE_NODES, LARGE_OPS, OperationSet,
                    Preproc, build_op)
from .modules import Module, ModuleDict, ModuleList, rng_for
from .tensor import Tensor, concat
from .trellis import (STEM_DOWNSAMPLE, BetaParams, LinearConv, NetworkConfig,
                      Stem, TrellisConfig, check_input_extents)

GENOTYPE_HEADER = "genotype-v1"
_SECTIONS = ("feature_cell", "matching_cell", "feature_path", "matching_path",
             "extra_skips")
_VALID_OPS = tuple(n for n in LARGE_OPS if n != "zero")


@dataclass(frozen=True)
class Genotype:
    """Decoded architecture: per-node edge choices plus one path per trellis.

    Each cell is a 3-tuple over intermediate nodes 2..4; a node is a pair
    of (source, op-name) edges with distinct sources.  Paths give the
    resolution level of every layer; extra skips are identity connections
    between matching-path layers.
    """

    feature_cell: tuple
    matching_cell: tuple
    feature_path: tuple
    matching_path: tuple
    extra_skips: tuple = ()

    def validate(self, num_levels: int = 4) -> None:
        for label, cell in (("feature_cell", self.feature_cell),
                            ("matching_cell", self.matching_cell)):
            if len(cell) != len(INTERMEDIATE_NODES):
                raise ValueError(f"{label} must describe exactly 3 nodes")
            for j, node in zip(INTERMEDIATE_NODES, cell):
                if len(node) != 2:
                    raise ValueError(f"{label} node {j} needs exactly 2 edges")
                (s_a, op_a), (s_b, op_b) = node
                if s_a == s_b:
                    raise ValueError(
                        f"{label} node {j} has duplicate source {s_a}")
                for s, op in node:
                    if not 0 <= s < j:
                        raise ValueError(
                            f"{label} node {j} edge source {s} out of range")
                    if op not in _VALID_OPS:
                        raise ValueError(
                            f"{label} node {j} has invalid op {op!r}")
        for label, path in (("feature_path", self.feature_path),
                            ("matching_path", self.matching_path)):
            prev = 0
            for layer, s in enumerate(path, start=1):
                if not 0 <= s < num_levels:
                    raise ValueError(
                        f"{label} layer {layer} level {s} outside 0..{num_levels - 1}")
                if abs(s - prev) > 1:
                    raise ValueError(
                        f"{label} layer {layer} jumps from level {prev} to {s}")
                prev = s
        for frm, to in self.extra_skips:
            if not 1 <= frm < to <= len(self.matching_path):
                raise ValueError(
                    f"extra skip {frm}->{to} outside matching path of length "
                    f"{len(self.matching_path)}")


# ---- decoding ------------------------------------------------------------------


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_cell(alpha: np.ndarray, opset: OperationSet) -> tuple:
    """Top-2 strongest non-zero operations per intermediate node."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (len(CELL_EDGES), opset.num_ops):
        raise ValueError(
            f"alpha shape {alpha.shape} does not match 9x{opset.num_ops}")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("alpha contains non-finite entries")
    probs = _softmax_rows(alpha)
    nz = [r for r, n in enumerate(opset.names) if n != "zero"]
    cell = []
    for j in INTERMEDIATE_NODES:
        candidates = []
        for e, (i, jj) in enumerate(CELL_EDGES):
            if jj != j:
                continue
            sub = probs[e][nz]
            best = int(np.argmax(sub))   # first op on ties
            candidates.append((i, opset.names[nz[best]], float(sub[best])))
        assert len(candidates) >= 2, "cell topology guarantees >= 2 inputs"
        ranked = sorted(candidates, key=lambda c: (-c[2], c[0]))
        keep = sorted(ranked[:2], key=lambda c: c[0])
        cell.append(((keep[0][0], keep[0][1]), (keep[1][0], keep[1][1])))
    return tuple(cell)


def _log_softmax(v: np.ndarray) -> np.ndarray:
    s = v - v.max()
    return s - np.log(np.exp(s).sum())


def transition_log_probs(beta: BetaParams):
    """log softmax over the arrows entering each node, keyed by source level."""
    table = {}
    for (layer, level), logits in beta.node_logits.items():
        logp = _log_softmax(logits.data)
        sources = beta.config.in_sources(layer, level)
        for k, src in enumerate(sources):
            table[(layer, src, level)] = float(logp[k])
    return table


def exit_log_probs(beta: BetaParams):
    """log softmax of the exit group, keyed by last-layer level."""
    logp = _log_softmax(beta.exit_logits.data)
    levels = beta.config.populated(beta.config.num_layers)
    return {s: float(logp[k]) for k, s in enumerate(levels)}


def decode_path(beta: BetaParams, config: TrellisConfig = None) -> tuple:
    """Maximum-probability level path via dynamic programming.

    Scores sum per-transition log probabilities plus the exit group's log
    probability of the final level (the exit softmax is how the forward
    pass reads out the last layer, so it is the path's last arrow).  Among
    maximizing paths the lexicographically smallest (lowest level at the
    first divergence) is returned via smallest-successor tie-breaking on
    exact score ties.
    """
    cfg = config or beta.config
    table = transition_log_probs(beta)
    exit_lp = exit_log_probs(beta)
    num_layers = cfg.num_layers
    suffix = {(num_layers, s): exit_lp[s] for s in cfg.populated(num_layers)}
    choose = {}
    for layer in range(num_layers - 1, -1, -1):
        for s in cfg.populated(layer):
            best, best_next = -np.inf, None
            for nxt in (s - 1, s, s + 1):
                if nxt not in cfg.populated(layer + 1):
                    continue
                cand = table[(layer + 1, s, nxt)] + suffix[(layer + 1, nxt)]
                if cand > best:
                    best, best_next = cand, nxt
            suffix[(layer, s)] = best
            choose[(layer, s)] = best_next
    path, s = [], 0
    for layer in range(num_layers):
        s = choose[(layer, s)]
        path.append(s)
    return tuple(path)


def decode(arch, config: NetworkConfig) -> Genotype:
    """Extract the full discrete architecture from continuous parameters."""
    fcfg = config.feature_trellis()
    mcfg = config.matching_trellis(config.volume_channels)
    skips = tuple((a, b) for a, b in config.extra_skips
                  if 1 <= a < b <= config.matching_layers)
    geno = Genotype(
        feature_cell=decode_cell(arch.alpha_feature.data, fcfg.opset),
        matching_cell=decode_cell(arch.alpha_matching.data, mcfg.opset),
        feature_path=decode_path(arch.beta_feature, fcfg),
        matching_path=decode_path(arch.beta_matching, mcfg),
        extra_skips=skips)
    geno.validate(config.num_levels)
    return geno


# ---- discrete network ------------------------------------------------------------


class DiscreteCell(Module):
    """A cell with only the chosen operations; node = sum of its 2 edges."""

    def __init__(self, cell_genotype, kind: str, channels: int,
                 residual: bool, rng):
        super().__init__()
        nd = 2 if kind == "feature" else 3
        self.genotype = cell_genotype
        self.channels = channels
        self.residual = residual
        self.ops = ModuleList(
            ModuleList(build_op(op, channels, nd, rng) for _src, op in node)
            for node in cell_genotype)
        if residual:
            self.res_align = LinearConv(channels, 3 * channels, nd, rng)

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        states = [s0, s1]
        for node, node_ops in zip(self.genotype, self.ops):
            (src_a, _), (src_b, _) = node
            states.append(node_ops[0](states[src_a]) + node_ops[1](states[src_b]))
        out = concat(states[2:5], axis=1)
        if self.residual:
            out = out + self.res_align(s1)
        return out


class PathNetwork(Module):
    """One trellis collapsed to its decoded path (plus extra skip links)."""

    def __init__(self, kind: str, path, cell_genotype, base_filters: int,
                 source_channels: int, residual: bool, extra_skips, rng):
        super().__init__()
        self.kind = kind
        self.path = tuple(path)
        self.extra_skips = tuple(extra_skips)
        nd = 2 if kind == "feature" else 3
        self.nd = nd
        filt = lambda s: base_filters * 2 ** s
        self.ch = {0: source_channels}
        for layer, s in enumerate(self.path, start=1):
            self.ch[layer] = 3 * filt(s)
        self.cells = ModuleList()
        self.pre0 = ModuleList()
        self.pre1 = ModuleList()
        for layer, s in enumerate(self.path, start=1):
            f_cell = filt(s)
            self.cells.append(DiscreteCell(cell_genotype, kind, f_cell,
                                           residual, rng))
            pp_layer = max(layer - 2, 0)
            self.pre0.append(Preproc(self.ch[pp_layer], f_cell, nd, rng))
            self.pre1.append(Preproc(self.ch[layer - 1], f_cell, nd, rng))
        self.skip_align = ModuleDict({
            f"{a}to{b}": Preproc(self.ch[a], self.ch[b], nd, rng)
            for a, b in self.extra_skips})

    def level_resolution(self, base, s):
        return tuple(max(1, e // (2 ** s)) for e in base)

    def forward(self, source: Tensor) -> Tensor:
        base = tuple(source.shape[2:])
        h = {0: source}
        for layer, s in enumerate(self.path, start=1):
            res = self.level_resolution(base, s)
            c_prev = h[layer - 1]
            c_pp = h[max(layer - 2, 0)]
            s0 = self.pre0[layer - 1](c_pp, res)
            s1 = self.pre1[layer - 1](c_prev, res)
            out = self.cells[layer - 1](s0, s1)
            for a, b in self.extra_skips:
                if b == layer:
                    out = out + self.skip_align[f"{a}to{b}"](h[a], res)
            h[layer] = out
        return h[len(self.path)]


class DecodedNetwork(Module):
    """Runnable discrete pipeline built from a genotype."""

    def __init__(self, genotype: Genotype, config: NetworkConfig, seed: int):
        super().__init__()
        genotype.validate(config.num_levels)
        if len(genotype.feature_path) != config.feature_layers:
            raise ValueError(
                f"genotype feature path has {len(genotype.feature_path)} "
                f"layers, config expects {config.feature_layers}")
        if len(genotype.matching_path) != config.matching_layers:
            raise ValueError(
                f"genotype matching path has {len(genotype.matching_path)} "
                f"layers, config expects {config.matching_layers}")
        self.genotype = genotype
        self.config = config
        rng = rng_for(seed, "decoded")
        self.stem = Stem(3, config.feature_filters, rng)
        self.feature = PathNetwork(
            "feature", genotype.feature_path, genotype.feature_cell,
            config.feature_filters, 3 * config.feature_filters,
            config.residual, (), rng)
        exit_level = genotype.feature_path[-1]
        self._scale = STEM_DOWNSAMPLE * 2 ** exit_level
        feat_ch = 3 * config.feature_filters * 2 ** exit_level
        self.matching = PathNetwork(
            "matching", genotype.matching_path, genotype.matching_cell,
            config.matching_filters, 2 * feat_ch,
            config.residual, genotype.extra_skips, rng)
        match_exit_ch = 3 * config.matching_filters * 2 ** genotype.matching_path[-1]
        self.cost_head = LinearConv(match_exit_ch, 1, 3, rng)

    @property
    def feature_scale(self) -> int:
        return self._scale

    def extract_features(self, image: Tensor) -> Tensor:
        check_input_extents(image.shape[2], image.shape[3])
        return self.feature(self.stem(image))

    def compute_cost(self, volume: Tensor) -> Tensor:
        if volume.ndim != 5:
            raise ValueError(f"feature volume must be 5D, got {volume.shape}")
        expect = 2 * 3 * self.config.feature_filters * \
            2 ** self.genotype.feature_path[-1]
        if volume.shape[1] != expect:
            raise ValueError(
                f"volume has {volume.shape[1]} channels, genotype expects "
                f"{expect}")
        from .functional import channel_norm
        return channel_norm(self.cost_head(self.matching(volume)))


def build_discrete(genotype: Genotype, config: NetworkConfig,
                   seed: int) -> DecodedNetwork:
    return DecodedNetwork(genotype, config, seed)


# ---- text format -----------------------------------------------------------------


def serialize_genotype(geno: Genotype) -> str:
    lines = [GENOTYPE_HEADER]
    for label, cell in (("feature_cell", geno.feature_cell),
                        ("matching_cell", geno.matching_cell)):
        lines.append(label + ":")
        for j, node in zip(INTERMEDIATE_NODES, cell):
            (s_a, op_a), (s_b, op_b) = node
            lines.append(f"{j} {s_a} {op_a} {s_b} {op_b}")
    lines.append("feature_path:")
    lines.append(" ".join(str(s) for s in geno.feature_path))
    lines.append("matching_path:")
    lines.append(" ".join(str(s) for s in geno.matching_path))
    lines.append("extra_skips:")
    for a, b in geno.extra_skips:
        lines.append(f"{a} {b}")
    return "\n".join(lines) + "\n"


class GenotypeParseError(ValueError):
    pass


def parse_genotype(text: str) -> Genotype:
    lines = text.splitlines()
    if not lines or lines[0].strip() != GENOTYPE_HEADER:
        got = lines[0].strip() if lines else "<empty>"
        raise GenotypeParseError(
            f"line 1: expected header {GENOTYPE_HEADER!r}, got {got!r}")
    sections = {name: [] for name in _SECTIONS}
    current = None
    for num, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.endswith(":"):
            name = line[:-1]
            if name not in sections:
                raise GenotypeParseError(f"line {num}: unknown section {name!r}")
            current = name
            continue
        if current is None:
            raise GenotypeParseError(f"line {num}: content before any section")
        sections[current].append((num, line))

    def parse_cell(name):
        rows = sections[name]
        if len(rows) != 3:
            raise GenotypeParseError(
                f"section {name}: expected 3 node lines, got {len(rows)}")
        nodes = []
        for expect_j, (num, line) in zip(INTERMEDIATE_NODES, rows):
            toks = line.split()
            if len(toks) != 5:
                raise GenotypeParseError(
                    f"line {num}: node line needs 5 tokens, got {len(toks)}")
            try:
                j, s_a, s_b = int(toks[0]), int(toks[1]), int(toks[3])
            except ValueError as e:
                raise GenotypeParseError(f"line {num}: {e}") from e
            if j != expect_j:
                raise GenotypeParseError(
                    f"line {num}: expected node {expect_j}, got {j}")
            nodes.append(((s_a, toks[2]), (s_b, toks[4])))
        return tuple(nodes)

    def parse_path(name):
        rows = sections[name]
        if len(rows) != 1:
            raise GenotypeParseError(
                f"section {name}: expected one path line, got {len(rows)}")
        num, line = rows[0]
        try:
            path = tuple(int(t) for t in line.split())
        except ValueError as e:
            raise GenotypeParseError(f"line {num}: {e}") from e
        prev = 0
        for layer, s in enumerate(path, start=1):
            if abs(s - prev) > 1:
                raise GenotypeParseError(
                    f"section {name}: layer {layer} jumps from level {prev} "
                    f"to {s} (at most 1 allowed)")
            prev = s
        return path

    skips = []
    for num, line in sections["extra_skips"]:
        toks = line.split()
        if len(toks) != 2:
            raise GenotypeParseError(
                f"line {num}: extra skip needs 2 tokens, got {len(toks)}")
        try:
            skips.append((int(toks[0]), int(toks[1])))
        except ValueError as e:
            raise GenotypeParseError(f"line {num}: {e}") from e

    geno = Genotype(
        feature_cell=parse_cell("feature_cell"),
        matching_cell=parse_cell("matching_cell"),
        feature_path=parse_path("feature_path"),
        matching_path=parse_path("matching_path"),
        extra_skips=tuple(skips))
    try:
        geno.validate()
    except ValueError as e:
        raise GenotypeParseError(str(e)) from e
    return geno


def write_genotype(path, geno: Genotype) -> None:
    with open(path, "w") as f:
        f.write(serialize_genotype(geno))


def read_genotype(path) -> Genotype:
    with open(path) as f:
        return parse_genotype(f.read())
