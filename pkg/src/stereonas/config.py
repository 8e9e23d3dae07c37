"""Flat key=value run configuration.

Config files hold one ``key=value`` per line (``#`` comments allowed); CLI
flags override file values.  ``canonical()`` renders the sorted, normalized
form that is echoed into every run's metadata, and parsing that form yields
an identical config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass(frozen=True)
class RunConfig:
    # global
    seed: int = 0
    out: str = "runs/toy"
    threads: int = 0           # BLAS parallelism to request; 0 = leave as found
    # data generation
    data_samples: int = 200
    data_height: int = 24
    data_width: int = 48
    data_density: float = 0.5
    data_dot_size: int = 3
    data_disparities: str = "3,6"
    data_min_regions: int = 1
    data_max_regions: int = 2
    max_disparity: int = 12
    eval_samples: int = 40
    # architecture
    feature_layers: int = 6
    matching_layers: int = 12
    feature_filters: int = 4
    matching_filters: int = 4
    num_levels: int = 4
    cell: str = "residual"
    opset: str = "reduced"
    search_mode: str = "joint"
    extra_skips: str = "2:5,5:9"
    # schedules
    search_epochs: int = 10
    warmup_epochs: int = 3
    train_epochs: int = 20
    lr_start: float = 0.025
    lr_end: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0003
    arch_lr: float = 0.5
    batch_size: int = 4
    crop_height: int = 24
    crop_width: int = 48

    def __post_init__(self):
        if not 0.0 < self.data_density < 1.0:
            raise ConfigError(
                f"data_density must be in (0,1), got {self.data_density}")
        if self.cell not in ("residual", "direct"):
            raise ConfigError(f"cell must be residual|direct, got {self.cell!r}")
        if self.opset not in ("reduced", "large"):
            raise ConfigError(f"opset must be reduced|large, got {self.opset!r}")
        if self.search_mode not in ("joint", "separate"):
            raise ConfigError(
                f"search_mode must be joint|separate, got {self.search_mode!r}")
        if self.data_height % 24 or self.data_width % 24:
            raise ConfigError("data_height and data_width must be divisible by 24")
        if self.crop_height % 24 or self.crop_width % 24:
            raise ConfigError("crop extents must be divisible by 24")
        if self.eval_samples >= self.data_samples:
            raise ConfigError("eval_samples must leave training data")
        if self.data_dot_size < 1:
            raise ConfigError("data_dot_size must be >= 1")
        if not 0 < self.data_min_regions <= self.data_max_regions:
            raise ConfigError("region count bounds must satisfy 0 < min <= max")
        self.disparity_values()
        self.extra_skip_pairs()

    # ---- derived views -------------------------------------------------------

    def disparity_values(self) -> tuple[int, ...]:
        try:
            vals = tuple(int(t) for t in self.data_disparities.split(",") if t)
        except ValueError as e:
            raise ConfigError(f"bad data_disparities {self.data_disparities!r}") from e
        if not vals or any(not 0 <= v <= self.max_disparity for v in vals):
            raise ConfigError(
                f"data_disparities must lie in 0..{self.max_disparity}")
        return vals

    def extra_skip_pairs(self) -> tuple[tuple[int, int], ...]:
        if not self.extra_skips.strip():
            return ()
        pairs = []
        for tok in self.extra_skips.split(","):
            parts = tok.split(":")
            if len(parts) != 2:
                raise ConfigError(f"bad extra_skips token {tok!r} (want from:to)")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as e:
                raise ConfigError(f"bad extra_skips token {tok!r}") from e
        return tuple(pairs)

    def network_config(self):
        from .trellis import NetworkConfig
        return NetworkConfig(
            feature_layers=self.feature_layers,
            matching_layers=self.matching_layers,
            feature_filters=self.feature_filters,
            matching_filters=self.matching_filters,
            num_levels=self.num_levels,
            residual=(self.cell == "residual"),
            opset_variant=self.opset,
            max_disparity=self.max_disparity,
            extra_skips=self.extra_skip_pairs())

    def search_schedule(self):
        from .search import SearchSchedule
        return SearchSchedule(
            total_epochs=self.search_epochs, warmup_epochs=self.warmup_epochs,
            lr_start=self.lr_start, lr_end=self.lr_end,
            momentum=self.momentum, weight_decay=self.weight_decay,
            arch_lr=self.arch_lr, batch_size=self.batch_size,
            crop_height=self.crop_height, crop_width=self.crop_width)

    def canonical(self) -> str:
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v!r}" if isinstance(v, float)
                         else f"{f.name}={v}")
        return "\n".join(lines) + "\n"


class ConfigError(ValueError):
    pass


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    typ = _FIELDS[name].type
    typ = {"int": int, "float": float, "str": str}.get(typ, typ)
    try:
        return typ(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {name}: {raw!r}") from e


def parse_config_text(text: str) -> dict:
    values = {}
    for num, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {num}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    """Config file values first, then CLI overrides on top of defaults."""
    values = {}
    if path is not None:
        with open(path) as f:
            values.update(parse_config_text(f.read()))
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = str(val)
    typed = {name: _convert(name, raw) for name, raw in values.items()}
    return RunConfig(**typed)
