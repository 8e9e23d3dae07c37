"""Hierarchical architecture search for volumetric stereo matching.

Library layout:

- ``tensor`` / ``functional``: float64 reverse-mode autodiff substrate
- ``cells`` / ``trellis``: searchable cells and the network-level grid
- ``pipeline``: feature volume, soft-argmin projection, training loss
- ``search``: bilevel alternating optimization
- ``decode``: genotype extraction, text format, and the decoded network
- ``data``: random-dot stereograms, metrics, PFM I/O
- ``config`` / ``cli`` / ``report``: batch front end
"""

__version__ = "0.1.0"

from .config import RunConfig
from .data import RdsSpec, StereoSample, bad_n, epe, generate_rds
from .decode import Genotype, build_discrete, decode_cell, decode_path
from .pipeline import (build_feature_volume, full_forward, project_disparity,
                       smooth_l1_loss)
from .search import SearchSchedule, bilevel_search, cosine_lr, make_split
from .tensor import Tensor, backward, no_grad
from .trellis import ArchParams, NetworkConfig, Supernet

__all__ = [
    "ArchParams", "Genotype", "NetworkConfig", "RdsSpec", "RunConfig",
    "SearchSchedule", "StereoSample", "Supernet", "Tensor", "backward",
    "bad_n", "bilevel_search", "build_discrete", "build_feature_volume",
    "cosine_lr", "decode_cell", "decode_path", "epe", "full_forward",
    "generate_rds", "make_split", "no_grad", "project_disparity",
    "smooth_l1_loss",
]
