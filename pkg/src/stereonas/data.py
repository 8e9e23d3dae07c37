"""Synthetic random-dot stereograms, disparity metrics, and PFM I/O.

A sample is generated right-image-first: the right view is a field of
random binary dots, the left view is the right view warped by the ground
truth disparity (constant inside rectangular regions, zero elsewhere).
Left pixels whose source column falls outside the frame are filled with
fresh dots and masked invalid.

Dataset manifest grammar (one line per sample, whitespace-delimited):

    <seed> <height> <width> <density> <regions>

where <regions> is ``-`` for none, or a ``;``-joined list of
``x,y,width,height,disparity`` tuples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle carrying one integer disparity."""

    x: int
    y: int
    width: int
    height: int
    disparity: int


@dataclass(frozen=True)
class RdsSpec:
    height: int
    width: int
    dot_density: float
    regions: tuple
    max_disparity: int
    seed: int
    dot_size: int = 1       # dots are dot_size x dot_size blocks

    def __post_init__(self):
        if not 0.0 < self.dot_density < 1.0:
            raise ValueError(f"dot density must be in (0,1), got {self.dot_density}")
        if self.dot_size < 1:
            raise ValueError(f"dot size must be >= 1, got {self.dot_size}")
        for r in self.regions:
            if r.x < 0 or r.y < 0 or r.x + r.width > self.width \
                    or r.y + r.height > self.height:
                raise ValueError(f"region {r} lies outside the {self.height}x"
                                 f"{self.width} frame")
            if not 0 <= r.disparity <= self.max_disparity:
                raise ValueError(
                    f"region disparity {r.disparity} exceeds max_disparity "
                    f"{self.max_disparity}")


@dataclass
class StereoSample:
    left: np.ndarray      # [3, H, W] in [0, 1]
    right: np.ndarray     # [3, H, W]
    gt: np.ndarray        # [H, W] disparity in pixels
    valid: np.ndarray     # [H, W] bool


def _dot_field(rng, h, w, density, dot_size):
    if dot_size == 1:
        return (rng.random((h, w)) < density).astype(np.float64)
    gh = -(-h // dot_size)
    gw = -(-w // dot_size)
    small = (rng.random((gh, gw)) < density).astype(np.float64)
    return np.kron(small, np.ones((dot_size, dot_size)))[:h, :w]


def generate_rds(spec: RdsSpec) -> StereoSample:
    """Deterministic random-dot stereogram with exact ground truth."""
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    dots = _dot_field(rng, h, w, spec.dot_density, spec.dot_size)
    fill = _dot_field(rng, h, w, spec.dot_density, spec.dot_size)
    right = np.repeat(dots[None], 3, axis=0)

    gt = np.zeros((h, w))
    for r in spec.regions:
        gt[r.y:r.y + r.height, r.x:r.x + r.width] = r.disparity

    cols = np.arange(w)[None, :] - gt.astype(np.int64)
    valid = cols >= 0
    rows = np.broadcast_to(np.arange(h)[:, None], (h, w))
    warped = dots[rows, cols.clip(min=0)]
    left_plane = np.where(valid, warped, fill)
    left = np.repeat(left_plane[None], 3, axis=0)
    return StereoSample(left=left, right=right, gt=gt, valid=valid)


def random_crop(sample: StereoSample, crop_h: int, crop_w: int,
                rng: np.random.Generator) -> StereoSample:
    """Same window applied to both images, ground truth, and mask."""
    h, w = sample.gt.shape
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} exceeds frame {h}x{w}")
    if crop_h % 24 or crop_w % 24:
        raise ValueError(f"crop {crop_h}x{crop_w} must be divisible by 24")
    oy = int(rng.integers(0, h - crop_h + 1))
    ox = int(rng.integers(0, w - crop_w + 1))
    return StereoSample(
        left=sample.left[:, oy:oy + crop_h, ox:ox + crop_w],
        right=sample.right[:, oy:oy + crop_h, ox:ox + crop_w],
        gt=sample.gt[oy:oy + crop_h, ox:ox + crop_w],
        valid=sample.valid[oy:oy + crop_h, ox:ox + crop_w])


# ---- metrics ----------------------------------------------------------------


def _check_metric_args(pred, gt, mask):
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    mask = np.asarray(mask, bool)
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("empty validity mask")
    return pred, gt, mask


def epe(pred, gt, mask) -> float:
    """Mean absolute disparity error over valid pixels, in pixels."""
    pred, gt, mask = _check_metric_args(pred, gt, mask)
    return float(np.abs(pred - gt)[mask].mean())


def bad_n(pred, gt, mask, threshold_px: float) -> float:
    """Percentage of valid pixels with error strictly above the threshold."""
    if threshold_px <= 0:
        raise ValueError(f"threshold must be positive, got {threshold_px}")
    pred, gt, mask = _check_metric_args(pred, gt, mask)
    err = np.abs(pred - gt)[mask]
    return float(100.0 * (err > threshold_px).mean())


# ---- PFM --------------------------------------------------------------------


class PfmError(ValueError):
    pass


def pfm_write(path, array) -> None:
    """Grayscale PFM, little-endian float32, rows stored bottom-to-top."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer takes a 2D map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite disparities")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


def _read_token(f):
    """One whitespace-delimited header token; returns (token, next offset)."""
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise PfmError(f"truncated PFM header at byte {f.tell()}")
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def pfm_read(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != b"Pf":
            raise PfmError(
                f"bad PFM magic {magic!r} at byte 0 (only grayscale 'Pf' supported)")
        try:
            w = int(_read_token(f))
            h = int(_read_token(f))
            scale = float(_read_token(f))
        except ValueError as e:
            raise PfmError(f"malformed PFM header near byte {f.tell()}: {e}") from e
        if w <= 0 or h <= 0 or scale == 0:
            raise PfmError(f"invalid PFM dims/scale {w}x{h}/{scale}")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise PfmError(
                f"truncated PFM payload at byte {f.tell()}: expected "
                f"{4 * w * h} bytes, got {len(payload)}")
        data = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


# ---- manifest ---------------------------------------------------------------


def manifest_line(spec: RdsSpec) -> str:
    regions = ";".join(
        f"{r.x},{r.y},{r.width},{r.height},{r.disparity}" for r in spec.regions)
    return f"{spec.seed} {spec.height} {spec.width} {spec.dot_density!r} " \
           f"{regions or '-'}"


def parse_manifest_line(line: str, max_disparity: int,
                        dot_size: int = 1) -> RdsSpec:
    parts = line.split()
    if len(parts) != 5:
        raise ValueError(
            f"manifest line needs 5 fields (seed H W density regions), got "
            f"{len(parts)}: {line!r}")
    seed, h, w = int(parts[0]), int(parts[1]), int(parts[2])
    density = float(parts[3])
    regions = []
    if parts[4] != "-":
        for tok in parts[4].split(";"):
            vals = tok.split(",")
            if len(vals) != 5:
                raise ValueError(f"malformed region {tok!r} in line {line!r}")
            regions.append(Region(*map(int, vals)))
    return RdsSpec(height=h, width=w, dot_density=density,
                   regions=tuple(regions), max_disparity=max_disparity,
                   seed=seed, dot_size=dot_size)


def write_manifest(path, specs) -> None:
    with open(path, "w") as f:
        for s in specs:
            f.write(manifest_line(s) + "\n")


def read_manifest(path, max_disparity: int, dot_size: int = 1):
    with open(path) as f:
        return [parse_manifest_line(ln, max_disparity, dot_size)
                for ln in f if ln.strip()]


def sample_random_spec(rng: np.random.Generator, height: int, width: int,
                       density: float, disparities, max_disparity: int,
                       min_regions: int = 1, max_regions: int = 2,
                       dot_size: int = 1) -> RdsSpec:
    """Draw one RDS spec: 1-2 rectangles at disparities from the given set."""
    n = int(rng.integers(min_regions, max_regions + 1))
    regions = []
    for _ in range(n):
        rh = int(rng.integers(max(2, height // 2), max(3, 2 * height // 3) + 1))
        rw = int(rng.integers(max(2, width // 3), max(3, width // 2) + 1))
        y = int(rng.integers(0, height - rh + 1))
        x = int(rng.integers(0, width - rw + 1))
        d = int(rng.choice(np.asarray(disparities)))
        regions.append(Region(x=x, y=y, width=rw, height=rh, disparity=d))
    seed = int(rng.integers(0, 2 ** 31 - 1))
    return RdsSpec(height=height, width=width, dot_density=density,
                   regions=tuple(regions), max_disparity=max_disparity,
                   seed=seed, dot_size=dot_size)
