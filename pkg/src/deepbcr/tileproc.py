"""Raster front end: tissue masks, patch grids and Reinhard color normalization.

Reinhard statistics live in the decorrelated l-alpha-beta space of Reinhard
et al. (2001): RGB -> LMS (linear) -> log10 -> l-alpha-beta (orthogonal).
RGB is taken in [0, 1]; LMS values are floored at ``LMS_FLOOR`` before the
log so black pixels stay finite.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import median_filter

RGB_TO_LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LOG_LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]]
)
LAB_TO_LOG_LMS = np.linalg.inv(LOG_LMS_TO_LAB)
LMS_FLOOR = 1e-6
SIGMA_GUARD = 1e-6


@dataclass(eq=False)
class RasterImage:
    pixels: np.ndarray  # (height, width, 3), uint8 or float RGB in 0..255

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"expected a (height, width, 3) RGB array, got {px.shape}")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class LabStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def to_json(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, doc: dict) -> "LabStats":
        mean, std = doc["mean"], doc["std"]
        if len(mean) != 3 or len(std) != 3:
            raise ValueError("LabStats needs three means and three standard deviations")
        if any(s < 0 or not np.isfinite(s) for s in std):
            raise ValueError("LabStats std must be finite and >= 0")
        return cls(tuple(map(float, mean)), tuple(map(float, std)))


@dataclass(frozen=True)
class TileGridSpec:
    patch_size_px: int = 896
    stride_px: int | None = None
    min_tissue_fraction: float = 0.5

    def __post_init__(self):
        if self.patch_size_px < 1 or (self.stride_px is not None and self.stride_px < 1):
            raise ValueError("patch size and stride must be >= 1")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise ValueError("min_tissue_fraction must be in [0, 1]")

    @property
    def stride(self) -> int:
        return self.patch_size_px if self.stride_px is None else self.stride_px


# ---------------------------------------------------------------------------
# color space


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """``(..., 3)`` RGB in 0..255 to l-alpha-beta."""
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    lms = rgb @ RGB_TO_LMS.T
    return np.log10(np.maximum(lms, LMS_FLOOR)) @ LOG_LMS_TO_LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab` (unclamped, 0..255 scale)."""
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ LAB_TO_LOG_LMS.T)
    return (lms @ LMS_TO_RGB.T) * 255.0


def lab_stats(lab: np.ndarray) -> LabStats:
    flat = lab.reshape(-1, 3)
    return LabStats(tuple(flat.mean(axis=0).tolist()), tuple(flat.std(axis=0).tolist()))


def compute_lab_stats(image: RasterImage) -> LabStats:
    return lab_stats(rgb_to_lab(image.pixels))


def reinhard_lab(image: RasterImage, target: LabStats) -> np.ndarray:
    """Normalized l-alpha-beta channels before conversion back to RGB."""
    lab = rgb_to_lab(image.pixels)
    src = lab_stats(lab)
    mu_s, sd_s = np.array(src.mean), np.array(src.std)
    mu_t, sd_t = np.array(target.mean), np.array(target.std)
    ratio = np.where(sd_s < SIGMA_GUARD, 1.0, sd_t / np.where(sd_s < SIGMA_GUARD, 1.0, sd_s))
    return (lab - mu_s) * ratio + mu_t


def reinhard_normalize(image: RasterImage, target: LabStats) -> RasterImage:
    """Match the image's l-alpha-beta channel moments to ``target``; 8-bit output."""
    if not np.all(np.isfinite(target.std)):
        raise ValueError("target std must be finite")
    rgb = lab_to_rgb(reinhard_lab(image, target))
    return RasterImage(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# tissue detection and tiling


def downsample(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Block-average by ``factor``; edge blocks average whatever pixels they cover."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    px = np.asarray(pixels, dtype=np.float64)
    if factor == 1:
        return px
    h, w = px.shape[:2]
    hh, ww = -(-h // factor), -(-w // factor)
    sums = np.zeros((hh, ww, px.shape[2]))
    counts = np.zeros((hh, ww, 1))
    rows = np.arange(h) // factor
    cols = np.arange(w) // factor
    np.add.at(sums, (rows[:, None], cols[None, :]), px)
    np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
    return sums / counts


def hsv_saturation(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    mx = px.max(axis=-1)
    mn = px.min(axis=-1)
    return np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)


def tissue_mask(image: RasterImage, downsample_factor: int = 8, sat_threshold: float = 0.05,
                median_radius: int = 2) -> np.ndarray:
    """Boolean tissue mask on the downsampled thumbnail (``ceil(H/f) x ceil(W/f)``)."""
    sat = hsv_saturation(downsample(image.pixels, downsample_factor))
    if median_radius > 0:
        sat = median_filter(sat, size=2 * median_radius + 1, mode="nearest")
    return sat >= sat_threshold


class PatchGrid(NamedTuple):
    coords: list[tuple[int, int]]  # (col, row) in patch units, row-major
    too_small: bool


def patch_grid(width: int, height: int, spec: TileGridSpec, mask: np.ndarray | None = None,
               mask_downsample: int = 1) -> PatchGrid:
    """Windows fully inside the image whose tissue fraction reaches the minimum.

    ``mask`` may be at a reduced scale (``mask_downsample``); a window's tissue
    fraction is then taken over the mask cells it overlaps.
    """
    size, stride = spec.patch_size_px, spec.stride
    if width < size or height < size:
        warnings.warn(f"{width}x{height} image is smaller than one {size}px patch", stacklevel=2)
        return PatchGrid([], True)
    coords = []
    n_cols = (width - size) // stride + 1
    n_rows = (height - size) // stride + 1
    for row in range(n_rows):
        for col in range(n_cols):
            if mask is None:
                frac = 1.0
            else:
                x0, y0 = col * stride, row * stride
                f = mask_downsample
                win = mask[y0 // f : -(-(y0 + size) // f), x0 // f : -(-(x0 + size) // f)]
                frac = float(win.mean()) if win.size else 0.0
            if frac >= spec.min_tissue_fraction:
                coords.append((col, row))
    return PatchGrid(coords, False)


def crop_patch(image: RasterImage, col: int, row: int, spec: TileGridSpec) -> RasterImage:
    y0, x0 = row * spec.stride, col * spec.stride
    return RasterImage(image.pixels[y0 : y0 + spec.patch_size_px, x0 : x0 + spec.patch_size_px])


# ---------------------------------------------------------------------------
# PPM / PGM

_TOKEN = re.compile(rb"(#[^\n]*\n)|(\S+)")


def _parse_netpbm(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"expected {magic.decode()} netpbm file")
    pos = 2
    fields = []
    while len(fields) < 3:
        m = _TOKEN.search(data, pos)
        if m is None:
            raise ValueError("truncated netpbm header")
        pos = m.end()
        if m.group(2):
            fields.append(int(m.group(2)))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    return width, height, data[pos + 1 :]  # single whitespace byte after maxval


def read_ppm(path) -> RasterImage:
    w, h, body = _parse_netpbm(Path(path).read_bytes(), b"P6")
    if len(body) < w * h * 3:
        raise ValueError(f"{path}: pixel data truncated")
    return RasterImage(np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy())


def write_ppm(path, image: RasterImage):
    px = np.asarray(image.pixels)
    if px.dtype != np.uint8:
        px = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{px.shape[1]} {px.shape[0]}\n255\n".encode() + px.tobytes())


def read_pgm(path) -> np.ndarray:
    w, h, body = _parse_netpbm(Path(path).read_bytes(), b"P5")
    if len(body) < w * h:
        raise ValueError(f"{path}: pixel data truncated")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, gray: np.ndarray):
    gray = np.asarray(gray, dtype=np.uint8)
    Path(path).write_bytes(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode() + gray.tobytes())


def load_lab_stats(path) -> LabStats:
    return LabStats.from_json(json.loads(Path(path).read_text()))


def save_lab_stats(path, stats: LabStats):
    Path(path).write_text(json.dumps(stats.to_json(), indent=2) + "\n")
