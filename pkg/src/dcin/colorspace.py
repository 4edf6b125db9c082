"""RGB <-> l-alpha-beta conversion and statistics-matching color transfer.

Images are numpy arrays: RGB rasters are ``uint8`` of shape (H, W, 3) and
l-alpha-beta images are ``float64`` of shape (H, W, 3) with the channels
(l, alpha, beta) in the last axis. All arithmetic is float64.

No gamma linearization is applied: 8-bit samples are scaled to (0, 1] and fed
straight into the LMS matrix, as in the original Reinhard formulation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Reinhard et al. (2001), RGB -> LMS cone space.
RGB_TO_LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ],
    dtype=np.float64,
)
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)

# log-LMS -> l-alpha-beta decorrelation: diag(1/sqrt3, 1/sqrt6, 1/sqrt2) @ mixing.
LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]]
)
LAB_TO_LMS = np.linalg.inv(LMS_TO_LAB)

RGB_FLOOR = 1e-4
FLAT_STD = 1e-6


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and population standard deviation in l-alpha-beta."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self) -> None:
        mean = tuple(float(v) for v in self.mean)
        std = tuple(float(v) for v in self.std)
        if len(mean) != 3 or len(std) != 3:
            raise ValueError("ChannelStats needs exactly 3 means and 3 stds")
        if not all(np.isfinite(mean + std)):
            raise ValueError("ChannelStats values must be finite")
        if any(s < 0 for s in std):
            raise ValueError("ChannelStats std must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def as_rgb(image: np.ndarray) -> np.ndarray:
    """Validate an RGB raster and return it as a uint8 (H, W, 3) array."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() > 255:
            raise ValueError("RGB samples must be 8-bit integers")
        arr = arr.astype(np.uint8)
    return arr


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """Convert an 8-bit RGB image to l-alpha-beta (float64, H x W x 3)."""
    rgb = as_rgb(image).astype(np.float64) / 255.0
    np.maximum(rgb, RGB_FLOOR, out=rgb)
    lms = rgb @ RGB_TO_LMS.T
    return np.log10(lms) @ LMS_TO_LAB.T


def lab_to_rgb_float(lab: np.ndarray) -> np.ndarray:
    """Inverse transform without clipping or quantization, in 8-bit units."""
    lms = np.power(10.0, np.asarray(lab, dtype=np.float64) @ LAB_TO_LMS.T)
    return (lms @ LMS_TO_RGB.T) * 255.0


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Convert l-alpha-beta back to 8-bit RGB, clipping out-of-gamut values.

    Rounds half-up after clipping to [0, 255].
    """
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) lab image, got shape {lab.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        rgb = lab_to_rgb_float(lab)
    rgb = np.nan_to_num(rgb, nan=0.0, posinf=255.0, neginf=0.0)
    return np.floor(np.clip(rgb, 0.0, 255.0) + 0.5).astype(np.uint8)


def channel_stats(lab: np.ndarray) -> ChannelStats:
    """Per-channel mean and population (1/N) standard deviation."""
    flat = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    return ChannelStats(tuple(flat.mean(axis=0)), tuple(flat.std(axis=0)))


def image_stats(image: np.ndarray) -> ChannelStats:
    """Shortcut for ``channel_stats(rgb_to_lab(image))``."""
    return channel_stats(rgb_to_lab(image))


def transfer_lab(test: np.ndarray, reference_stats: ChannelStats) -> np.ndarray:
    """Match the l-alpha-beta statistics of ``test`` to ``reference_stats``.

    Returns the transferred image in l-alpha-beta, before conversion back to
    RGB. Channels whose std is below 1e-6 are only shifted.
    """
    lab = rgb_to_lab(test)
    src = channel_stats(lab)
    src_mean = np.array(src.mean)
    src_std = np.array(src.std)
    ref_mean = np.array(reference_stats.mean)
    ref_std = np.array(reference_stats.std)
    flat = src_std < FLAT_STD
    scale = np.where(flat, 1.0, ref_std / np.where(flat, 1.0, src_std))
    return (lab - src_mean) * scale + ref_mean


def reinhard_transfer(test: np.ndarray, reference_stats: ChannelStats) -> np.ndarray:
    """Recolor an RGB image so its l-alpha-beta statistics match the reference."""
    return lab_to_rgb(transfer_lab(test, reference_stats))
