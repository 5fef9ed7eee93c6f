"""Raster representation, resampling, normalization and pixel distances.

A raster is a float64 numpy array of shape ``(H, W, 3)`` holding normalized
reflectance in ``[0, 1]``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


class RasterError(ValueError):
    pass


def check_raster(img) -> np.ndarray:
    """Validate ``img`` and return it as a float64 ``(H, W, 3)`` array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise RasterError(f"raster must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RasterError("raster contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise RasterError("raster values must lie in [0, 1]")
    return arr


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RasterError(f"dimension mismatch {a.shape} vs {b.shape}; resample first")
    return float(np.mean((a - b) ** 2))


def resample(img, out_h: int, out_w: int, mode: str = "box") -> np.ndarray:
    """Resize to ``(out_h, out_w)``.

    ``box`` averages integral blocks (downsampling only); ``nearest`` picks the
    source pixel whose center is nearest to each output pixel center.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if out_h < 1 or out_w < 1:
        raise RasterError("output size must be >= 1")
    if (out_h, out_w) == (h, w):
        return img.copy()
    if mode == "box":
        if h % out_h or w % out_w:
            raise RasterError(f"box resample needs integral ratios, got {h}x{w} -> {out_h}x{out_w}")
        fy, fx = h // out_h, w // out_w
        return img.reshape(out_h, fy, out_w, fx, -1).mean(axis=(1, 3))
    if mode == "nearest":
        rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
        cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
        return img[rows][:, cols]
    raise RasterError(f"unknown resample mode {mode!r}")


def _constant_channels(std, mean):
    return std <= 1e-12 * np.maximum(1.0, np.abs(mean))


def standardize(img) -> np.ndarray:
    """Per-channel zero mean, unit population std; constant channels map to 0."""
    x = np.asarray(img, dtype=np.float64)
    mean = x.mean(axis=(0, 1))
    std = x.std(axis=(0, 1))
    flat = _constant_channels(std, mean)
    out = (x - mean) / np.where(flat, 1.0, std)
    out[..., flat] = 0.0
    return out


def align(drone, sat) -> tuple[np.ndarray, np.ndarray]:
    """Box-downsample whichever raster is larger to the other's size."""
    drone = np.asarray(drone, dtype=np.float64)
    sat = np.asarray(sat, dtype=np.float64)
    if drone.shape[0] >= sat.shape[0]:
        return resample(drone, sat.shape[0], sat.shape[1], "box"), sat
    return drone, resample(sat, drone.shape[0], drone.shape[1], "box")


def quantize(img) -> np.ndarray:
    """Round-half-up to 8 bits."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def write_png(img, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # Fixed encoder settings keep the bytes stable across runs.
    Image.fromarray(quantize(check_raster(img)), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return dequantize(np.array(im.convert("RGB")))
