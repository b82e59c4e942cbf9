"""PSNR, SSIM and ENL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 8


def _pair(x, xhat):
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    return x, xhat


def psnr(x, xhat) -> float:
    """Peak signal-to-noise ratio in dB for images with peak 1; ``inf`` if equal."""
    x, xhat = _pair(x, xhat)
    mse = np.mean((x - xhat) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def ssim(x, xhat, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean SSIM over all fully contained ``window x window`` uniform windows.

    Local statistics use population (1/n) moments.
    """
    x, xhat = _pair(x, xhat)
    if x.ndim != 2 or min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(xhat, (window, window))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = (wx * wx).mean(axis=(-2, -1)) - mx * mx
    vy = (wy * wy).mean(axis=(-2, -1)) - my * my
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class Region:
    top: int
    left: int
    height: int
    width: int


def read_regions(path) -> list[Region]:
    """One ``top left height width`` rectangle per non-blank line; ``#`` comments."""
    regions = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 integers")
        regions.append(Region(*(int(p) for p in parts)))
    return regions


def enl(image, regions) -> tuple[list[float], float]:
    """Equivalent number of looks, ``mean^2 / var`` (ddof=1), per region and averaged."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    values = []
    for r in regions:
        r = r if isinstance(r, Region) else Region(*r)
        if r.top < 0 or r.left < 0 or r.top + r.height > h or r.left + r.width > w:
            raise ValueError(f"region {r} outside {h}x{w} image")
        patch = image[r.top : r.top + r.height, r.left : r.left + r.width]
        if patch.size < 2:
            raise ValueError(f"region {r} has fewer than 2 pixels")
        var = patch.var(ddof=1)
        values.append(math.inf if var == 0 else float(patch.mean() ** 2 / var))
    if not values:
        raise ValueError("no regions")
    return values, float(np.mean(values))
