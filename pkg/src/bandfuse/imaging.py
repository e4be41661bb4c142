"""Dependency-free binary PPM/PGM writers, palettes, and CSV output.

Color convention for band identity follows the training visuals: one
hue per modality (evenly spaced), shade per band within the modality.
Scalar maps use a black-red-yellow heat ramp with the scale recorded in
a sidecar. CSV files use ',' separators, '.' decimals and a header row.
"""

from __future__ import annotations

import colorsys
import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import GeometryConfig


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Binary PGM (P5) from a uint8 (H, W) array."""
    arr = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary PPM (P6) from a uint8 (H, W, 3) array."""
    arr = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def scale_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def band_palette(geometry: GeometryConfig) -> np.ndarray:
    """(n_bands, 3) uint8: modality hue, band shade within the modality."""
    k = len(geometry.modalities)
    colors = []
    for mi, mod in enumerate(geometry.modalities):
        hue = mi / k
        n = mod.n_bands
        for bi in range(n):
            value = 0.45 + 0.5 * (bi + 1) / n
            r, g, b = colorsys.hsv_to_rgb(hue, 0.9, value)
            colors.append((round(255 * r), round(255 * g), round(255 * b)))
    return np.array(colors, dtype=np.uint8)


def to_gray(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """Min-max scale into uint8; degenerate range maps to mid-gray."""
    if vmax <= vmin:
        return np.full(values.shape, 128, dtype=np.uint8)
    norm = (values - vmin) / (vmax - vmin)
    return np.clip(np.round(255 * norm), 0, 255).astype(np.uint8)


def heatmap(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """Black -> red -> yellow ramp over [vmin, vmax], uint8 (H, W, 3)."""
    if vmax <= vmin:
        t = np.full(values.shape, 0.5)
    else:
        t = np.clip((values - vmin) / (vmax - vmin), 0.0, 1.0)
    r = np.clip(2.0 * t, 0.0, 1.0)
    g = np.clip(2.0 * t - 1.0, 0.0, 1.0)
    b = np.zeros_like(t)
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.round(255 * rgb), 0, 255).astype(np.uint8)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(cell) for cell in row])


def _fmt(cell) -> str:
    if isinstance(cell, (np.floating, float)):
        return repr(float(cell))
    if isinstance(cell, (np.integer, int)):
        return str(int(cell))
    return str(cell)


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[0], rows[1:]
