"""Global/local view generation by band dropping plus pixel noise.

Global views are weak: bands drop independently with a small
probability and a whole modality is never lost. Local views are heavy:
entire modalities drop wholesale, then surviving bands drop
individually. Every view keeps at least one band; when the draw
probabilities make that impossible, one rng-chosen band is forced to
survive after repeated re-draws.

View randomness is derived from (seed, epoch, sample_id, view_id), so
views are reproducible independent of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import AugmentConfig
from .errors import UsageError
from .geometry import GeometryConfig

GLOBAL = "global"
LOCAL = "local"

_MAX_REDRAWS = 64


@dataclass
class ViewBatchInputs:
    """Stacked per-view model inputs, view-major (view v of sample b sits
    at row v * batch + b, so the n_g global slots are contiguous)."""

    band_images: list[np.ndarray | None]   # per band: (V, side, side) or None
    drop_mask: np.ndarray                  # (V, n_bands) bool, True = dropped
    kinds: list[str]                       # per view slot (length n_views)
    batch: int
    n_global: int
    n_local: int

    @property
    def n_views(self) -> int:
        return self.n_global + self.n_local


def view_rng(seed: int, epoch: int, sample_id: int, view_id: int) -> np.random.Generator:
    return np.random.default_rng((int(seed), int(epoch), int(sample_id), int(view_id)))


def _modality_slices(geometry: GeometryConfig) -> list[np.ndarray]:
    bands = geometry.bands()
    return [
        np.array([b.band_id for b in bands if b.modality_id == m.modality_id])
        for m in geometry.modalities
    ]


def band_drop_mask(policy: AugmentConfig, geometry: GeometryConfig, view_kind: str,
                   rng: np.random.Generator) -> np.ndarray:
    """Boolean (n_bands,) mask, True = dropped."""
    n_b = geometry.n_bands
    slices = _modality_slices(geometry)
    for attempt in range(_MAX_REDRAWS + 1):
        if view_kind == GLOBAL:
            mask = rng.random(n_b) < policy.global_band_drop
            ok = all(not mask[idx].all() for idx in slices)
        elif view_kind == LOCAL:
            mask = np.zeros(n_b, dtype=bool)
            for idx in slices:
                if rng.random() < policy.local_modality_drop:
                    mask[idx] = True
                else:
                    mask[idx] = rng.random(len(idx)) < policy.local_band_drop
            ok = not mask.all()
        else:
            raise UsageError(f"unknown view kind {view_kind!r}")
        if ok:
            return mask
    # degenerate probabilities: force survivors deterministically from rng
    if view_kind == GLOBAL:
        for idx in slices:
            if mask[idx].all():
                mask[idx[rng.integers(len(idx))]] = False
    else:
        keep = int(rng.integers(n_b))
        mask[keep] = False
    return mask


def apply_noise(band: np.ndarray, sigma_add: float, sigma_mul: float,
                rng: np.random.Generator) -> np.ndarray:
    """x * (1 + eta_mul) + eta_add with i.i.d. Normal(0, sigma^2) fields."""
    out = band
    if sigma_mul > 0:
        out = out * (1.0 + sigma_mul * rng.standard_normal(band.shape))
    if sigma_add > 0:
        out = out + sigma_add * rng.standard_normal(band.shape)
    return out.astype(band.dtype, copy=False) if out is not band else band.copy()


def make_views(bands: list[np.ndarray], policy: AugmentConfig, geometry: GeometryConfig,
               n_global: int, n_local: int, seed: int, sample_id: int,
               epoch: int = 0) -> tuple[np.ndarray, list[list[np.ndarray | None]]]:
    """Views of one sample: (masks (n_views, n_B), per-view band arrays).

    Dropped bands are returned as None; their pixels are never touched.
    """
    if n_local <= n_global:
        raise UsageError(f"need n_local > n_global, got {n_local} <= {n_global}")
    n_views = n_global + n_local
    masks = np.zeros((n_views, geometry.n_bands), dtype=bool)
    views: list[list[np.ndarray | None]] = []
    for v in range(n_views):
        rng = view_rng(seed, epoch, sample_id, v)
        kind = GLOBAL if v < n_global else LOCAL
        sig_add = policy.global_noise_add if kind == GLOBAL else policy.local_noise_add
        sig_mul = policy.global_noise_mul if kind == GLOBAL else policy.local_noise_mul
        mask = band_drop_mask(policy, geometry, kind, rng)
        masks[v] = mask
        arrays: list[np.ndarray | None] = []
        for i, band in enumerate(bands):
            if mask[i]:
                arrays.append(None)
            else:
                arrays.append(apply_noise(band, sig_add, sig_mul, rng))
        views.append(arrays)
    return masks, views


def make_view_batch(samples: list[list[np.ndarray]], sample_ids: list[int],
                    policy: AugmentConfig, geometry: GeometryConfig,
                    n_global: int, n_local: int, seed: int,
                    epoch: int = 0) -> ViewBatchInputs:
    """Stack augmented views of a batch of samples for one encoder pass."""
    batch = len(samples)
    n_views = n_global + n_local
    n_b = geometry.n_bands
    sides = geometry.band_sides()
    total = n_views * batch
    drop = np.zeros((total, n_b), dtype=bool)
    imgs: list[np.ndarray | None] = [
        np.zeros((total, side, side), dtype=np.float32) for side in sides
    ]
    for b, (bands, sid) in enumerate(zip(samples, sample_ids)):
        masks, views = make_views(bands, policy, geometry, n_global, n_local, seed, sid, epoch)
        for v in range(n_views):
            row = v * batch + b
            drop[row] = masks[v]
            for i, arr in enumerate(views[v]):
                if arr is not None:
                    imgs[i][row] = arr
    for i in range(n_b):
        if drop[:, i].all():
            imgs[i] = None
    kinds = [GLOBAL] * n_global + [LOCAL] * n_local
    return ViewBatchInputs(imgs, drop, kinds, batch, n_global, n_local)
