"""Seeded synthetic co-registered multi-modal samples.

Every band of a sample is a different monotone view of one shared latent
field (a sum of Gaussian bumps on the common high-resolution grid),
block-mean downsampled to the band's native size, plus sensor noise.
Optical-like modalities can receive cloud occlusions that the remaining
modalities see through; labels threshold the smoothed latent, giving
small positive blobs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import GeometryError
from .geometry import GeometryConfig

# integer tags keeping the derived rng streams disjoint
_TAG_LATENT = 0x1A7E
_TAG_BAND = 0xBA4D
_TAG_NOISE = 0x401E
_TAG_CLOUD = 0xC10D


@dataclass
class SampleRecord:
    """One AOV: per-band native-resolution arrays plus an optional label map."""

    sample_id: int
    bands: list[np.ndarray]
    label: np.ndarray | None = None
    seed: int | None = None


def gen_latent(seed_parts: tuple[int, ...], grid_size: int, n_bumps: int,
               smoothness: float) -> np.ndarray:
    """Sum of seeded Gaussian bumps, min-max normalized into [0, 1]."""
    rng = np.random.default_rng(seed_parts)
    field = np.zeros((grid_size, grid_size), dtype=np.float64)
    coords = (np.arange(grid_size) + 0.5) / grid_size
    for _ in range(n_bumps):
        cx, cy = rng.random(), rng.random()
        sigma = smoothness * (0.5 + rng.random())
        amp = 0.3 + 0.7 * rng.random()
        gx = np.exp(-0.5 * ((coords - cx) / sigma) ** 2)
        gy = np.exp(-0.5 * ((coords - cy) / sigma) ** 2)
        field += amp * np.outer(gy, gx)
    lo, hi = field.min(), field.max()
    if hi - lo <= 0:
        return np.zeros((grid_size, grid_size), dtype=np.float64)
    return (field - lo) / (hi - lo)


def block_mean(field: np.ndarray, out_side: int) -> np.ndarray:
    side = field.shape[0]
    if side % out_side != 0:
        raise GeometryError(f"cannot block-mean side {side} down to {out_side}")
    k = side // out_side
    return field.reshape(out_side, k, out_side, k).mean(axis=(1, 3))


@dataclass(frozen=True)
class BandResponse:
    """Monotone per-band sensor response: offset + gain * latent^gamma."""

    gain: float
    offset: float
    gamma: float

    def apply(self, latent: np.ndarray) -> np.ndarray:
        return self.offset + self.gain * np.power(latent, self.gamma)


def band_response(dataset_seed: int, band_id: int) -> BandResponse:
    rng = np.random.default_rng((int(dataset_seed), _TAG_BAND, int(band_id)))
    return BandResponse(
        gain=0.8 + 0.4 * rng.random(),
        offset=-0.1 + 0.2 * rng.random(),
        gamma=0.6 + 1.0 * rng.random(),
    )


def render_band(latent: np.ndarray, response: BandResponse, native_side: int,
                noise_sigma: float, rng: np.random.Generator,
                occlusion_mask: np.ndarray | None = None,
                occlusion_level: float = 1.0) -> np.ndarray:
    """Nonlinearity, block-mean to native size, sensor noise, occlusion."""
    img = block_mean(response.apply(latent), native_side)
    if noise_sigma > 0:
        img = img + noise_sigma * rng.standard_normal(img.shape)
    if occlusion_mask is not None:
        native_mask = block_mean(occlusion_mask.astype(np.float64), native_side) >= 0.5
        img = np.where(native_mask, occlusion_level, img)
    return img.astype(np.float32)


def cloud_mask(dataset_seed: int, sample_id: int, grid_size: int,
               coverage: float, smoothness: float) -> np.ndarray:
    """Boolean cloud field covering ~``coverage`` of the AOV."""
    field = gen_latent((int(dataset_seed), _TAG_CLOUD, int(sample_id)), grid_size,
                       n_bumps=6, smoothness=smoothness)
    if coverage <= 0:
        return np.zeros((grid_size, grid_size), dtype=bool)
    thresh = np.quantile(field, 1.0 - coverage)
    return field > thresh


def gen_sample(cfg: RunConfig, dataset_seed: int, sample_id: int) -> SampleRecord:
    """Deterministic sample: same (seed, id) always yields identical bytes."""
    geo = cfg.geometry()
    data = cfg.data
    latent_side = geo.latent_side()
    latent = gen_latent((int(dataset_seed), _TAG_LATENT, int(sample_id)), latent_side,
                        data.latent_bumps, data.latent_smoothness)
    occluded = {m.strip() for m in data.occlusion_modalities.split(",") if m.strip()}
    clouds = None
    if data.occlusion_fraction > 0 and occluded:
        clouds = cloud_mask(dataset_seed, sample_id, latent_side,
                            data.occlusion_fraction, data.latent_smoothness)
    bands: list[np.ndarray] = []
    for band in geo.bands():
        rng = np.random.default_rng(
            (int(dataset_seed), _TAG_NOISE, int(sample_id), band.band_id)
        )
        mask = clouds if (clouds is not None and band.modality_id in occluded) else None
        bands.append(
            render_band(latent, band_response(dataset_seed, band.band_id),
                        band.pixel_side(geo.aov_meters), data.sensor_noise, rng,
                        occlusion_mask=mask, occlusion_level=data.occlusion_level)
        )
    label = None
    if data.labels:
        smoothed = block_mean(latent, data.label_side)
        label = (smoothed > np.quantile(smoothed, data.label_quantile)).astype(np.float32)
    return SampleRecord(sample_id, bands, label, dataset_seed)
