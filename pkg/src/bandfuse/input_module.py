"""Per-band patch tokenization into a shared feature space.

Every band keeps its native resolution: an ``H^r x H^r`` image is cut
into ``n_p x n_p`` patches, each flattened row-major and pushed through
two band-specific linear projections sized so all bands spend roughly
the same parameter budget. Dropped bands contribute a learnable
per-band empty token instead; their pixels are never consumed.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, GeometryError, ShapeError
from .geometry import BandSpec, GeometryConfig
from .params import ParamStore


def patchify_band(image: np.ndarray, n_p: int) -> np.ndarray:
    """Split (..., H, H) into (..., n_p^2, (H/n_p)^2), row-major both ways."""
    side = image.shape[-1]
    if image.shape[-2] != side:
        raise GeometryError(f"band image must be square, got {image.shape[-2:]}")
    if side % n_p != 0:
        raise GeometryError(f"image side {side} not divisible by n_p={n_p}")
    ph = side // n_p
    lead = image.shape[:-2]
    x = image.reshape(lead + (n_p, ph, n_p, ph))
    order = tuple(range(len(lead))) + tuple(len(lead) + i for i in (0, 2, 1, 3))
    x = np.transpose(x, order)
    return x.reshape(lead + (n_p * n_p, ph * ph))


def hidden_dim_for_band(in_dim: int, d: int, budget: int) -> int:
    """Hidden width making in_dim*d_r + d_r*d land near the shared budget."""
    return max(1, int(math.floor(budget / (in_dim + d) + 0.5)))


def projector_param_count(in_dim: int, d_r: int, d: int) -> int:
    """Weights plus biases of the two projections (empty token excluded)."""
    return in_dim * d_r + d_r + d_r * d + d


class BandProjector:
    """The two projections and the empty token of a single band."""

    def __init__(self, store: ParamStore, prefix: str, in_dim: int, d: int,
                 budget: int, rng: np.random.Generator, dtype=np.float32):
        self.in_dim = in_dim
        self.d = d
        self.d_r = hidden_dim_for_band(in_dim, d, budget)
        scale1 = 1.0 / math.sqrt(in_dim)
        scale2 = 1.0 / math.sqrt(self.d_r)
        self.p1 = store.add(f"{prefix}.p1", (rng.standard_normal((in_dim, self.d_r)) * scale1).astype(dtype))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(self.d_r, dtype=dtype))
        self.p2 = store.add(f"{prefix}.p2", (rng.standard_normal((self.d_r, d)) * scale2).astype(dtype))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(d, dtype=dtype))
        self.empty_token = store.add(f"{prefix}.empty", (rng.standard_normal(d) * 0.02).astype(dtype))

    def param_count(self) -> int:
        return projector_param_count(self.in_dim, self.d_r, self.d)

    def project(self, patches: Tensor) -> Tensor:
        """(..., in_dim) -> (..., d) through both projections."""
        if patches.shape[-1] != self.in_dim:
            raise ShapeError(
                f"patch vectors of length {patches.shape[-1]} fed to projector expecting {self.in_dim}"
            )
        hidden = ad.add(ad.matmul(patches, self.p1), self.b1)
        return ad.add(ad.matmul(hidden, self.p2), self.b2)


class InputModule:
    """All band projectors of one model, in configuration band order."""

    def __init__(self, store: ParamStore, geometry: GeometryConfig, d: int,
                 budget: int, rng: np.random.Generator, dtype=np.float32):
        self.geometry = geometry
        self.d = d
        self.dtype = dtype
        self.bands: list[BandSpec] = geometry.bands()
        self.projectors: list[BandProjector] = []
        for band in self.bands:
            in_dim = band.patch_vector_len(geometry.aov_meters, geometry.n_p)
            self.projectors.append(
                BandProjector(store, f"input.band{band.band_id}", in_dim, d, budget, rng, dtype)
            )

    def assemble(self, band_images: list[np.ndarray | None],
                 drop_mask: np.ndarray) -> Tensor:
        """Build the (B, n_p^2, n_B, d) token tensor for a batch of views.

        ``band_images[i]`` holds the stacked (B, side_i, side_i) pixels of
        band i, or None when band i is dropped in every view of the batch.
        ``drop_mask`` is (B, n_B) boolean; dropped slots take the band's
        empty token and are bit-independent of any pixel content.
        """
        n_p = self.geometry.n_p
        drop_mask = np.asarray(drop_mask, dtype=bool)
        if drop_mask.ndim != 2 or drop_mask.shape[1] != len(self.bands):
            raise ShapeError(
                f"drop mask shape {drop_mask.shape} does not match (batch, {len(self.bands)})"
            )
        batch = drop_mask.shape[0]
        per_band: list[Tensor] = []
        for i, proj in enumerate(self.projectors):
            kept = ~drop_mask[:, i]
            empty = ad.reshape(proj.empty_token, (1, 1, 1, self.d))
            if not kept.any():
                zeros = Tensor(np.zeros((batch, n_p * n_p, 1, self.d), dtype=self.dtype))
                per_band.append(ad.add(zeros, empty))
                continue
            img = band_images[i]
            if img is None:
                missing = int(kept.sum())
                raise DataError(
                    f"band {self.bands[i].band_id} ({self.bands[i].modality_id}) has no pixel "
                    f"data but {missing} view(s) did not drop it"
                )
            if img.shape[0] != batch:
                raise ShapeError(f"band {i} batch {img.shape[0]} != mask batch {batch}")
            patches = patchify_band(np.ascontiguousarray(img, dtype=self.dtype), n_p)
            tokens = proj.project(Tensor(patches))           # (B, n_p^2, d)
            tokens = ad.reshape(tokens, (batch, n_p * n_p, 1, self.d))
            per_band.append(ad.where(kept[:, None, None, None], tokens, empty))
        return ad.concat(per_band, axis=2)                   # (B, n_p^2, n_B, d)
