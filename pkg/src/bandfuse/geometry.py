"""Band/patch geometry: square area of view, native resolutions, patch grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import GeometryError


@dataclass(frozen=True)
class BandSpec:
    """One 2D channel at its native resolution."""

    modality_id: str
    band_id: int            # global index, configuration order
    index_in_modality: int
    resolution_m: float

    def pixel_side(self, aov_meters: float) -> int:
        side = aov_meters / self.resolution_m
        if abs(side - round(side)) > 1e-9:
            raise GeometryError(
                f"band {self.band_id} ({self.modality_id}): aov {aov_meters} m is not an "
                f"integer multiple of resolution {self.resolution_m} m"
            )
        return int(round(side))

    def patch_vector_len(self, aov_meters: float, n_p: int) -> int:
        side = self.pixel_side(aov_meters)
        if side % n_p != 0:
            raise GeometryError(
                f"band {self.band_id} ({self.modality_id}): pixel side {side} not divisible "
                f"by n_p={n_p}"
            )
        return (side // n_p) ** 2


@dataclass(frozen=True)
class ModalitySpec:
    """One sensor source contributing one or more bands."""

    modality_id: str
    resolutions_m: tuple[float, ...]

    @property
    def n_bands(self) -> int:
        return len(self.resolutions_m)


@dataclass
class GeometryConfig:
    """Square AOV shared by all modalities, split into n_p x n_p patches."""

    aov_meters: float
    n_p: int
    modalities: list[ModalitySpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        for band in self.bands():
            band.patch_vector_len(self.aov_meters, self.n_p)  # raises on violation

    def bands(self) -> list[BandSpec]:
        out: list[BandSpec] = []
        i = 0
        for mod in self.modalities:
            for j, r in enumerate(mod.resolutions_m):
                out.append(BandSpec(mod.modality_id, i, j, r))
                i += 1
        return out

    @property
    def n_bands(self) -> int:
        return sum(m.n_bands for m in self.modalities)

    def band_sides(self) -> list[int]:
        return [b.pixel_side(self.aov_meters) for b in self.bands()]

    def latent_side(self) -> int:
        """Common grid every band side divides (LCM), for block-mean rendering."""
        side = 1
        for s in self.band_sides():
            side = math.lcm(side, s)
        return side

    def modality_index(self, modality_id: str) -> int:
        for i, m in enumerate(self.modalities):
            if m.modality_id == modality_id:
                return i
        raise GeometryError(f"unknown modality {modality_id!r}")

    def bands_of_modality(self, modality_id: str) -> list[BandSpec]:
        return [b for b in self.bands() if b.modality_id == modality_id]
