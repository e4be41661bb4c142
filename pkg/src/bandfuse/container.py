"""Bit-exact on-disk sample container and the dataset manifest.

Container layout, little-endian:
    magic "PVFS" | u16 version=1 | u16 n_records | u64 sample_id
    per record: u16 band_id | u8 kind (0=band, 1=label) | u32 height |
                u32 width | height*width float32 values
Label records carry band_id 0xFFFF. Round-trips are byte-identical.

The manifest is configparser-style UTF-8 text recording the profile,
the band table (modality, resolution), per-band mean/std over the
dataset, the generation seed and the sample count.
"""

from __future__ import annotations

import configparser
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, default_config
from .errors import DataError, DataFormatError
from .geometry import GeometryConfig, ModalitySpec
from .synth import SampleRecord, gen_sample

MAGIC = b"PVFS"
VERSION = 1
KIND_BAND = 0
KIND_LABEL = 1
LABEL_BAND_ID = 0xFFFF

MANIFEST_NAME = "manifest.txt"


def write_sample(record: SampleRecord) -> bytes:
    n_records = len(record.bands) + (1 if record.label is not None else 0)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HHQ", VERSION, n_records, record.sample_id))
    for band_id, band in enumerate(record.bands):
        h, w = band.shape
        out.write(struct.pack("<HBII", band_id, KIND_BAND, h, w))
        out.write(np.ascontiguousarray(band, dtype="<f4").tobytes())
    if record.label is not None:
        h, w = record.label.shape
        out.write(struct.pack("<HBII", LABEL_BAND_ID, KIND_LABEL, h, w))
        out.write(np.ascontiguousarray(record.label, dtype="<f4").tobytes())
    return out.getvalue()


def read_sample(blob: bytes) -> SampleRecord:
    if len(blob) < 16:
        raise DataFormatError(f"sample container truncated: {len(blob)} bytes < 16-byte header")
    if blob[:4] != MAGIC:
        raise DataFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, n_records, sample_id = struct.unpack_from("<HHQ", blob, 4)
    if version != VERSION:
        raise DataFormatError(f"unsupported container version {version}")
    off = 16
    bands: list[tuple[int, np.ndarray]] = []
    label = None
    for _ in range(n_records):
        if off + 11 > len(blob):
            raise DataFormatError("sample container truncated inside a record header")
        band_id, kind, h, w = struct.unpack_from("<HBII", blob, off)
        off += 11
        nbytes = 4 * h * w
        if off + nbytes > len(blob):
            raise DataFormatError(
                f"sample container truncated: record needs {nbytes} bytes, "
                f"{len(blob) - off} remain"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=h * w, offset=off).reshape(h, w).copy()
        off += nbytes
        if kind == KIND_BAND:
            bands.append((band_id, arr))
        elif kind == KIND_LABEL:
            label = arr
        else:
            raise DataFormatError(f"unknown record kind {kind}")
    if off != len(blob):
        raise DataFormatError(f"{len(blob) - off} trailing bytes after last record")
    bands.sort(key=lambda t: t[0])
    return SampleRecord(sample_id, [b for _, b in bands], label)


def sample_file_size(band_sides: list[int], label_side: int | None) -> int:
    """Exact container byte size for the given record geometry."""
    size = 16
    for side in band_sides:
        size += 11 + 4 * side * side
    if label_side is not None:
        size += 11 + 4 * label_side * label_side
    return size


@dataclass
class DatasetManifest:
    profile: str
    aov_meters: float
    n_p: int
    modalities: list[ModalitySpec]
    seed: int
    count: int
    labels: bool
    label_side: int
    band_mean: list[float]
    band_std: list[float]

    def geometry(self) -> GeometryConfig:
        return GeometryConfig(self.aov_meters, self.n_p, list(self.modalities))


def render_manifest(man: DatasetManifest) -> str:
    cp = configparser.ConfigParser()
    cp["dataset"] = {
        "profile": man.profile,
        "aov_meters": repr(man.aov_meters),
        "n_p": str(man.n_p),
        "seed": str(man.seed),
        "count": str(man.count),
        "labels": str(man.labels).lower(),
        "label_side": str(man.label_side),
    }
    band_id = 0
    for mod in man.modalities:
        for r in mod.resolutions_m:
            cp[f"band.{band_id}"] = {
                "modality": mod.modality_id,
                "resolution_m": repr(r),
                "mean": repr(man.band_mean[band_id]),
                "std": repr(man.band_std[band_id]),
            }
            band_id += 1
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_manifest(text: str) -> DatasetManifest:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise DataFormatError(f"bad manifest syntax: {exc}") from exc
    if not cp.has_section("dataset"):
        raise DataFormatError("manifest lacks a [dataset] section")
    ds = cp["dataset"]
    band_sections = sorted(
        (int(s.split(".", 1)[1]), s) for s in cp.sections() if s.startswith("band.")
    )
    modalities: list[ModalitySpec] = []
    mean, std = [], []
    current: tuple[str, list[float]] | None = None
    for expected, (idx, section) in enumerate(band_sections):
        if idx != expected:
            raise DataFormatError(f"manifest band sections not contiguous at {idx}")
        sec = cp[section]
        mod = sec["modality"]
        if current is None or current[0] != mod:
            if current is not None:
                modalities.append(ModalitySpec(current[0], tuple(current[1])))
            current = (mod, [])
        current[1].append(float(sec["resolution_m"]))
        mean.append(float(sec["mean"]))
        std.append(float(sec["std"]))
    if current is not None:
        modalities.append(ModalitySpec(current[0], tuple(current[1])))
    return DatasetManifest(
        profile=ds["profile"],
        aov_meters=float(ds["aov_meters"]),
        n_p=int(ds["n_p"]),
        modalities=modalities,
        seed=int(ds["seed"]),
        count=int(ds["count"]),
        labels=ds.get("labels", "false") == "true",
        label_side=int(ds.get("label_side", "0")),
        band_mean=mean,
        band_std=std,
    )


def sample_filename(sample_id: int) -> str:
    return f"sample_{sample_id:06d}.pvfs"


def gen_dataset(cfg: RunConfig, n_samples: int, seed: int, out_dir: str | Path) -> Path:
    """Write n samples plus a manifest; byte-identical for identical seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geo = cfg.geometry()
    n_b = geo.n_bands
    acc = np.zeros(n_b, dtype=np.float64)
    acc_sq = np.zeros(n_b, dtype=np.float64)
    counts = np.zeros(n_b, dtype=np.float64)
    for sid in range(n_samples):
        record = gen_sample(cfg, seed, sid)
        for i, band in enumerate(record.bands):
            b64 = band.astype(np.float64)
            acc[i] += b64.sum()
            acc_sq[i] += (b64 * b64).sum()
            counts[i] += b64.size
        (out / sample_filename(sid)).write_bytes(write_sample(record))
    if n_samples > 0:
        mean = acc / counts
        var = np.maximum(acc_sq / counts - mean**2, 0.0)
        std = np.sqrt(var)
    else:
        mean = np.zeros(n_b)
        std = np.ones(n_b)
    man = DatasetManifest(
        profile=cfg.profile,
        aov_meters=geo.aov_meters,
        n_p=geo.n_p,
        modalities=list(cfg.modalities),
        seed=seed,
        count=n_samples,
        labels=cfg.data.labels,
        label_side=cfg.data.label_side if cfg.data.labels else 0,
        band_mean=[float(x) for x in mean],
        band_std=[float(x) for x in std],
    )
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(render_manifest(man), encoding="utf-8")
    return manifest_path


def load_manifest(dataset_dir: str | Path) -> DatasetManifest:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataFormatError(f"no {MANIFEST_NAME} in {dataset_dir}")
    return parse_manifest(path.read_text(encoding="utf-8"))


def load_sample(dataset_dir: str | Path, sample_id: int,
                manifest: DatasetManifest | None = None) -> SampleRecord:
    path = Path(dataset_dir) / sample_filename(sample_id)
    if not path.exists():
        raise DataFormatError(f"missing sample file {path}")
    record = read_sample(path.read_bytes())
    if manifest is not None:
        expected = sum(m.n_bands for m in manifest.modalities)
        if len(record.bands) != expected:
            raise DataError(
                f"sample {sample_id} holds {len(record.bands)} bands, manifest lists {expected}"
            )
    return record


def normalize_bands(record: SampleRecord, manifest: DatasetManifest) -> list[np.ndarray]:
    """Per-band (x - mean) / std in float32, std guarded against zero."""
    out = []
    for i, band in enumerate(record.bands):
        std = manifest.band_std[i]
        if std <= 1e-12:
            std = 1.0
        out.append(((band - manifest.band_mean[i]) / std).astype(np.float32))
    return out


def load_normalized_dataset(dataset_dir: str | Path) -> tuple[DatasetManifest, list[list[np.ndarray]], list[np.ndarray | None]]:
    """Load every sample into memory, normalized; labels pass through raw."""
    manifest = load_manifest(dataset_dir)
    samples, labels = [], []
    for sid in range(manifest.count):
        record = load_sample(dataset_dir, sid, manifest)
        samples.append(normalize_bands(record, manifest))
        labels.append(record.label)
    return manifest, samples, labels
