"""Run configuration: profiles, the key = value config format, round-trip IO.

A run is configured by UTF-8 text with one ``[section]`` per subsystem
(parsed with :mod:`configparser`). ``[geometry] profile`` selects the
built-in desk or paper_like preset; any key can then be overridden.
Custom band layouts are given as ``[modality.X] resolutions = ...``
sections. The fully resolved text is echoed into run manifests and
checkpoints so every artifact is reproducible from its own metadata.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .errors import UsageError
from .geometry import GeometryConfig, ModalitySpec

DESK = "desk"
PAPER_LIKE = "paper_like"


@dataclass
class ModelConfig:
    d: int = 16                    # shared token feature dim
    heads: int = 2
    query_dim: int = 64            # learned-query width of fusion modules
    layers_per_block: int = 1
    blocks: int = 3
    merge_factor: int = 2
    mlp_ratio: float = 2.0
    embed_dim: int = 32            # projection-head output width
    band_param_budget: int = 2000  # per-band projection parameter target
    fusion_bias: bool = False


@dataclass
class DataConfig:
    latent_bumps: int = 24
    latent_smoothness: float = 0.12   # bump sigma as a fraction of the AOV
    sensor_noise: float = 0.02
    occlusion_fraction: float = 0.0   # cloud coverage quantile on optical modalities
    occlusion_modalities: str = ""    # comma list; empty = none
    occlusion_level: float = 1.0
    labels: bool = False
    label_side: int = 32
    label_quantile: float = 0.85


@dataclass
class SwavConfig:
    prototypes: int = 32
    temperature: float = 0.1
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iterations: int = 3
    queue_batches: int = 4
    global_views: int = 2
    local_views: int = 6
    freeze_prototype_steps: int = 0   # hold prototypes fixed early to avoid collapse


@dataclass
class AugmentConfig:
    global_band_drop: float = 0.1
    global_noise_add: float = 0.01
    global_noise_mul: float = 0.01
    local_modality_drop: float = 0.5
    local_band_drop: float = 0.3
    local_noise_add: float = 0.05
    local_noise_mul: float = 0.05


@dataclass
class TrainConfig:
    batch: int = 16
    epochs: int = 30
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    lr: float = 0.05
    lr_min: float = 0.0005
    schedule: str = "cosine"


@dataclass
class FpnConfig:
    output_side: int = 32
    lateral_channels: int = 64
    stage1_epochs: int = 6
    stage2_epochs: int = 9
    lr: float = 1e-4
    lr_min: float = 1e-7
    batch: int = 8
    threshold: float = 0.5


@dataclass
class RunConfig:
    profile: str = DESK
    aov_meters: float = 96.0
    n_p: int = 8
    modalities: list[ModalitySpec] = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    swav: SwavConfig = field(default_factory=SwavConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fpn: FpnConfig = field(default_factory=FpnConfig)

    def geometry(self) -> GeometryConfig:
        return GeometryConfig(self.aov_meters, self.n_p, list(self.modalities))


def _desk_modalities() -> list[ModalitySpec]:
    return [
        ModalitySpec("A", (3.0, 3.0)),
        ModalitySpec("B", (6.0, 6.0, 6.0, 12.0)),
        ModalitySpec("C", (12.0,)),
    ]


def _paper_like_modalities() -> list[ModalitySpec]:
    return [
        ModalitySpec("spot", (1.5, 1.5, 1.5, 1.5)),
        ModalitySpec("s1", (10.0, 10.0)),
        ModalitySpec("s2", (10.0,) * 4 + (20.0,) * 6),
        ModalitySpec("landsat", (30.0,) * 8),
    ]


def default_config(profile: str = DESK) -> RunConfig:
    """Built-in presets; paper_like mirrors the published training setup."""
    if profile == DESK:
        return RunConfig(
            profile=DESK, aov_meters=96.0, n_p=8, modalities=_desk_modalities(),
            # smaller view fan-out, sharper codes and an early prototype
            # freeze keep the CPU-scale run out of the uniform-assignment trap
            swav=SwavConfig(local_views=4, sinkhorn_epsilon=0.03,
                            freeze_prototype_steps=250),
        )
    if profile == PAPER_LIKE:
        return RunConfig(
            profile=PAPER_LIKE,
            aov_meters=960.0,
            n_p=16,
            modalities=_paper_like_modalities(),
            model=ModelConfig(
                d=128, heads=8, query_dim=4096, layers_per_block=8, blocks=4,
                merge_factor=2, mlp_ratio=2.0, embed_dim=128,
                band_param_budget=158_000,
            ),
            data=DataConfig(label_side=96),
            swav=SwavConfig(prototypes=512, queue_batches=4, local_views=6),
            train=TrainConfig(batch=256, epochs=30),
            fpn=FpnConfig(output_side=96, stage1_epochs=50, stage2_epochs=100),
        )
    raise UsageError(f"unknown profile {profile!r} (expected desk or paper_like)")


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "swav": SwavConfig,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "fpn": FpnConfig,
}


def _coerce(raw: str, target_type: type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections/keys are usage errors."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"bad config syntax: {exc}") from exc

    profile = DESK
    if cp.has_option("geometry", "profile"):
        profile = cp.get("geometry", "profile").strip()
    cfg = default_config(profile)

    if cp.has_section("geometry"):
        for key, raw in cp.items("geometry"):
            if key == "profile":
                continue
            elif key == "aov_meters":
                cfg.aov_meters = float(raw)
            elif key == "n_p":
                cfg.n_p = int(raw)
            else:
                raise UsageError(f"unknown key {key!r} in [geometry]")

    custom_modalities: list[ModalitySpec] = []
    for section in cp.sections():
        if section.startswith("modality."):
            name = section.split(".", 1)[1]
            raw = cp.get(section, "resolutions")
            res = tuple(float(tok) for tok in raw.replace(",", " ").split())
            if not res:
                raise UsageError(f"[{section}] lists no resolutions")
            custom_modalities.append(ModalitySpec(name, res))
        elif section != "geometry" and section not in _SECTIONS:
            raise UsageError(f"unknown config section [{section}]")
    if custom_modalities:
        cfg.modalities = custom_modalities

    for section, cls in _SECTIONS.items():
        if not cp.has_section(section):
            continue
        target = getattr(cfg, section)
        valid = {f.name: f.type for f in fields(cls)}
        types = {f.name: type(getattr(target, f.name)) for f in fields(cls)}
        for key, raw in cp.items(section):
            if key not in valid:
                raise UsageError(f"unknown key {key!r} in [{section}]")
            setattr(target, key, _coerce(raw, types[key]))

    cfg.geometry()  # validate divisibility now, not at first use
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Serialize the fully resolved configuration (inverse of parse_config)."""
    cp = configparser.ConfigParser()
    cp["geometry"] = {
        "profile": cfg.profile,
        "aov_meters": repr(cfg.aov_meters),
        "n_p": str(cfg.n_p),
    }
    for mod in cfg.modalities:
        cp[f"modality.{mod.modality_id}"] = {
            "resolutions": ", ".join(repr(r) for r in mod.resolutions_m)
        }
    def fmt(value) -> str:
        if isinstance(value, bool):
            return str(value).lower()
        if isinstance(value, float):
            return repr(value)
        return str(value)

    for section in _SECTIONS:
        target = getattr(cfg, section)
        cp[section] = {f.name: fmt(getattr(target, f.name)) for f in fields(target)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
