"""Full encoder: band tokenization, band fusion, pyramid, projection head."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .errors import UsageError
from .fusion import AttentionFusion, fusion_param_count
from .input_module import InputModule, hidden_dim_for_band, projector_param_count
from .params import ParamStore
from .pyramid import FeaturePyramid, PyramidEncoder, pyramid_param_count


class ProjectionHead:
    """Mean-pool the deepest grid, 2-layer MLP, then L2 normalization."""

    def __init__(self, store: ParamStore, prefix: str, in_dim: int, embed_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.in_dim = in_dim
        self.embed_dim = embed_dim
        hidden = 2 * embed_dim
        s1 = 1.0 / math.sqrt(in_dim)
        s2 = 1.0 / math.sqrt(hidden)
        self.w1 = store.add(f"{prefix}.w1", (rng.standard_normal((in_dim, hidden)) * s1).astype(dtype))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden, dtype=dtype))
        self.w2 = store.add(f"{prefix}.w2", (rng.standard_normal((hidden, embed_dim)) * s2).astype(dtype))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(embed_dim, dtype=dtype))

    def forward(self, deepest: Tensor) -> Tensor:
        pooled = ad.tmean(deepest, axis=1)                     # (B, in_dim)
        hid = ad.gelu(ad.add(ad.matmul(pooled, self.w1), self.b1))
        out = ad.add(ad.matmul(hid, self.w2), self.b2)
        return ad.l2_normalize(out, axis=-1)

    @staticmethod
    def param_count(in_dim: int, embed_dim: int) -> int:
        hidden = 2 * embed_dim
        return in_dim * hidden + hidden + hidden * embed_dim + embed_dim


class Model:
    """Everything trainable for pretraining, in one ParamStore."""

    def __init__(self, cfg: RunConfig, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.geometry = cfg.geometry()
        self.dtype = dtype
        self.store = ParamStore()
        rng = np.random.default_rng((int(seed), 0xB17D))
        m = cfg.model
        self.input = InputModule(self.store, self.geometry, m.d, m.band_param_budget, rng, dtype)
        self.band_fusion = AttentionFusion(
            self.store, "fusion", m.d, m.d, m.query_dim, m.heads, rng,
            bias=m.fusion_bias, dtype=dtype,
        )
        self.pyramid = PyramidEncoder(
            self.store, "pyramid", cfg.n_p, m.d, m.layers_per_block, m.blocks,
            m.merge_factor, m.heads, m.mlp_ratio, m.query_dim, rng,
            fusion_bias=m.fusion_bias, dtype=dtype,
        )
        self.deep_dim = m.d * m.merge_factor ** (m.blocks - 1)
        self.head = ProjectionHead(self.store, "head", self.deep_dim, m.embed_dim, rng, dtype)
        self.prototypes = self.store.add(
            "swav.prototypes",
            _unit_rows(rng.standard_normal((cfg.swav.prototypes, m.embed_dim))).astype(dtype),
        )
        self.decoder = None  # attached by fpn.attach_decoder for fine-tuning

    # forward paths ----------------------------------------------------

    def encode(self, band_images: list[np.ndarray | None],
               drop_mask: np.ndarray) -> tuple[FeaturePyramid, Tensor]:
        """Views -> (feature pyramid, band-fusion scores (B, P, h, n_B))."""
        tokens = self.input.assemble(band_images, drop_mask)
        fused, scores = self.band_fusion.fuse(tokens)
        return self.pyramid.forward(fused), scores

    def embed(self, band_images: list[np.ndarray | None],
              drop_mask: np.ndarray) -> Tensor:
        pyramid, _ = self.encode(band_images, drop_mask)
        return self.head.forward(pyramid.deepest)

    # parameter accounting ----------------------------------------------

    def param_breakdown(self) -> dict[str, int]:
        """Enumerated per-module counts from the store."""
        groups = {"input": "input.", "band_fusion": "fusion.", "pyramid": "pyramid.",
                  "projection_head": "head.", "prototypes": "swav.", "fpn": "fpn."}
        out = {k: 0 for k in groups}
        for name, p in self.store.items():
            for key, prefix in groups.items():
                if name.startswith(prefix):
                    out[key] += p.data.size
                    break
        out["encoder_total"] = out["input"] + out["band_fusion"] + out["pyramid"]
        out["total"] = self.store.total_params()
        return out

    def analytic_breakdown(self) -> dict[str, int]:
        """Closed-form counts; must equal the enumerated ones exactly."""
        cfg, m = self.cfg, self.cfg.model
        geo = self.geometry
        input_count = 0
        for band in geo.bands():
            in_dim = band.patch_vector_len(geo.aov_meters, geo.n_p)
            d_r = hidden_dim_for_band(in_dim, m.d, m.band_param_budget)
            input_count += projector_param_count(in_dim, d_r, m.d) + m.d  # + empty token
        fusion_count = fusion_param_count(m.d, m.d, m.query_dim, m.heads, m.fusion_bias)
        pyr_count = pyramid_param_count(
            cfg.n_p, m.d, m.layers_per_block, m.blocks, m.merge_factor, m.heads,
            m.mlp_ratio, m.query_dim, m.fusion_bias,
        )
        head_count = ProjectionHead.param_count(self.deep_dim, m.embed_dim)
        proto_count = cfg.swav.prototypes * m.embed_dim
        fpn_count = self.decoder.analytic_param_count() if self.decoder is not None else 0
        out = {
            "input": input_count,
            "band_fusion": fusion_count,
            "pyramid": pyr_count,
            "projection_head": head_count,
            "prototypes": proto_count,
            "fpn": fpn_count,
            "encoder_total": input_count + fusion_count + pyr_count,
        }
        out["total"] = out["encoder_total"] + head_count + proto_count + fpn_count
        return out


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def build_model(cfg: RunConfig, seed: int, dtype=np.float32) -> Model:
    if cfg.swav.local_views <= cfg.swav.global_views:
        raise UsageError(
            f"local_views ({cfg.swav.local_views}) must exceed global_views "
            f"({cfg.swav.global_views})"
        )
    return Model(cfg, seed, dtype)
