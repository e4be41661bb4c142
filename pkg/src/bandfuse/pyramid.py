"""Pre-norm transformer blocks interleaved with attention-based patch merging.

Block b runs at feature dim d*s^b on a grid of side n_p/s^b; between
blocks the fusion mechanism merges s x s spatially contiguous patch
groups, multiplying the feature dim by s and dividing the sequence
length by s^2. Block outputs (pre-merge) form the feature pyramid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import GeometryError, ShapeError
from .fusion import AttentionFusion, fusion_param_count
from .params import ParamStore


@dataclass
class FeaturePyramid:
    """Per-block activation grids, shallowest first.

    ``grids[b]`` has shape (B, (n_p/s^b)^2, d*s^b); the last entry is the
    deepest (unmerged) map. ``merge_scores[b]`` holds the attention
    weights of the merge applied after block b, shape (B, P', heads, s^2).
    """

    grids: list[Tensor]
    merge_scores: list[Tensor]

    @property
    def deepest(self) -> Tensor:
        return self.grids[-1]

    def sides(self) -> list[int]:
        return [int(math.isqrt(g.shape[1])) for g in self.grids]


class TransformerLayer:
    """One pre-norm layer: x += MHSA(LN(x)); x += MLP(LN(x))."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int,
                 mlp_ratio: float, rng: np.random.Generator, dtype=np.float32):
        if dim % heads != 0:
            raise GeometryError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.d_head = dim // heads
        self.hidden = int(round(mlp_ratio * dim))
        s = 1.0 / math.sqrt(dim)
        sh = 1.0 / math.sqrt(self.hidden)

        def w(name, shape, scale):
            return store.add(f"{prefix}.{name}", (rng.standard_normal(shape) * scale).astype(dtype))

        def b(name, n):
            return store.add(f"{prefix}.{name}", np.zeros(n, dtype=dtype))

        self.ln1_g = store.add(f"{prefix}.ln1.gamma", np.ones(dim, dtype=dtype))
        self.ln1_b = b("ln1.beta", dim)
        self.w_q, self.b_q = w("attn.w_q", (dim, dim), s), b("attn.b_q", dim)
        self.w_k, self.b_k = w("attn.w_k", (dim, dim), s), b("attn.b_k", dim)
        self.w_v, self.b_v = w("attn.w_v", (dim, dim), s), b("attn.b_v", dim)
        self.w_o, self.b_o = w("attn.w_o", (dim, dim), s), b("attn.b_o", dim)
        self.ln2_g = store.add(f"{prefix}.ln2.gamma", np.ones(dim, dtype=dtype))
        self.ln2_b = b("ln2.beta", dim)
        self.w_m1, self.b_m1 = w("mlp.w1", (dim, self.hidden), s), b("mlp.b1", self.hidden)
        self.w_m2, self.b_m2 = w("mlp.w2", (self.hidden, dim), sh), b("mlp.b2", dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"layer dim {self.dim} got input {x.shape}")
        bsz, length, dim = x.shape
        h, dh = self.heads, self.d_head

        pre = ad.layer_norm(x, self.ln1_g, self.ln1_b)
        q = ad.add(ad.matmul(pre, self.w_q), self.b_q)
        k = ad.add(ad.matmul(pre, self.w_k), self.b_k)
        v = ad.add(ad.matmul(pre, self.w_v), self.b_v)
        q = ad.transpose(ad.reshape(q, (bsz, length, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (bsz, length, h, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (bsz, length, h, dh)), (0, 2, 1, 3))
        logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        logits = ad.mul(logits, Tensor(np.asarray(1.0 / math.sqrt(dh), dtype=x.dtype)))
        attn = ad.softmax(logits, axis=-1)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, length, dim))
        x = ad.add(x, ad.add(ad.matmul(ctx, self.w_o), self.b_o))

        pre2 = ad.layer_norm(x, self.ln2_g, self.ln2_b)
        hid = ad.gelu(ad.add(ad.matmul(pre2, self.w_m1), self.b_m1))
        x = ad.add(x, ad.add(ad.matmul(hid, self.w_m2), self.b_m2))
        return x

    @staticmethod
    def param_count(dim: int, mlp_ratio: float) -> int:
        hidden = int(round(mlp_ratio * dim))
        attn = 4 * (dim * dim + dim)
        mlp = dim * hidden + hidden + hidden * dim + dim
        norms = 4 * dim
        return attn + mlp + norms


class TransformerBlock:
    """N_l stacked layers at a fixed dim."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, n_layers: int,
                 heads: int, mlp_ratio: float, rng: np.random.Generator, dtype=np.float32):
        self.layers = [
            TransformerLayer(store, f"{prefix}.layer{i}", dim, heads, mlp_ratio, rng, dtype)
            for i in range(n_layers)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x


def merge_groups(grid: Tensor, s: int) -> Tensor:
    """(B, side^2, dim) -> (B, (side/s)^2, s^2, dim): spatial reassembly
    followed by re-patchification into s x s groups, row-major in-group."""
    bsz, length, dim = grid.shape
    side = math.isqrt(length)
    if side * side != length:
        raise GeometryError(f"sequence length {length} is not a square grid")
    if side % s != 0:
        raise GeometryError(f"grid side {side} not divisible by merge factor {s}")
    out = ad.reshape(grid, (bsz, side // s, s, side // s, s, dim))
    out = ad.transpose(out, (0, 1, 3, 2, 4, 5))
    return ad.reshape(out, (bsz, (side // s) ** 2, s * s, dim))


class PyramidEncoder:
    """Positional embedding, N_b blocks, and the merges between them."""

    def __init__(self, store: ParamStore, prefix: str, n_p: int, d: int,
                 n_layers: int, n_blocks: int, merge_factor: int, heads: int,
                 mlp_ratio: float, query_dim: int, rng: np.random.Generator,
                 fusion_bias: bool = False, dtype=np.float32):
        s = merge_factor
        if n_blocks < 1:
            raise GeometryError("need at least one block")
        if n_p % (s ** (n_blocks - 1)) != 0:
            raise GeometryError(
                f"n_p={n_p} not divisible by s^(N_b-1)={s ** (n_blocks - 1)}"
            )
        self.n_p = n_p
        self.d = d
        self.s = s
        self.n_blocks = n_blocks
        self.pos_embed = store.add(
            f"{prefix}.pos_embed", (rng.standard_normal((n_p * n_p, d)) * 0.02).astype(dtype)
        )
        self.blocks: list[TransformerBlock] = []
        self.merges: list[AttentionFusion] = []
        for b in range(n_blocks):
            dim_b = d * s**b
            self.blocks.append(
                TransformerBlock(store, f"{prefix}.block{b}", dim_b, n_layers, heads,
                                 mlp_ratio, rng, dtype)
            )
            if b < n_blocks - 1:
                self.merges.append(
                    AttentionFusion(store, f"{prefix}.merge{b}", dim_b, s * dim_b,
                                    query_dim, heads, rng, bias=fusion_bias, dtype=dtype)
                )

    def forward(self, tokens: Tensor) -> FeaturePyramid:
        if tokens.shape[1] != self.n_p * self.n_p or tokens.shape[2] != self.d:
            raise ShapeError(
                f"pyramid expects (B, {self.n_p * self.n_p}, {self.d}), got {tokens.shape}"
            )
        x = ad.add(tokens, self.pos_embed)
        grids: list[Tensor] = []
        merge_scores: list[Tensor] = []
        for b, block in enumerate(self.blocks):
            x = block.forward(x)
            grids.append(x)
            if b < self.n_blocks - 1:
                groups = merge_groups(x, self.s)
                x, scores = self.merges[b].fuse(groups)
                merge_scores.append(scores)
        return FeaturePyramid(grids, merge_scores)


def pyramid_param_count(n_p: int, d: int, n_layers: int, n_blocks: int,
                        merge_factor: int, heads: int, mlp_ratio: float,
                        query_dim: int, fusion_bias: bool = False) -> int:
    """Closed-form count for positional embedding, blocks, and merges."""
    s = merge_factor
    total = n_p * n_p * d
    for b in range(n_blocks):
        dim_b = d * s**b
        total += n_layers * TransformerLayer.param_count(dim_b, mlp_ratio)
        if b < n_blocks - 1:
            total += fusion_param_count(dim_b, s * dim_b, query_dim, heads, fusion_bias)
    return total
