"""Learned-query multi-head cross-attention that collapses a token axis.

One instance fuses the band axis into a single token per patch position;
further instances merge s x s spatial patch groups inside the pyramid.
The softmax weights are returned alongside the fused output: they are
the per-head band-importance scores the architecture is built to expose.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError
from .params import ParamStore


def fusion_param_count(d_in: int, d_out: int, query_dim: int, heads: int,
                       bias: bool = False) -> int:
    """Closed-form parameter count; d_v is tied to d_out."""
    if query_dim % heads != 0:
        raise UsageError(f"query_dim {query_dim} not divisible by heads {heads}")
    d_v = d_out
    count = d_in * query_dim + d_in * heads * d_v + heads * d_v * d_out + query_dim
    if bias:
        count += query_dim + heads * d_v + d_out
    return count


class AttentionFusion:
    """Cross-attention with a learned query over a fused token axis.

    Keys/values come from linear projections of the input tokens; the
    query is a learnable vector split across heads. Head outputs are
    concatenated and passed through a linear output projection.
    """

    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int,
                 query_dim: int, heads: int, rng: np.random.Generator,
                 bias: bool = False, dtype=np.float32):
        if query_dim % heads != 0:
            raise UsageError(f"query_dim {query_dim} not divisible by heads {heads}")
        self.d_in = d_in
        self.d_out = d_out
        self.query_dim = query_dim
        self.heads = heads
        self.d_head = query_dim // heads
        self.d_v = d_out
        self.bias = bias
        sk = 1.0 / math.sqrt(d_in)
        self.query = store.add(f"{prefix}.query", (rng.standard_normal(query_dim) * 0.02).astype(dtype))
        self.w_k = store.add(f"{prefix}.w_k", (rng.standard_normal((d_in, query_dim)) * sk).astype(dtype))
        self.w_v = store.add(f"{prefix}.w_v", (rng.standard_normal((d_in, heads * self.d_v)) * sk).astype(dtype))
        so = 1.0 / math.sqrt(heads * self.d_v)
        self.w_o = store.add(f"{prefix}.w_o", (rng.standard_normal((heads * self.d_v, d_out)) * so).astype(dtype))
        if bias:
            self.b_k = store.add(f"{prefix}.b_k", np.zeros(query_dim, dtype=dtype))
            self.b_v = store.add(f"{prefix}.b_v", np.zeros(heads * self.d_v, dtype=dtype))
            self.b_o = store.add(f"{prefix}.b_o", np.zeros(d_out, dtype=dtype))

    def param_count(self) -> int:
        return fusion_param_count(self.d_in, self.d_out, self.query_dim, self.heads, self.bias)

    def fuse(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Collapse the n axis of (B, P, n, d_in).

        Returns ``(fused, scores)`` with fused (B, P, d_out) and scores
        (B, P, heads, n) — exactly the weights used in the forward pass.
        """
        if tokens.ndim != 4:
            raise ShapeError(f"fuse expects (B, P, n, d_in), got {tokens.shape}")
        b, p, n, d_in = tokens.shape
        if d_in != self.d_in:
            raise ShapeError(f"token dim {d_in} != fusion d_in {self.d_in}")
        if n == 0:
            raise UsageError("cannot fuse an empty token axis")
        h, dh, dv = self.heads, self.d_head, self.d_v

        keys = ad.matmul(tokens, self.w_k)
        values = ad.matmul(tokens, self.w_v)
        if self.bias:
            keys = ad.add(keys, self.b_k)
            values = ad.add(values, self.b_v)
        keys = ad.reshape(keys, (b, p, n, h, dh))
        values = ad.reshape(values, (b, p, n, h, dv))

        q_heads = ad.reshape(self.query, (h, dh))
        logits = ad.query_logits(keys, q_heads, 1.0 / math.sqrt(dh))  # (B, P, n, h)
        scores = ad.softmax(logits, axis=2)                           # over the fused axis

        weighted = ad.weighted_pool(scores, values)                   # (B, P, h, dv)
        fused = ad.matmul(ad.reshape(weighted, (b, p, h * dv)), self.w_o)
        if self.bias:
            fused = ad.add(fused, self.b_o)
        return fused, ad.transpose(scores, (0, 1, 3, 2))          # (B, P, h, n)


def argmax_band_map(scores: np.ndarray) -> np.ndarray:
    """Winning token index per (..., head, position); ties -> lowest index."""
    return np.argmax(scores, axis=-1)
