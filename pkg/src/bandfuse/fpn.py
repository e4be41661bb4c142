"""Feature-pyramid segmentation decoder and its metrics.

The deepest encoder grid is laterally projected, then repeatedly
upsampled (nearest), concatenated with the next-shallower lateral and
mixed by a 3x3 conv. Past the shallowest level the upsample+conv chain
continues while doubling still divides the target side; a final integer
nearest repeat bridges any remaining factor (e.g. 32 -> 96). A 1x1 conv
plus logistic squash yields the probability map.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Model
from .errors import GeometryError, ShapeError
from .params import ParamStore
from .pyramid import FeaturePyramid


class FpnDecoder:
    """Decoder over all pyramid depths producing (B, side, side) logits."""

    def __init__(self, store: ParamStore, level_dims: list[int], level_sides: list[int],
                 lateral_channels: int, output_side: int, rng: np.random.Generator,
                 prefix: str = "fpn", dtype=np.float32):
        self.level_dims = level_dims          # shallowest first, matching pyramid grids
        self.level_sides = level_sides
        self.channels = lateral_channels
        self.output_side = output_side
        c = lateral_channels

        side = level_sides[-1]
        shallow = level_sides[0]
        chain = []
        while side < shallow:
            side *= 2
            chain.append(side)
        if side != shallow or chain != level_sides[-2::-1]:
            raise GeometryError(f"pyramid sides {level_sides} are not a doubling chain")
        self.extra_ups = 0
        while side * 2 <= output_side and output_side % (side * 2) == 0:
            side *= 2
            self.extra_ups += 1
        if output_side % side != 0:
            raise GeometryError(
                f"output side {output_side} unreachable from deepest grid "
                f"{level_sides[-1]} by x2 upsampling (stuck at {side})"
            )
        self.final_repeat = output_side // side

        def w(name, shape, scale):
            return store.add(f"{prefix}.{name}", (rng.standard_normal(shape) * scale).astype(dtype))

        def b(name, n):
            return store.add(f"{prefix}.{name}", np.zeros(n, dtype=dtype))

        self.laterals = []
        for i, dim in enumerate(level_dims):
            self.laterals.append(
                (w(f"lateral{i}.w", (dim, c), 1.0 / math.sqrt(dim)), b(f"lateral{i}.b", c))
            )
        self.merge_convs = []
        for i in range(len(level_dims) - 1):
            self.merge_convs.append(
                (w(f"merge{i}.w", (3, 3, 2 * c, c), 1.0 / math.sqrt(9 * 2 * c)),
                 b(f"merge{i}.b", c))
            )
        self.up_convs = []
        for i in range(self.extra_ups):
            self.up_convs.append(
                (w(f"up{i}.w", (3, 3, c, c), 1.0 / math.sqrt(9 * c)), b(f"up{i}.b", c))
            )
        self.head_w = w("head.w", (c, 1), 1.0 / math.sqrt(c))
        self.head_b = b("head.b", 1)

    def forward_logits(self, pyramid: FeaturePyramid) -> Tensor:
        grids = pyramid.grids
        if len(grids) != len(self.level_dims):
            raise ShapeError(
                f"decoder built for {len(self.level_dims)} pyramid levels, got {len(grids)}"
            )

        def to_image(grid: Tensor, side: int) -> Tensor:
            bsz = grid.shape[0]
            return ad.reshape(grid, (bsz, side, side, grid.shape[-1]))

        def lateral(i: int) -> Tensor:
            wl, bl = self.laterals[i]
            return ad.add(ad.matmul(to_image(grids[i], self.level_sides[i]), wl), bl)

        deep = len(grids) - 1
        x = lateral(deep)
        for step, i in enumerate(range(deep - 1, -1, -1)):
            x = ad.upsample_nearest(x, 2)
            x = ad.concat([x, lateral(i)], axis=-1)
            wm, bm = self.merge_convs[step]
            x = ad.gelu(ad.conv2d_3x3(x, wm, bm))
        for wu, bu in self.up_convs:
            x = ad.upsample_nearest(x, 2)
            x = ad.gelu(ad.conv2d_3x3(x, wu, bu))
        if self.final_repeat > 1:
            x = ad.upsample_nearest(x, self.final_repeat)
        logits = ad.add(ad.matmul(x, self.head_w), self.head_b)
        bsz = logits.shape[0]
        return ad.reshape(logits, (bsz, self.output_side, self.output_side))

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        """Probability map in (0, 1)."""
        return ad.sigmoid(self.forward_logits(pyramid))

    def analytic_param_count(self) -> int:
        c = self.channels
        total = sum(dim * c + c for dim in self.level_dims)
        total += (len(self.level_dims) - 1) * (9 * 2 * c * c + c)
        total += self.extra_ups * (9 * c * c + c)
        total += c * 1 + 1
        return total


def attach_decoder(model: Model, lateral_channels: int, output_side: int,
                   seed: int) -> FpnDecoder:
    """Register a decoder in the model's store (prefix ``fpn.``)."""
    m = model.cfg.model
    s = m.merge_factor
    dims = [m.d * s**b for b in range(m.blocks)]
    sides = [model.cfg.n_p // s**b for b in range(m.blocks)]
    rng = np.random.default_rng((int(seed), 0xF9A0))
    decoder = FpnDecoder(model.store, dims, sides, lateral_channels, output_side,
                         rng, dtype=model.dtype)
    model.decoder = decoder
    return decoder


def iou_metrics(prob_map: np.ndarray, target: np.ndarray,
                threshold: float = 0.5) -> dict[str, float]:
    """Accuracy plus per-class IoU after binarizing at ``threshold``.

    A class absent from both prediction and target has IoU 1.0 (the
    empty-union convention, matching all-negative samples).
    """
    prob_map = np.asarray(prob_map)
    target = np.asarray(target)
    if prob_map.shape != target.shape:
        raise ShapeError(f"prediction shape {prob_map.shape} != target shape {target.shape}")
    pred = prob_map > threshold
    tgt = target > 0.5

    def class_iou(p: np.ndarray, t: np.ndarray) -> float:
        union = np.logical_or(p, t).sum()
        if union == 0:
            return 1.0
        return float(np.logical_and(p, t).sum() / union)

    return {
        "accuracy": float((pred == tgt).mean()),
        "fg_iou": class_iou(pred, tgt),
        "bg_iou": class_iou(~pred, ~tgt),
    }
