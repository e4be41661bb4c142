"""Reproductions of the trained-model diagnostic artifacts as files.

Every exported image has a sidecar CSV carrying the raw values (the
image is a deterministic function of the CSV) and scalar scale
information where min-max mapping is involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .encoder import Model
from .errors import UsageError
from .imaging import band_palette, heatmap, scale_nearest, to_gray, write_csv, write_pgm, write_ppm
from .swav import sinkhorn_codes, prototype_scores

CELL_SCALE = 8  # image pixels per patch cell / matrix entry


@dataclass
class SimilarityReport:
    """Cross matrices between global-view rows and local-view columns."""

    sigma: np.ndarray   # cosine similarity
    d2: np.ndarray      # L2 distance


def similarity_report(global_emb: np.ndarray, local_emb: np.ndarray) -> SimilarityReport:
    if global_emb.shape != local_emb.shape:
        raise UsageError(
            f"global/local embedding sets differ: {global_emb.shape} vs {local_emb.shape}"
        )
    sigma = global_emb @ local_emb.T
    diff = global_emb[:, None, :] - local_emb[None, :, :]
    d2 = np.sqrt((diff * diff).sum(axis=-1))
    return SimilarityReport(sigma, d2)


def diagonal_separation(sigma: np.ndarray) -> float:
    """Mean diagonal similarity minus mean off-diagonal similarity."""
    n = sigma.shape[0]
    diag = np.trace(sigma) / n
    off = (sigma.sum() - np.trace(sigma)) / (n * n - n)
    return float(diag - off)


def export_similarity(report: SimilarityReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = report.sigma.shape[0]
    header = ["row"] + [f"col{j}" for j in range(n)]
    for name, mat, vmin, vmax in (
        ("similarity", report.sigma, -1.0, 1.0),
        ("l2_distance", report.d2, 0.0, 2.0),
    ):
        write_csv(out / f"{name}.csv", header,
                  [[i] + list(mat[i]) for i in range(n)])
        write_ppm(out / f"{name}.ppm", scale_nearest(heatmap(mat, vmin, vmax), CELL_SCALE))
        (out / f"{name}_scale.txt").write_text(
            f"heatmap scale: black={vmin} yellow={vmax}; cell scale {CELL_SCALE}px\n",
            encoding="utf-8",
        )


def export_attention_maps(model: Model, bands: list[np.ndarray],
                          drop_mask: np.ndarray, out_dir: str | Path) -> None:
    """Per-head argmax band maps (PPM) plus raw score and mask CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geometry = model.geometry
    n_p = geometry.n_p
    imgs = [None if drop_mask[i] else bands[i][None] for i in range(geometry.n_bands)]
    with ad.no_grad():
        _, scores = model.encode(imgs, drop_mask[None, :])
    raw = scores.data[0]                       # (P, heads, n_bands)
    heads = raw.shape[1]
    palette = band_palette(geometry)
    winners = np.argmax(raw, axis=-1)          # (P, heads)
    for h in range(heads):
        grid = winners[:, h].reshape(n_p, n_p)
        rgb = palette[grid]
        write_ppm(out / f"attention_head{h}.ppm", scale_nearest(rgb, CELL_SCALE))
    rows = []
    for p in range(raw.shape[0]):
        for h in range(heads):
            rows.append([p, h] + list(raw[p, h]))
    write_csv(out / "attention_scores.csv",
              ["position", "head"] + [f"band{i}" for i in range(geometry.n_bands)], rows)
    write_csv(out / "drop_mask.csv", ["band", "dropped"],
              [[i, int(drop_mask[i])] for i in range(geometry.n_bands)])


def export_feature_maps(model: Model, bands: list[np.ndarray], drop_mask: np.ndarray,
                        mode: str, out_dir: str | Path) -> None:
    """``averaged``: one PGM per block; ``all``: every block-0 feature."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geometry = model.geometry
    imgs = [None if drop_mask[i] else bands[i][None] for i in range(geometry.n_bands)]
    with ad.no_grad():
        pyramid, _ = model.encode(imgs, drop_mask[None, :])
    if mode == "averaged":
        scale_lines = []
        for b, grid in enumerate(pyramid.grids):
            side = int(np.sqrt(grid.shape[1]))
            avg = grid.data[0].mean(axis=-1).reshape(side, side)
            vmin, vmax = float(avg.min()), float(avg.max())
            write_pgm(out / f"features_block{b}_avg.pgm",
                      scale_nearest(to_gray(avg, vmin, vmax), CELL_SCALE))
            write_csv(out / f"features_block{b}_avg.csv",
                      [f"col{j}" for j in range(side)], [list(r) for r in avg])
            scale_lines.append(f"block{b}: min={vmin!r} max={vmax!r}"
                               + (" (degenerate range -> mid-gray)" if vmax <= vmin else ""))
        (out / "features_scale.txt").write_text("\n".join(scale_lines) + "\n", encoding="utf-8")
    elif mode == "all":
        grid = pyramid.grids[0].data[0]
        side = int(np.sqrt(grid.shape[0]))
        for f in range(grid.shape[1]):
            fmap = grid[:, f].reshape(side, side)
            write_pgm(out / f"features_block0_f{f:03d}.pgm",
                      scale_nearest(to_gray(fmap, float(fmap.min()), float(fmap.max())),
                                    CELL_SCALE))
        write_csv(out / "features_block0_all.csv",
                  ["position"] + [f"f{j}" for j in range(grid.shape[1])],
                  [[p] + list(grid[p]) for p in range(grid.shape[0])])
    else:
        raise UsageError(f"unknown feature-map mode {mode!r} (averaged|all)")


def export_prototype_alignment(model: Model, cfg: RunConfig,
                               samples: list[list[np.ndarray]], sample_ids: list[int],
                               seed: int, out_dir: str | Path) -> None:
    """Per sample: the global view's Sinkhorn code row (q) above the local
    view's softmax prediction row (p) over all prototypes."""
    from .train import embed_paired_views

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g_emb, l_emb = embed_paired_views(model, samples, sample_ids, cfg, seed)
    protos = model.prototypes.data.astype(np.float64)
    q = sinkhorn_codes(prototype_scores(g_emb.astype(np.float64), protos),
                       cfg.swav.sinkhorn_epsilon, cfg.swav.sinkhorn_iterations)
    p_scores = prototype_scores(l_emb.astype(np.float64), protos)
    z = p_scores / cfg.swav.temperature
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    k = protos.shape[0]
    rows = []
    for i, sid in enumerate(sample_ids):
        strip = np.stack([q[i], p[i]])
        vmax = float(strip.max())
        write_pgm(out / f"prototypes_sample{sid}.pgm",
                  scale_nearest(to_gray(strip, 0.0, vmax), CELL_SCALE))
        rows.append([sid, "q"] + list(q[i]))
        rows.append([sid, "p"] + list(p[i]))
    write_csv(out / "prototype_alignment.csv",
              ["sample", "row"] + [f"proto{j}" for j in range(k)], rows)


def export_view_strip(masks: np.ndarray, geometry, out_dir: str | Path,
                      name: str = "views") -> None:
    """Drop-mask strip: one row per view, one column per band; surviving
    bands take their modality/band color, dropped bands are black."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    palette = band_palette(geometry)
    n_views, n_b = masks.shape
    rgb = np.zeros((n_views, n_b, 3), dtype=np.uint8)
    for v in range(n_views):
        for i in range(n_b):
            if not masks[v, i]:
                rgb[v, i] = palette[i]
    write_ppm(out / f"{name}.ppm", scale_nearest(rgb, CELL_SCALE))
    write_csv(out / f"{name}.csv", ["view"] + [f"band{i}" for i in range(n_b)],
              [[v] + [int(x) for x in masks[v]] for v in range(n_views)])
