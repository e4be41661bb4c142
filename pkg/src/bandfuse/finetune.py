"""Two-stage segmentation fine-tuning and the band-combination harness.

Stage 1 trains only the decoder (every encoder tensor stays bitwise
untouched); stage 2 additionally unfreezes the band-fusion module so
attention can re-weight bands for the task. Adam with a single cosine
schedule spans both stages. Band subsets are fixed per run through a
deterministic drop mask (no stochastic augmentation here), which is how
the all-modalities / subset / RGB-like ablation is expressed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .config import RunConfig, render_config
from .container import load_normalized_dataset
from .encoder import Model
from .errors import DataError, NumericError, UsageError
from .fpn import attach_decoder, iou_metrics
from .geometry import GeometryConfig
from .imaging import write_csv
from .optim import Adam, CosineSchedule
from .pyramid import FeaturePyramid
from .train import check_geometry_match

_TAG_FT = 0xF17E


def parse_band_subset(spec: str, geometry: GeometryConfig) -> np.ndarray:
    """Drop mask (True = dropped) from a subset spec.

    ``all`` keeps every band; otherwise a comma list of modality ids,
    each optionally ``mod:k`` keeping only that modality's first k bands
    (e.g. ``B:3`` is the RGB-like subset of the desk profile).
    """
    n_b = geometry.n_bands
    if spec.strip() == "all":
        return np.zeros(n_b, dtype=bool)
    mask = np.ones(n_b, dtype=bool)
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if ":" in token:
            mod, k_str = token.split(":", 1)
            k = int(k_str)
        else:
            mod, k = token, None
        bands = geometry.bands_of_modality(mod.strip())
        if not bands:
            raise UsageError(f"band subset names unknown modality {mod!r}")
        keep = bands if k is None else bands[:k]
        for band in keep:
            mask[band.band_id] = False
    if mask.all():
        raise UsageError(f"band subset {spec!r} keeps no bands")
    return mask


@dataclass
class FinetuneResult:
    log_rows: list[tuple] = field(default_factory=list)
    stage1_trainable: int = 0
    stage2_trainable: int = 0
    eval_metrics: dict[str, float] = field(default_factory=dict)


def _forward_cached_pyramid(model: Model, grids: list[np.ndarray]) -> FeaturePyramid:
    return FeaturePyramid([Tensor(g) for g in grids], [])


def _pyramid_from_tokens(model: Model, tokens: Tensor) -> FeaturePyramid:
    fused, _ = model.band_fusion.fuse(tokens)
    return model.pyramid.forward(fused)


def finetune(model: Model, dataset_dir: str | Path, out_dir: str | Path,
             seed: int, band_subset: str = "all") -> FinetuneResult:
    """Run both stages; writes finetune_log.csv and finetuned.ckpt."""
    cfg = model.cfg
    fc = cfg.fpn
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, samples, labels = load_normalized_dataset(dataset_dir)
    check_geometry_match(cfg, manifest)
    if not manifest.labels or any(lab is None for lab in labels):
        raise DataError(f"fine-tuning needs labels; dataset {dataset_dir} has none")
    if manifest.label_side != fc.output_side:
        raise DataError(
            f"label side {manifest.label_side} != decoder output side {fc.output_side}"
        )

    n_eval = max(1, manifest.count // 5)
    train_idx = list(range(manifest.count - n_eval))
    eval_idx = list(range(manifest.count - n_eval, manifest.count))
    if len(train_idx) < fc.batch:
        raise UsageError(f"only {len(train_idx)} training samples for batch {fc.batch}")

    if model.decoder is None:
        attach_decoder(model, fc.lateral_channels, fc.output_side, seed)
    decoder = model.decoder
    drop_row = parse_band_subset(band_subset, model.geometry)

    # stage 1: only the decoder trains; encoder outputs are constant, so
    # cache each sample's pyramid once
    store = model.store
    store.freeze_all()
    store.unfreeze(lambda n: n.startswith("fpn."))
    result = FinetuneResult()
    result.stage1_trainable = store.trainable_param_count()

    cached_pyramids = _cache_pyramids(model, samples, drop_row)
    steps_per_epoch = len(train_idx) // fc.batch
    total_steps = (fc.stage1_epochs + fc.stage2_epochs) * steps_per_epoch
    schedule = CosineSchedule(fc.lr, fc.lr_min, total_steps)
    optimizer = Adam()
    step = 0

    def run_epoch(stage: int, epoch: int, use_cache: bool, cached_tokens) -> None:
        nonlocal step
        order = np.random.default_rng((int(seed), _TAG_FT, stage, epoch)).permutation(train_idx)
        agg = {"loss": 0.0, "accuracy": 0.0, "fg_iou": 0.0, "bg_iou": 0.0}
        for b in range(steps_per_epoch):
            ids = order[b * fc.batch:(b + 1) * fc.batch]
            target = np.stack([labels[i] for i in ids]).astype(np.float32)
            if use_cache:
                grids = [
                    np.stack([cached_pyramids[i][lev] for i in ids])
                    for lev in range(cfg.model.blocks)
                ]
                pyramid = _forward_cached_pyramid(model, grids)
            else:
                toks = Tensor(np.stack([cached_tokens[i] for i in ids]))
                pyramid = _pyramid_from_tokens(model, toks)
            logits = decoder.forward_logits(pyramid)
            loss = ad.tmean(ad.bce_with_logits(logits, target))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericError(f"non-finite fine-tune loss at stage {stage} epoch {epoch}")
            store.zero_grad()
            ad.backward(loss, store)
            optimizer.step(store, schedule.lr(step))
            step += 1
            with ad.no_grad():
                probs = 1.0 / (1.0 + np.exp(-logits.data))
            m = iou_metrics(probs, target, fc.threshold)
            agg["loss"] += loss_val
            for key in ("accuracy", "fg_iou", "bg_iou"):
                agg[key] += m[key]
        n = steps_per_epoch
        result.log_rows.append(
            (stage, epoch, agg["loss"] / n, agg["accuracy"] / n, agg["fg_iou"] / n,
             agg["bg_iou"] / n, schedule.lr(step - 1))
        )

    for epoch in range(fc.stage1_epochs):
        run_epoch(1, epoch, use_cache=True, cached_tokens=None)

    # stage 2: unfreeze the band-fusion module; tokens stay constant
    store.unfreeze(lambda n: n.startswith("fusion."))
    result.stage2_trainable = store.trainable_param_count()
    cached_tokens = _cache_tokens(model, samples, drop_row)
    for epoch in range(fc.stage2_epochs):
        run_epoch(2, epoch, use_cache=False, cached_tokens=cached_tokens)

    result.eval_metrics = evaluate_segmentation(
        model, [samples[i] for i in eval_idx], [labels[i] for i in eval_idx],
        drop_row, fc.threshold, fc.batch,
    )
    write_csv(out / "finetune_log.csv",
              ["stage", "epoch", "loss", "accuracy", "fg_iou", "bg_iou", "lr"],
              result.log_rows)
    save_checkpoint(out / "finetuned.ckpt", store, render_config(cfg))
    return result


def _cache_pyramids(model: Model, samples, drop_row: np.ndarray,
                    chunk: int = 16) -> list[list[np.ndarray]]:
    out = []
    with ad.no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            imgs, drop = _stack_fixed_mask(model.geometry, part, drop_row)
            pyramid, _ = model.encode(imgs, drop)
            for row in range(len(part)):
                out.append([g.data[row] for g in pyramid.grids])
    return out


def _cache_tokens(model: Model, samples, drop_row: np.ndarray,
                  chunk: int = 16) -> list[np.ndarray]:
    out = []
    with ad.no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            imgs, drop = _stack_fixed_mask(model.geometry, part, drop_row)
            tokens = model.input.assemble(imgs, drop)
            for row in range(len(part)):
                out.append(tokens.data[row])
    return out


def _stack_fixed_mask(geometry: GeometryConfig, samples, drop_row: np.ndarray):
    n_b = geometry.n_bands
    drop = np.broadcast_to(drop_row, (len(samples), n_b)).copy()
    imgs: list[np.ndarray | None] = []
    for i in range(n_b):
        if drop_row[i]:
            imgs.append(None)
        else:
            imgs.append(np.stack([s[i] for s in samples]).astype(np.float32))
    return imgs, drop


def evaluate_segmentation(model: Model, samples, labels, drop_row: np.ndarray,
                          threshold: float, batch: int) -> dict[str, float]:
    """Mean per-sample metrics over an evaluation set."""
    decoder = model.decoder
    if decoder is None:
        raise UsageError("no decoder attached; fine-tune or load a fine-tuned checkpoint")
    agg = {"accuracy": 0.0, "fg_iou": 0.0, "bg_iou": 0.0}
    count = 0
    with ad.no_grad():
        for start in range(0, len(samples), batch):
            part = samples[start:start + batch]
            imgs, drop = _stack_fixed_mask(model.geometry, part, drop_row)
            pyramid, _ = model.encode(imgs, drop)
            probs = decoder.forward(pyramid).data
            for row in range(len(part)):
                m = iou_metrics(probs[row], labels[start + row], threshold)
                for key in agg:
                    agg[key] += m[key]
                count += 1
    return {key: val / count for key, val in agg.items()}


def run_band_ablation(make_model, dataset_dir: str | Path, out_root: str | Path,
                      subsets: dict[str, str], seeds: list[int]) -> dict[str, dict]:
    """Fine-tune per (subset, seed); reports per-subset median eval fg-IoU.

    ``make_model(seed)`` must return a freshly initialized or pretrained
    model so runs stay independent.
    """
    out_root = Path(out_root)
    report: dict[str, dict] = {}
    for name, spec in subsets.items():
        ious = []
        for seed in seeds:
            model = make_model(seed)
            res = finetune(model, dataset_dir, out_root / f"{name}_seed{seed}", seed,
                           band_subset=spec)
            ious.append(res.eval_metrics["fg_iou"])
        report[name] = {
            "fg_iou_runs": ious,
            "fg_iou_median": float(np.median(ious)),
        }
    return report
