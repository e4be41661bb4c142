"""Self-supervised pretraining loop over the synthetic dataset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import make_view_batch
from .checkpoint import save_checkpoint
from .config import RunConfig, render_config
from .container import DatasetManifest, load_normalized_dataset
from .encoder import Model, build_model
from .errors import DataError, NumericError, UsageError
from .imaging import write_csv
from .optim import make_optimizer, make_schedule
from .swav import SwavState, swav_loss

log = logging.getLogger(__name__)

_TAG_ORDER = 0x0D8E


@dataclass
class EpochStats:
    epoch: int
    loss: float
    usage_entropy: float
    max_fraction: float
    lr: float


def check_geometry_match(cfg: RunConfig, manifest: DatasetManifest) -> None:
    want = [(m.modality_id, m.resolutions_m) for m in cfg.modalities]
    have = [(m.modality_id, m.resolutions_m) for m in manifest.modalities]
    if want != have or cfg.aov_meters != manifest.aov_meters or cfg.n_p != manifest.n_p:
        raise DataError(
            f"dataset geometry {have} (aov={manifest.aov_meters}, n_p={manifest.n_p}) does not "
            f"match configured geometry {want} (aov={cfg.aov_meters}, n_p={cfg.n_p})"
        )


def pretrain(cfg: RunConfig, dataset_dir: str | Path, out_dir: str | Path,
             seed: int) -> tuple[Model, list[EpochStats]]:
    """Train from scratch; writes training_log.csv and model.ckpt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, samples, _ = load_normalized_dataset(dataset_dir)
    check_geometry_match(cfg, manifest)
    tr, sw = cfg.train, cfg.swav
    if manifest.count < tr.batch:
        raise UsageError(
            f"dataset has {manifest.count} samples, fewer than batch size {tr.batch}"
        )

    model = build_model(cfg, seed)
    geometry = model.geometry
    state = SwavState(model.prototypes, sw, queue_capacity=sw.queue_batches * tr.batch)
    optimizer = make_optimizer(tr.optimizer, tr.momentum)
    steps_per_epoch = manifest.count // tr.batch
    schedule = make_schedule(tr.schedule, tr.lr, tr.lr_min, tr.epochs * steps_per_epoch)

    n_views = sw.global_views + sw.local_views
    stats: list[EpochStats] = []
    step = 0
    if sw.freeze_prototype_steps > 0:
        model.store.freeze(lambda n: n == "swav.prototypes")
    for epoch in range(tr.epochs):
        order = np.random.default_rng((int(seed), _TAG_ORDER, epoch)).permutation(manifest.count)
        epoch_loss = 0.0
        state.reset_epoch()
        for batch_idx in range(steps_per_epoch):
            ids = order[batch_idx * tr.batch:(batch_idx + 1) * tr.batch]
            batch_samples = [samples[i] for i in ids]
            vb = make_view_batch(batch_samples, [int(i) for i in ids], cfg.augment,
                                 geometry, sw.global_views, sw.local_views, seed, epoch)
            emb = model.embed(vb.band_images, vb.drop_mask)
            codes = []
            for slot in range(sw.global_views):
                block = emb.data[slot * tr.batch:(slot + 1) * tr.batch].astype(np.float64)
                q = state.codes_for_slot(slot, block)
                state.record_codes(q)
                codes.append(q)
            loss = swav_loss(emb, codes, model.prototypes, sw.temperature,
                             tr.batch, sw.global_views, n_views)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericError(f"non-finite loss at epoch {epoch} step {batch_idx}")
            model.store.zero_grad()
            ad.backward(loss, model.store)
            lr = schedule.lr(step)
            optimizer.step(model.store, lr)
            state.renormalize_prototypes()
            if sw.freeze_prototype_steps > 0 and step + 1 == sw.freeze_prototype_steps:
                model.store.unfreeze(lambda n: n == "swav.prototypes")
            for slot in range(sw.global_views):
                block = emb.data[slot * tr.batch:(slot + 1) * tr.batch].astype(np.float64)
                state.push_queue(slot, block)
            epoch_loss += loss_val
            step += 1
        monitor = state.collapse_monitor()
        row = EpochStats(epoch, epoch_loss / steps_per_epoch,
                         monitor["usage_entropy"], monitor["max_fraction"],
                         schedule.lr(step - 1))
        stats.append(row)
        log.info("epoch %d: loss=%.5f entropy=%.3f max_frac=%.3f lr=%.2e",
                 row.epoch, row.loss, row.usage_entropy, row.max_fraction, row.lr)

    write_training_log(out / "training_log.csv", stats)
    save_checkpoint(out / "model.ckpt", model.store, render_config(cfg))
    return model, stats


def write_training_log(path: Path, stats: list[EpochStats]) -> None:
    write_csv(path, ["epoch", "loss", "usage_entropy", "max_fraction", "lr"],
              [(s.epoch, s.loss, s.usage_entropy, s.max_fraction, s.lr) for s in stats])


def embed_clean(model: Model, samples: list[list[np.ndarray]],
                chunk: int = 32) -> np.ndarray:
    """Unaugmented full-band embeddings, (N, d_e)."""
    geometry = model.geometry
    n_b = geometry.n_bands
    outs = []
    with ad.no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            drop = np.zeros((len(part), n_b), dtype=bool)
            imgs = [
                np.stack([s[i] for s in part]).astype(np.float32) for i in range(n_b)
            ]
            outs.append(model.embed(imgs, drop).data)
    return np.concatenate(outs, axis=0)


def embed_paired_views(model: Model, samples: list[list[np.ndarray]],
                       sample_ids: list[int], cfg: RunConfig, seed: int,
                       epoch: int = 0, chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """One global and one local embedding per sample (slots 0 and n_g)."""
    sw = cfg.swav
    g_out, l_out = [], []
    with ad.no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            ids = sample_ids[start:start + chunk]
            vb = make_view_batch(part, ids, cfg.augment, model.geometry,
                                 sw.global_views, sw.local_views, seed, epoch)
            emb = model.embed(vb.band_images, vb.drop_mask).data
            b = len(part)
            g_out.append(emb[0:b])
            l_out.append(emb[sw.global_views * b:(sw.global_views + 1) * b])
    return np.concatenate(g_out, axis=0), np.concatenate(l_out, axis=0)
