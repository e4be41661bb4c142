"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure (non-finite loss). Every run writes ``run_manifest.txt`` (seed,
versions, resolved config echo) beside its outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .augment import make_views
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, default_config, load_config, parse_config, render_config
from .container import gen_dataset, load_normalized_dataset
from .diagnostics import (
    export_attention_maps,
    export_feature_maps,
    export_prototype_alignment,
    export_similarity,
    export_view_strip,
    similarity_report,
)
from .encoder import Model, build_model
from .errors import (
    BandfuseError,
    DataError,
    DataFormatError,
    GeometryError,
    NumericError,
    ParameterError,
    UsageError,
)
from .finetune import evaluate_segmentation, finetune, parse_band_subset
from .fpn import attach_decoder
from .imaging import write_csv
from .train import embed_clean, embed_paired_views, pretrain

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would sys.exit(2); we map to 1
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="bandfuse", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="u64 run seed")
    parser.add_argument("--config", type=str, default=None, help="config file path")
    parser.add_argument("--out", type=str, default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--samples", type=int, required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", type=str, required=True)

    p = sub.add_parser("embed", help="clean full-band embeddings to CSV")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--limit", type=int, default=0, help="0 = all samples")

    p = sub.add_parser("diagnose", help="export diagnostic artifacts")
    p.add_argument("what", choices=["similarity", "attention", "features",
                                    "prototypes", "views"])
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--bands", type=str, default="all",
                   help="kept bands, e.g. all | B,C | B:3")
    p.add_argument("--mode", choices=["averaged", "all"], default="averaged")

    p = sub.add_parser("finetune", help="two-stage segmentation fine-tuning")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--bands", type=str, default="all")

    p = sub.add_parser("eval-seg", help="segmentation metrics of a fine-tuned model")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--bands", type=str, default="all")

    sub.add_parser("count-params", help="per-module parameter counts")
    return parser


def _load_run_config(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    return default_config()


def _write_run_manifest(out_dir: Path, cfg: RunConfig, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = (
        f"bandfuse = {__version__}\n"
        f"numpy = {np.__version__}\n"
        f"seed = {seed}\n"
        "--- config ---\n"
        f"{render_config(cfg)}"
    )
    (out_dir / "run_manifest.txt").write_text(text, encoding="utf-8")


def load_model_from_checkpoint(path: str) -> tuple[Model, RunConfig]:
    config_text, arrays = load_checkpoint(path)
    cfg = parse_config(config_text)
    model = build_model(cfg, seed=0)
    if any(name.startswith("fpn.") for name in arrays):
        attach_decoder(model, cfg.fpn.lateral_channels, cfg.fpn.output_side, seed=0)
    model.store.load_arrays(arrays)
    return model, cfg


def _cmd_gen_data(args, cfg: RunConfig) -> int:
    if args.samples < 0:
        raise UsageError("--samples must be >= 0")
    gen_dataset(cfg, args.samples, args.seed, args.out)
    print(f"wrote {args.samples} samples to {args.out}")
    return 0


def _cmd_pretrain(args, cfg: RunConfig) -> int:
    _, stats = pretrain(cfg, args.data, args.out, args.seed)
    print(f"pretrained {len(stats)} epochs; final loss {stats[-1].loss:.5f} "
          f"-> {Path(args.out) / 'model.ckpt'}")
    return 0


def _cmd_embed(args, cfg: RunConfig) -> int:
    model, _ = load_model_from_checkpoint(args.ckpt)
    manifest, samples, _ = load_normalized_dataset(args.data)
    n = manifest.count if args.limit <= 0 else min(args.limit, manifest.count)
    emb = embed_clean(model, samples[:n])
    write_csv(Path(args.out) / "embeddings.csv",
              ["sample"] + [f"e{j}" for j in range(emb.shape[1])],
              [[i] + list(emb[i]) for i in range(n)])
    print(f"embedded {n} samples -> {Path(args.out) / 'embeddings.csv'}")
    return 0


def _cmd_diagnose(args, cfg: RunConfig) -> int:
    manifest, samples, _ = load_normalized_dataset(args.data)
    out = Path(args.out)
    if args.what == "views":
        run_cfg = cfg
        masks, _ = make_views(samples[args.sample], run_cfg.augment, run_cfg.geometry(),
                              run_cfg.swav.global_views, run_cfg.swav.local_views,
                              args.seed, args.sample)
        export_view_strip(masks, run_cfg.geometry(), out)
        print(f"view strip -> {out / 'views.ppm'}")
        return 0

    if not args.ckpt:
        raise UsageError(f"diagnose {args.what} requires --ckpt")
    model, run_cfg = load_model_from_checkpoint(args.ckpt)
    n = min(args.samples, manifest.count)
    ids = list(range(n))
    if args.what == "similarity":
        g_emb, l_emb = embed_paired_views(model, samples[:n], ids, run_cfg, args.seed)
        export_similarity(similarity_report(g_emb, l_emb), out)
        print(f"similarity matrices for {n} samples -> {out}")
    elif args.what == "attention":
        drop = parse_band_subset(args.bands, model.geometry)
        export_attention_maps(model, samples[args.sample], drop, out)
        print(f"attention maps for sample {args.sample} -> {out}")
    elif args.what == "features":
        drop = parse_band_subset(args.bands, model.geometry)
        export_feature_maps(model, samples[args.sample], drop, args.mode, out)
        print(f"{args.mode} feature maps for sample {args.sample} -> {out}")
    elif args.what == "prototypes":
        export_prototype_alignment(model, run_cfg, samples[:n], ids, args.seed, out)
        print(f"prototype alignment for {n} samples -> {out}")
    return 0


def _cmd_finetune(args, cfg: RunConfig) -> int:
    model, _ = load_model_from_checkpoint(args.ckpt)
    result = finetune(model, args.data, args.out, args.seed, band_subset=args.bands)
    print(
        f"stage-1 trainable {result.stage1_trainable}, stage-2 trainable "
        f"{result.stage2_trainable}; eval fg_iou {result.eval_metrics['fg_iou']:.4f} "
        f"-> {Path(args.out) / 'finetuned.ckpt'}"
    )
    return 0


def _cmd_eval_seg(args, cfg: RunConfig) -> int:
    model, run_cfg = load_model_from_checkpoint(args.ckpt)
    if model.decoder is None:
        raise DataError(f"checkpoint {args.ckpt} has no decoder weights; fine-tune first")
    manifest, samples, labels = load_normalized_dataset(args.data)
    if not manifest.labels:
        raise DataError(f"dataset {args.data} has no labels")
    drop = parse_band_subset(args.bands, model.geometry)
    metrics = evaluate_segmentation(model, samples, labels, drop,
                                    run_cfg.fpn.threshold, run_cfg.fpn.batch)
    write_csv(Path(args.out) / "seg_metrics.csv",
              ["accuracy", "fg_iou", "bg_iou"],
              [[metrics["accuracy"], metrics["fg_iou"], metrics["bg_iou"]]])
    print(f"accuracy={metrics['accuracy']:.4f} fg_iou={metrics['fg_iou']:.4f} "
          f"bg_iou={metrics['bg_iou']:.4f}")
    return 0


def _cmd_count_params(args, cfg: RunConfig) -> int:
    model = build_model(cfg, args.seed)
    enumerated = model.param_breakdown()
    analytic = model.analytic_breakdown()
    print(f"{'module':<18}{'enumerated':>14}{'analytic':>14}")
    for key in ("input", "band_fusion", "pyramid", "projection_head", "prototypes",
                "encoder_total", "total"):
        print(f"{key:<18}{enumerated[key]:>14,}{analytic[key]:>14,}")
    if cfg.profile == "paper_like":
        ratio = enumerated["encoder_total"] / 103e6
        print(f"encoder total vs published ~103M: {ratio:+.1%} relative"
              f" (input ~3.8M, fusion ~1M, transformer ~98M)")
    mismatch = [k for k in analytic if analytic[k] != enumerated[k]]
    if mismatch:
        raise BandfuseError(f"analytic != enumerated for {mismatch}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
        cfg = _load_run_config(args)
        out = Path(args.out)
        _write_run_manifest(out, cfg, args.seed)
        handler = {
            "gen-data": _cmd_gen_data,
            "pretrain": _cmd_pretrain,
            "embed": _cmd_embed,
            "diagnose": _cmd_diagnose,
            "finetune": _cmd_finetune,
            "eval-seg": _cmd_eval_seg,
            "count-params": _cmd_count_params,
        }[args.command]
        return handler(args, cfg)
    except (UsageError, ParameterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, DataError, GeometryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
