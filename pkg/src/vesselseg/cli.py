"""Command-line entry point: gen / train / predict / eval / compare.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 numerical failure (diverged loss).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .checkpoint import load_checkpoint, network_from_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import (
    ManifestEntry,
    generate,
    kfold,
    read_image_pgm,
    read_manifest,
    split,
    write_image_pgm,
    write_manifest,
    write_mask_pgm,
    write_pmap,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DimensionError,
    NumericalError,
    UsageError,
    VesselSegError,
)
from .postproc import binarize, otsu_threshold
from .train import evaluate, predict_probabilities, run_ablation, train

VIEW_TAGS = ("LCA-LAO", "LCA-RAO", "RCA-LAO", "RCA-RAO")
_THREAD_LIMITER = None  # keeps a threadpoolctl controller alive for the process


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = args.out or (cfg.paths.out_dir if cfg else None)
    if not out:
        raise UsageError("an output directory is required (--out or paths.out_dir)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest_path(args, cfg: RunConfig | None) -> Path:
    manifest = getattr(args, "manifest", None) or (cfg.paths.manifest if cfg else None)
    if not manifest:
        raise UsageError("a dataset manifest is required (--manifest or paths.manifest)")
    return Path(manifest)


def _apply_threads(n: int | None) -> None:
    global _THREAD_LIMITER
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print("warning: threadpoolctl not installed; --threads ignored",
              file=sys.stderr)
        return
    _THREAD_LIMITER = threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.images_per_patient < 1:
        raise UsageError("--images-per-patient must be >= 1")
    out = _out_dir(args, cfg)
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    entries = []
    for i in range(args.count):
        sample_cfg = replace(cfg.synth, seed=cfg.seed + i)
        patient = f"p{i // args.images_per_patient:04d}"
        view = VIEW_TAGS[i % len(VIEW_TAGS)]
        sample = generate(sample_cfg, patient_id=patient, view_tag=view)
        image_rel = f"images/img_{i:04d}.pgm"
        mask_rel = f"masks/mask_{i:04d}.pgm"
        write_image_pgm(out / image_rel, sample.image)
        write_mask_pgm(out / mask_rel, sample.mask)
        entries.append(ManifestEntry(
            sample_id=f"s{i:04d}", image_path=image_rel, mask_path=mask_rel,
            patient_id=patient, view_tag=view, spacing=sample.spacing))
    write_manifest(out / "manifest.csv", entries)
    print(f"wrote {args.count} samples and manifest.csv to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest_path(args, cfg)
    out = _out_dir(args, cfg)
    entries = read_manifest(manifest)
    plan = split([(e.sample_id, e.patient_id) for e in entries],
                 ratios=cfg.split.ratios, seed=cfg.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    init = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    result = train(cfg.train_config(), entries, plan, manifest.parent,
                   resume=resume, init=init)
    save_checkpoint(out / "checkpoint_best.bin", result.best)
    save_checkpoint(out / "checkpoint_last.bin", result.last)
    report.write_history_csv(out / "history.csv", result.history)
    report.save_history_figure(out / "history.png", result.history)
    final = result.history[-1]
    print(f"trained {len(result.history)} epoch(s); "
          f"final loss {final.train_loss:.4f}, "
          f"best val DSC {max(h.val_dsc for h in result.history):.4f} "
          f"at epoch {result.best_epoch}")
    return 0


def cmd_predict(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ck)
    image = read_image_pgm(args.image)
    if image.shape != (ck.arch.input_size, ck.arch.input_size):
        raise DimensionError(
            f"image {image.shape} does not match checkpoint input size "
            f"{ck.arch.input_size}x{ck.arch.input_size}")
    out = _out_dir(args)
    prob = predict_probabilities(net, image[None])[0]
    thr, degenerate = otsu_threshold(prob)
    mask = binarize(prob, thr)
    write_pmap(out / "prob.pmap", prob)
    write_mask_pgm(out / "mask.pgm", mask)
    if args.overlay:
        overlay = image.copy()
        overlay[mask == 1] = 1.0
        write_image_pgm(out / "overlay.pgm", overlay)
    note = " (degenerate histogram)" if degenerate else ""
    print(f"wrote prob.pmap and mask.pgm to {out}; otsu threshold {thr:.4f}{note}")
    return 0


def cmd_eval(args) -> int:
    manifest = _manifest_path(args, None)
    entries = read_manifest(manifest)
    out = _out_dir(args)
    if args.oracle:
        result = evaluate(None, entries, manifest.parent,
                          model_name="oracle", oracle=True)
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --oracle is given")
        ck = load_checkpoint(args.checkpoint)
        names = {"unet": "U-Net", "unetpp": "U-Net++", "unet3p": "U-Net3+"}
        label = names[ck.arch.kind]
        if ck.arch.kind == "unet3p" and not ck.arch.deep_supervision:
            label += " w/o DS"
        result = evaluate(ck, entries, manifest.parent, model_name=label)
    report.write_per_image_csv(out / "per_image.csv", result)
    report.write_summary_csv(out / "summary.csv", [result])
    report.write_aggregate_csv(out / "aggregate.csv", result)
    report.save_metrics_figure(out / "metrics.png", result)
    agg = result.aggregate()
    print(f"evaluated {agg['n_images']} image(s): mean DSC {agg['dsc_mean']:.4f}, "
          f"mean HD {agg['hd_mm_mean']:.4f} mm")
    return 0


def cmd_compare(args) -> int:
    if len(args.config) < 2:
        raise UsageError("compare needs at least two --config files")
    configs = [load_run_config(p) for p in args.config]
    if args.seed is not None:
        for cfg in configs:
            cfg.seed = args.seed
    manifest = _manifest_path(args, configs[0])
    entries = read_manifest(manifest)
    out = _out_dir(args, configs[0])
    fold_seed = args.seed if args.seed is not None else configs[0].seed
    folds = kfold([(e.sample_id, e.patient_id) for e in entries],
                  k=args.folds, seed=fold_seed)
    specs = [(cfg.model_label(), cfg.train_config()) for cfg in configs]
    result = run_ablation(specs, entries, manifest.parent, folds)
    report.write_comparison_csv(out / "comparison.csv", result)
    report.write_fold_series_csv(out, result)
    report.save_fold_series_figure(out / "folds.png", result)
    order = sorted(result.rows, key=lambda r: -r["dsc"])
    ranking = " > ".join(f"{r['model']} ({r['dsc']:.4f})" for r in order)
    print(f"compared {len(specs)} models over {args.folds} fold(s); "
          f"mean DSC ranking: {ranking}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="vesselseg",
                     description="Vessel segmentation: synthesize data, train "
                                 "U-Net-family models, predict, evaluate, compare.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS thread pools (requires threadpoolctl)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset + manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--images-per-patient", type=int, default=2)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None,
                   help="continue a previous run from its last checkpoint")
    p.add_argument("--init-checkpoint", default=None,
                   help="warm-start matching parameters by name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="probability map + binary mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--overlay", action="store_true",
                   help="also write an overlay PGM with foreground at max intensity")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="five-metric report over a manifest")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="k-fold ablation across model configs")
    p.add_argument("--config", action="append", default=[],
                   help="run config per model (repeat; at least two)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--folds", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _apply_threads(args.threads)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except VesselSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
