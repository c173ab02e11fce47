"""Command-line surface: phantom, train, predict, fuse-fit, evaluate, cv, report.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. The
MPSEG_THREADS environment variable supplies the default for --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, MpsegError
from .fusion import FusionWeights
from .metrics import SegmentationMask, aggregate_report, evaluate_subject, per_subject_csv, render_report
from .phantom import PhantomConfig, generate_dataset
from .pipeline import (
    load_run_config,
    load_views_file,
    predict_fused_mask,
    run_cv,
    run_fusion_fit,
    run_single_fold_training,
)
from .unet2d import load_checkpoint
from .volume_io import Volume, find_subject_record, load_subject, normalize_channels, read_nifti, write_nifti


def _default_threads() -> int:
    env = os.environ.get("MPSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def cmd_phantom(args) -> int:
    config = PhantomConfig(grid_size=args.size, noise_std=args.noise,
                           difficulty=args.difficulty, seed=args.seed)
    generate_dataset(args.n, config, args.out)
    manifest_path = Path(args.out) / "manifest.json"
    print(manifest_path)
    return 0


def cmd_cv(args) -> int:
    config = load_run_config(args.config, out_dir=args.out, threads=args.threads)
    manifest = run_cv(config)
    report_path = Path(config.out_dir) / ("pooled_report.md" if config.report_format == "markdown"
                                          else "pooled_report.csv")
    sys.stdout.write(report_path.read_text())
    print(Path(config.out_dir) / "run_manifest.json")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config, out_dir=args.out, threads=args.threads)
    result = run_single_fold_training(config, args.fold)
    print(result["checkpoint"])
    return 0


def cmd_fuse_fit(args) -> int:
    config = load_run_config(args.config, out_dir=args.out, threads=args.threads)
    result = run_fusion_fit(config, args.fold, checkpoint_path=args.checkpoint)
    print(result["fusion_weights"])
    return 0


def cmd_predict(args) -> int:
    net = load_checkpoint(args.checkpoint)
    weights = FusionWeights.load(args.weights)
    axes, iso_spacing, margin_frac = load_views_file(args.views)
    subject_dir = Path(args.subject_dir)
    record = find_subject_record(subject_dir.parent, subject_dir.name)
    volume, _ = load_subject(record, use_first_k=net.config.in_channels)
    volume = normalize_channels(volume)
    mask, _ = predict_fused_mask(net, volume, axes, weights, iso_spacing, margin_frac,
                                 threads=args.threads)
    write_nifti(Volume(data=mask.labels.astype(np.float32)[None], spacing=volume.spacing),
                args.out)
    print(args.out)
    return 0


def _nifti_id(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return name[:-4] if name.endswith("-seg") else name


def _collect_mask_paths(directory: Path) -> dict[str, Path]:
    out = {}
    subdirs = [p for p in directory.iterdir() if p.is_dir()]
    if subdirs:
        for sub in subdirs:
            for suffix in (".nii", ".nii.gz"):
                p = sub / f"{sub.name}-seg{suffix}"
                if p.exists():
                    out[sub.name] = p
                    break
    for p in directory.iterdir():
        if p.is_file() and (p.name.endswith(".nii") or p.name.endswith(".nii.gz")):
            out.setdefault(_nifti_id(p), p)
    return out


def _read_mask(path: Path) -> SegmentationMask:
    vol = read_nifti(path)
    return SegmentationMask(labels=np.rint(vol.data[0]).astype(np.int32))


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise ConfigError(f"prediction and ground-truth directories must exist: {pred_dir}, {gt_dir}")
    preds = _collect_mask_paths(pred_dir)
    gts = _collect_mask_paths(gt_dir)
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt or missing_pred:
        if missing_gt:
            print(f"error: no ground truth for ids: {', '.join(missing_gt)}", file=sys.stderr)
        if missing_pred:
            print(f"error: no prediction for ids: {', '.join(missing_pred)}", file=sys.stderr)
        return 1

    ids = sorted(preds)
    triples = [evaluate_subject(_read_mask(preds[sid]), _read_mask(gts[sid])) for sid in ids]
    report = aggregate_report(triples)
    rendered = render_report(report, args.format)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "md" if args.format == "markdown" else "csv"
    (out_dir / f"report.{ext}").write_text(rendered)
    (out_dir / "per_subject.csv").write_text(per_subject_csv(ids, triples))
    sys.stdout.write(rendered)
    return 0


def cmd_report(args) -> int:
    lines = Path(args.scores).read_text().strip().splitlines()
    if not lines or not lines[0].startswith("subject_id"):
        raise ConfigError(f"{args.scores} is not a per-subject score CSV")
    triples = []
    for line in lines[1:]:
        parts = line.split(",")
        triples.append([float(x) for x in parts[1:4]])
    report = aggregate_report(triples)
    rendered = render_report(report, args.format)
    if args.out:
        Path(args.out).write_text(rendered)
    sys.stdout.write(rendered)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpseg",
                                     description="Multi-planar 2D U-Net segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True, help="number of subjects")
    p.add_argument("--size", type=int, default=32, help="cube edge in voxels")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--difficulty", choices=["easy", "medium"], default="easy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_phantom)

    for name, func, extra in (("cv", cmd_cv, None), ("train", cmd_train, "fold"),
                              ("fuse-fit", cmd_fuse_fit, "fold")):
        p = sub.add_parser(name, help=f"run {name} from a JSON run config")
        p.add_argument("--config", required=True, help="run config JSON path")
        p.add_argument("--out", default=None, help="override out_dir from the config")
        p.add_argument("--threads", type=int, default=_default_threads())
        if extra == "fold":
            p.add_argument("--fold", type=int, required=True, choices=[0, 1, 2])
        if name == "fuse-fit":
            p.add_argument("--checkpoint", default=None, help="checkpoint path override")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="predict one subject with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--weights", required=True, help="fusion weights JSON")
    p.add_argument("--views", required=True, help="views JSON written by cv/train")
    p.add_argument("--subject-dir", required=True)
    p.add_argument("--out", required=True, help="output mask NIfTI path")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Dice-evaluate predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.add_argument("--out-dir", default="evaluation", help="where reports are written")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate a per-subject score CSV into a report")
    p.add_argument("--scores", required=True, help="per-subject CSV path")
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MpsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
