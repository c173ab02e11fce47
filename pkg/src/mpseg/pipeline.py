"""End-to-end orchestration: run configs, per-view inference, CV folds.

Everything a run needs is captured in a RunConfig (JSON on disk); every run
emits a manifest recording the config hash, all seeds, the sampled view axes
and the per-fold artifact paths, which is sufficient to reproduce the run.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, MpsegError
from .fusion import (
    FusionWeights,
    apply_fusion,
    argmax_labels,
    fit_fusion_weights,
    fusion_objective,
)
from .metrics import aggregate_report, evaluate_subject, per_subject_csv, render_report
from .multiplanar import backproject, resample_to_view, sample_views
from .training import TrainConfig, make_folds, train
from .unet2d import UNet, UNetConfig, build_unet, load_checkpoint, pad_to_pool_multiple, save_checkpoint, softmax
from .volume_io import (
    Volume,
    list_subject_records,
    load_subject,
    normalize_channels,
    write_nifti,
)


@dataclass
class ViewSpec:
    count: int = 6
    seed: int = 0
    min_pairwise_angle_deg: float = 30.0


@dataclass
class FusionSpec:
    iterations: int = 100
    step_size: float = 0.5


@dataclass
class RunConfig:
    dataset_root: str
    out_dir: str
    modality_count: int = 3
    views: ViewSpec = field(default_factory=ViewSpec)
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(in_channels=3, num_classes=4))
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    fold_seed: int = 0
    iso_spacing: float | None = None
    margin_frac: float = 0.05
    report_format: str = "markdown"
    threads: int = 1

    def __post_init__(self):
        if self.modality_count < 1:
            raise ConfigError(f"modality_count must be >= 1, got {self.modality_count}")
        if self.unet.in_channels != self.modality_count:
            raise ConfigError(
                f"unet.in_channels ({self.unet.in_channels}) must equal modality_count ({self.modality_count})"
            )
        if self.report_format not in ("markdown", "csv"):
            raise ConfigError(f"report_format must be markdown or csv, got {self.report_format!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTION_TYPES = {"views": ViewSpec, "unet": UNetConfig, "train": TrainConfig, "fusion": FusionSpec}


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    kwargs = {}
    valid = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in data.items():
        cls = _SECTION_TYPES.get(key)
        if cls is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            bad = set(value) - set(cls.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            try:
                value = cls(**value)
            except MpsegError as e:
                raise ConfigError(f"invalid {key!r} section: {e}") from e
        kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid run config: {e}") from e
    except MpsegError as e:
        raise ConfigError(str(e)) from e


def load_run_config(path, **overrides) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    config = run_config_from_dict(data)
    if overrides:
        config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    return config


def load_subjects(dataset_root, modality_count: int, require_seg: bool = True):
    """All subjects under a dataset root, channels normalized for the network."""
    root = Path(dataset_root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist")
    records = list_subject_records(root)
    if not records:
        raise ConfigError(f"dataset root {root} contains no subjects")
    subjects = {}
    for rec in records:
        volume, mask = load_subject(rec, use_first_k=modality_count)
        if require_seg and mask is None:
            raise ConfigError(f"subject {rec.subject_id} has no segmentation")
        subjects[rec.subject_id] = (normalize_channels(volume), mask)
    return [r.subject_id for r in records], subjects


def predict_stack_probs(net: UNet, stack_slices: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Per-slice class probabilities for a resampled stack (channel, S, R, C)."""
    imgs = np.asarray(stack_slices, dtype=np.float32)
    n_slices = imgs.shape[1]
    x_all = imgs.transpose(1, 0, 2, 3)
    out = None
    for i in range(0, n_slices, batch_size):
        x = x_all[i : i + batch_size]
        padded, (h, w) = pad_to_pool_multiple(x, net.config.depth)
        logits = net.forward(padded, train_mode=False)[:, :, :h, :w]
        probs = softmax(logits)
        if out is None:
            out = np.empty((probs.shape[1], n_slices, h, w), dtype=np.float64)
        out[:, i : i + x.shape[0]] = probs.transpose(1, 0, 2, 3)
    return out


def predict_prob_volumes(net: UNet, volume: Volume, view_axes, iso_spacing=None,
                         margin_frac: float = 0.05, batch_size: int = 8,
                         threads: int = 1) -> list[np.ndarray]:
    """One back-projected probability volume per view axis."""

    def one_view(args):
        worker_net, axis = args
        stack = resample_to_view(volume, axis, iso_spacing=iso_spacing, margin_frac=margin_frac)
        probs = predict_stack_probs(worker_net, stack.slices, batch_size)
        return backproject(probs, stack.geometry, volume.grid_shape, volume.spacing)

    if threads > 1 and len(view_axes) > 1:
        # read-only copies per worker; outputs are independent per view
        nets = [net.astype(net.dtype) for _ in view_axes]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one_view, zip(nets, view_axes)))
    return [one_view((net, axis)) for axis in view_axes]


def predict_fused_mask(net: UNet, volume: Volume, view_axes, weights: FusionWeights,
                       iso_spacing=None, margin_frac: float = 0.05,
                       batch_size: int = 8, threads: int = 1):
    vols = predict_prob_volumes(net, volume, view_axes, iso_spacing, margin_frac, batch_size, threads)
    fused = apply_fusion(vols, weights)
    return argmax_labels(fused), fused


def save_views_file(path, config: RunConfig, axes) -> None:
    record = {
        "count": config.views.count,
        "seed": config.views.seed,
        "min_pairwise_angle_deg": config.views.min_pairwise_angle_deg,
        "iso_spacing": config.iso_spacing,
        "margin_frac": config.margin_frac,
        "axes": [list(map(float, a)) for a in axes],
    }
    Path(path).write_text(json.dumps(record, indent=2) + "\n")


def load_views_file(path):
    rec = json.loads(Path(path).read_text())
    axes = [np.asarray(a, dtype=float) for a in rec["axes"]]
    return axes, rec.get("iso_spacing"), rec.get("margin_frac", 0.05)


def _fold_seeds(config: RunConfig, fold_index: int) -> dict:
    return {
        "net_seed": config.unet.seed + fold_index,
        "train_seed": config.train.seed + fold_index,
    }


def run_fold(config: RunConfig, fold, axes, subjects, fold_dir: Path) -> dict:
    """Train, fit fusion on the validation split, predict and score the test split."""
    fold_dir.mkdir(parents=True, exist_ok=True)
    seeds = _fold_seeds(config, fold.fold_index)
    net = build_unet(replace(config.unet, seed=seeds["net_seed"]))
    train_cfg = replace(config.train, seed=seeds["train_seed"])

    t0 = time.time()
    history = train(net,
                    [subjects[s] for s in fold.train_ids],
                    [subjects[s] for s in fold.val_ids],
                    axes, train_cfg,
                    iso_spacing=config.iso_spacing, margin_frac=config.margin_frac)
    train_secs = time.time() - t0

    checkpoint_path = fold_dir / "checkpoint.mpseg"
    save_checkpoint(net, checkpoint_path)
    (fold_dir / "history.csv").write_text(history.to_csv())

    num_classes = config.unet.num_classes
    val_vols = []
    val_labels = []
    for sid in fold.val_ids:
        volume, mask = subjects[sid]
        val_vols.append(predict_prob_volumes(net, volume, axes, config.iso_spacing,
                                             config.margin_frac, config.train.batch_size,
                                             config.threads))
        val_labels.append(mask)
    weights = fit_fusion_weights(val_vols, val_labels, num_classes,
                                 iterations=config.fusion.iterations,
                                 step_size=config.fusion.step_size)
    weights.save(fold_dir / "fusion_weights.json")
    uniform = FusionWeights(np.full_like(weights.w, 1.0 / weights.num_views))
    fit_stats = {
        "fitted_objective": fusion_objective(val_vols, val_labels, weights),
        "uniform_objective": fusion_objective(val_vols, val_labels, uniform),
    }
    (fold_dir / "fusion_fit_stats.json").write_text(json.dumps(fit_stats, indent=2) + "\n")

    pred_dir = fold_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    triples = []
    for sid in fold.test_ids:
        volume, gt = subjects[sid]
        pred, _ = predict_fused_mask(net, volume, axes, weights, config.iso_spacing,
                                     config.margin_frac, config.train.batch_size, config.threads)
        write_nifti(Volume(data=pred.labels.astype(np.float32)[None], spacing=volume.spacing),
                    pred_dir / f"{sid}.nii.gz")
        triples.append(evaluate_subject(pred, gt))

    report = aggregate_report(triples)
    (fold_dir / "report.md").write_text(render_report(report, "markdown"))
    (fold_dir / "report.csv").write_text(render_report(report, "csv"))
    (fold_dir / "per_subject.csv").write_text(per_subject_csv(fold.test_ids, triples))

    return {
        "fold_index": fold.fold_index,
        "seeds": seeds,
        "checkpoint": str(checkpoint_path),
        "fusion_weights": str(fold_dir / "fusion_weights.json"),
        "fit_stats": fit_stats,
        "train_seconds": train_secs,
        "epochs_run": history.num_epochs(),
        "best_epoch": history.best_epoch,
        "test_ids": list(fold.test_ids),
        "triples": [list(t) for t in triples],
    }


def run_cv(config: RunConfig) -> dict:
    """Full 3-fold cross-validation; returns the run manifest (also written)."""
    t_start = time.time()
    ids, subjects = load_subjects(config.dataset_root, config.modality_count)
    folds = make_folds(ids, config.fold_seed)
    axes = sample_views(config.views.count, config.views.seed, config.views.min_pairwise_angle_deg)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_views_file(out / "views.json", config, axes)

    fold_results = []
    all_ids = []
    all_triples = []
    for fold in folds:
        result = run_fold(config, fold, axes, subjects, out / f"fold{fold.fold_index}")
        fold_results.append(result)
        all_ids.extend(result["test_ids"])
        all_triples.extend(result["triples"])

    pooled = aggregate_report(all_triples)
    (out / "pooled_report.md").write_text(render_report(pooled, "markdown"))
    (out / "pooled_report.csv").write_text(render_report(pooled, "csv"))
    (out / "pooled_per_subject.csv").write_text(per_subject_csv(all_ids, all_triples))

    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "subject_ids": ids,
        "view_axes": [list(map(float, a)) for a in axes],
        "fold_splits": [
            {"fold_index": f.fold_index, "train": list(f.train_ids),
             "val": list(f.val_ids), "test": list(f.test_ids)}
            for f in folds
        ],
        "folds": fold_results,
        "pooled": {
            "mean": pooled.mean.tolist(),
            "std": pooled.std.tolist(),
            "regions": list(pooled.region_names),
        },
        "total_seconds": time.time() - t_start,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def run_single_fold_training(config: RunConfig, fold_index: int) -> dict:
    """The `train` subcommand: one fold's network + history, no prediction."""
    if fold_index not in (0, 1, 2):
        raise ConfigError(f"fold_index must be 0, 1 or 2, got {fold_index}")
    ids, subjects = load_subjects(config.dataset_root, config.modality_count)
    fold = make_folds(ids, config.fold_seed)[fold_index]
    axes = sample_views(config.views.count, config.views.seed, config.views.min_pairwise_angle_deg)
    out = Path(config.out_dir)
    fold_dir = out / f"fold{fold_index}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    save_views_file(out / "views.json", config, axes)

    seeds = _fold_seeds(config, fold_index)
    net = build_unet(replace(config.unet, seed=seeds["net_seed"]))
    train_cfg = replace(config.train, seed=seeds["train_seed"])
    history = train(net,
                    [subjects[s] for s in fold.train_ids],
                    [subjects[s] for s in fold.val_ids],
                    axes, train_cfg,
                    iso_spacing=config.iso_spacing, margin_frac=config.margin_frac)
    checkpoint_path = fold_dir / "checkpoint.mpseg"
    save_checkpoint(net, checkpoint_path)
    (fold_dir / "history.csv").write_text(history.to_csv())
    return {"checkpoint": str(checkpoint_path), "history": str(fold_dir / "history.csv"),
            "views": str(out / "views.json"), "epochs_run": history.num_epochs()}


def run_fusion_fit(config: RunConfig, fold_index: int, checkpoint_path=None) -> dict:
    """The `fuse-fit` subcommand: fit fusion weights on one fold's val split."""
    if fold_index not in (0, 1, 2):
        raise ConfigError(f"fold_index must be 0, 1 or 2, got {fold_index}")
    ids, subjects = load_subjects(config.dataset_root, config.modality_count)
    fold = make_folds(ids, config.fold_seed)[fold_index]
    axes = sample_views(config.views.count, config.views.seed, config.views.min_pairwise_angle_deg)
    fold_dir = Path(config.out_dir) / f"fold{fold_index}"
    if checkpoint_path is None:
        checkpoint_path = fold_dir / "checkpoint.mpseg"
    net = load_checkpoint(checkpoint_path)
    val_vols = []
    val_labels = []
    for sid in fold.val_ids:
        volume, mask = subjects[sid]
        val_vols.append(predict_prob_volumes(net, volume, axes, config.iso_spacing,
                                             config.margin_frac, config.train.batch_size,
                                             config.threads))
        val_labels.append(mask)
    weights = fit_fusion_weights(val_vols, val_labels, config.unet.num_classes,
                                 iterations=config.fusion.iterations,
                                 step_size=config.fusion.step_size)
    fold_dir.mkdir(parents=True, exist_ok=True)
    weights_path = fold_dir / "fusion_weights.json"
    weights.save(weights_path)
    return {"fusion_weights": str(weights_path)}
