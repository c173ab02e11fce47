"""Loss, optimizers, the multi-view slice dataset and the 3-fold CV protocol."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidConfigError, LabelOutOfRangeError, TooFewSubjectsError
from .multiplanar import resample_mask_to_view, resample_to_view
from .unet2d import UNet, pad_to_pool_multiple, softmax

SOFT_DICE_EPS = 1e-6


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def make_folds(subject_ids: Sequence[str], seed: int) -> list[FoldSplit]:
    """Seeded 3-way partition with rotating train/val/test roles.

    Subjects are sorted before shuffling so the split depends only on the id
    set and the seed, not on filesystem enumeration order. Each subject
    appears in exactly one test set across the three folds.
    """
    ids = sorted(str(s) for s in subject_ids)
    if len(ids) < 3:
        raise TooFewSubjectsError(f"3-fold CV needs >= 3 subjects, got {len(ids)}")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    groups = [list(g) for g in np.array_split(np.asarray(shuffled, dtype=object), 3)]
    folds = []
    for f in range(3):
        folds.append(FoldSplit(
            fold_index=f,
            test_ids=tuple(groups[f]),
            val_ids=tuple(groups[(f + 1) % 3]),
            train_ids=tuple(groups[(f + 2) % 3]),
        ))
    return folds


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    early_stop_patience: int = 5
    class_weights: list[float] | None = None
    bg_retention: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        # learning_rate 0 is allowed and must be an exact no-op update
        if self.learning_rate < 0:
            raise InvalidConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise InvalidConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.bg_retention <= 1.0:
            raise InvalidConfigError(f"bg_retention must be in [0, 1], got {self.bg_retention}")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise InvalidConfigError("class_weights must be positive")
        if self.seed < 0:
            raise InvalidConfigError("seed must be nonnegative")


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray, class_weights=None):
    """Weighted pixel-mean cross entropy and its exact gradient wrt logits.

    probs must come from softmax; the returned gradient is
    (p - onehot) * w_label / n_pixels.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    n_classes = probs.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelOutOfRangeError(
            f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]"
        )
    onehot = labels[:, None] == np.arange(n_classes)[None, :, None, None]
    if class_weights is None:
        w_pix = 1.0
    else:
        w = np.asarray(class_weights, dtype=probs.dtype)
        if w.shape != (n_classes,):
            raise InvalidConfigError(f"class_weights must have length {n_classes}")
        w_pix = w[labels]
    n_pix = labels.size
    p_true = np.where(onehot, probs, 0.0).sum(axis=1)
    loss = float(-(w_pix * np.log(p_true + 1e-12)).sum() / n_pix)
    if class_weights is None:
        grad = (probs - onehot) / n_pix
    else:
        grad = (probs - onehot) * w_pix[:, None] / n_pix
    return loss, grad


class SliceDataset:
    """Precomputed (image slice, label slice) pairs across subjects and views.

    Labels are resampled nearest-neighbor on the same grid as the image
    channels, so no new label values can appear.
    """

    def __init__(self, subjects, view_axes, iso_spacing=None, margin_frac=0.05):
        self.images: list[np.ndarray] = []   # (channels, slices, rows, cols) float32
        self.labels: list[np.ndarray] = []   # (slices, rows, cols) int16
        self.entries: list[tuple[int, int]] = []
        fg = []
        for volume, labels in subjects:
            lab = labels.labels if hasattr(labels, "labels") else np.asarray(labels)
            for axis in view_axes:
                stack = resample_to_view(volume, axis, iso_spacing=iso_spacing, margin_frac=margin_frac)
                lab_stack = resample_mask_to_view(lab, volume.spacing, stack.geometry).astype(np.int16)
                si = len(self.images)
                self.images.append(stack.slices.astype(np.float32))
                self.labels.append(lab_stack)
                for s in range(stack.geometry.extent[0]):
                    self.entries.append((si, s))
                    fg.append(bool((lab_stack[s] > 0).any()))
        self.foreground = np.asarray(fg, dtype=bool)

    def __len__(self):
        return len(self.entries)

    def pair(self, index):
        si, s = self.entries[index]
        return self.images[si][:, s], self.labels[si][s]

    def epoch_indices(self, seed: int, epoch: int, bg_retention: float = 1.0) -> np.ndarray:
        """Seeded shuffled slice order; background-only slices subsampled."""
        rng = np.random.default_rng((seed, epoch))
        if bg_retention >= 1.0:
            keep = np.arange(len(self.entries))
        else:
            draws = rng.random(len(self.entries))
            keep = np.flatnonzero(self.foreground | (draws < bg_retention))
        return keep[rng.permutation(len(keep))]

    def iter_epoch(self, seed: int, epoch: int, bg_retention: float = 1.0):
        for i in self.epoch_indices(seed, epoch, bg_retention):
            yield self.pair(i)

    def iter_all(self):
        for i in range(len(self.entries)):
            yield self.pair(i)


def slice_dataset(subjects, view_axes, iso_spacing=None, margin_frac=0.05) -> SliceDataset:
    return SliceDataset(subjects, view_axes, iso_spacing=iso_spacing, margin_frac=margin_frac)


class SgdMomentum:
    def __init__(self, learning_rate: float, momentum: float = 0.9):
        self.lr = learning_rate
        self.momentum = momentum
        self._velocity = {}

    def step(self, params):
        for name, p, g in params:
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g
            self._velocity[name] = v
            p -= (self.lr * v).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, params):
        self._t += 1
        b1t = 1.0 - self.beta1**self._t
        b2t = 1.0 - self.beta2**self._t
        for name, p, g in params:
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            v = self._v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            update = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p -= update.astype(p.dtype, copy=False)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, config.beta1, config.beta2)
    return SgdMomentum(config.learning_rate, config.momentum)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_soft_dice: list[list[float]] = field(default_factory=list)
    best_epoch: int = -1

    def num_epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        n_classes = len(self.val_soft_dice[0]) if self.val_soft_dice else 0
        header = "epoch,train_loss,val_loss," + ",".join(f"val_softdice_{c}" for c in range(n_classes))
        lines = [header]
        for e in range(self.num_epochs()):
            dice_cols = ",".join(f"{d:.6f}" for d in self.val_soft_dice[e])
            lines.append(f"{e},{self.train_loss[e]:.6f},{self.val_loss[e]:.6f},{dice_cols}")
        return "\n".join(lines) + "\n"


def _batched(pairs, batch_size):
    """Group consecutive same-shape slices into batches."""
    xs, ys = [], []
    for img, lab in pairs:
        if xs and (img.shape != xs[0].shape or len(xs) == batch_size):
            yield np.stack(xs), np.stack(ys)
            xs, ys = [], []
        xs.append(img)
        ys.append(lab)
    if xs:
        yield np.stack(xs), np.stack(ys)


def _forward_cropped(net: UNet, x: np.ndarray, train_mode: bool):
    padded, (h, w) = pad_to_pool_multiple(x, net.config.depth)
    logits = net.forward(padded, train_mode=train_mode)
    return logits, logits[:, :, :h, :w]


def evaluate_slices(net: UNet, ds: SliceDataset, config: TrainConfig, batch_size: int | None = None):
    """Loss and global per-class soft Dice over every slice of a dataset."""
    n_classes = net.config.num_classes
    total_loss = 0.0
    total_pix = 0
    inter = np.zeros(n_classes)
    p_sum = np.zeros(n_classes)
    y_sum = np.zeros(n_classes)
    for x, y in _batched(ds.iter_all(), batch_size or config.batch_size):
        _, logits = _forward_cropped(net, x, train_mode=False)
        probs = softmax(logits)
        loss, _ = cross_entropy_loss(probs, y, config.class_weights)
        total_loss += loss * y.size
        total_pix += y.size
        onehot = y[:, None] == np.arange(n_classes)[None, :, None, None]
        inter += (probs * onehot).sum(axis=(0, 2, 3))
        p_sum += probs.sum(axis=(0, 2, 3))
        y_sum += onehot.sum(axis=(0, 2, 3))
    soft_dice = (2.0 * inter + SOFT_DICE_EPS) / (p_sum + y_sum + SOFT_DICE_EPS)
    return total_loss / max(total_pix, 1), soft_dice.tolist()


def train(net: UNet, train_subjects, val_subjects, view_axes, config: TrainConfig,
          iso_spacing=None, margin_frac=0.05) -> TrainHistory:
    """Mini-batch epochs over multi-view slices with best-epoch keeping.

    Tracks validation loss after every epoch, keeps the parameters of the
    best epoch, and stops early after early_stop_patience epochs without
    improvement. The network is left holding the best parameters.
    """
    train_ds = SliceDataset(train_subjects, view_axes, iso_spacing=iso_spacing, margin_frac=margin_frac)
    val_ds = SliceDataset(val_subjects, view_axes, iso_spacing=iso_spacing, margin_frac=margin_frac)
    return train_on_datasets(net, train_ds, val_ds, config)


def train_on_datasets(net: UNet, train_ds: SliceDataset, val_ds: SliceDataset,
                      config: TrainConfig) -> TrainHistory:
    opt = make_optimizer(config)
    history = TrainHistory()
    best_loss = np.inf
    best_weights = net.get_weights()
    stale = 0
    for epoch in range(config.epochs):
        total_loss = 0.0
        total_pix = 0
        for x, y in _batched(train_ds.iter_epoch(config.seed, epoch, config.bg_retention),
                             config.batch_size):
            net.zero_grads()
            logits_full, logits = _forward_cropped(net, x, train_mode=True)
            probs = softmax(logits)
            loss, dlogits = cross_entropy_loss(probs, y, config.class_weights)
            if dlogits.shape != logits_full.shape:
                canvas = np.zeros_like(logits_full)
                canvas[:, :, : dlogits.shape[2], : dlogits.shape[3]] = dlogits
                dlogits = canvas
            net.backward(dlogits)
            opt.step(net.parameters())
            total_loss += loss * y.size
            total_pix += y.size
        history.train_loss.append(total_loss / max(total_pix, 1))
        # forward-only evaluation tolerates (and benefits from) larger batches
        val_loss, val_dice = evaluate_slices(net, val_ds, config, batch_size=max(16, config.batch_size))
        history.val_loss.append(val_loss)
        history.val_soft_dice.append(val_dice)
        if val_loss < best_loss:
            best_loss = val_loss
            best_weights = net.get_weights()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    net.set_weights(best_weights)
    net.clear_caches()
    return history
