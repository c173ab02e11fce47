"""Combine per-view probability volumes into one 3D prediction.

The baseline is the per-voxel arithmetic mean; the learned variant is a
convex per-(view, class) combination fitted by projected gradient ascent on
mean soft Dice over validation subjects. Weights are kept nonnegative and
normalized to sum to 1 over views per class, so the uniform baseline is a
feasible point and the fitted result can never fall below it (best-iterate
rule).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyListError, ShapeMismatchError
from .metrics import BRATS_LABEL_SCHEME, SegmentationMask

SOFT_DICE_EPS = 1e-6


@dataclass
class FusionWeights:
    """Convex combination coefficients, shape (views, classes)."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 2:
            raise ValueError(f"weights must be 2D (view, class), got {self.w.shape}")
        if (self.w < 0).any():
            raise ValueError("fusion weights must be nonnegative")
        col = self.w.sum(axis=0)
        if not np.allclose(col, 1.0, atol=1e-6):
            raise ValueError(f"per-class weights must sum to 1 over views, got {col}")

    @property
    def num_views(self):
        return self.w.shape[0]

    @property
    def num_classes(self):
        return self.w.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "views": self.num_views,
            "classes": self.num_classes,
            "weights": self.w.ravel().tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "FusionWeights":
        rec = json.loads(text)
        w = np.asarray(rec["weights"], dtype=float).reshape(rec["views"], rec["classes"])
        return cls(w)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "FusionWeights":
        return cls.from_json(Path(path).read_text())


def _check_same_shapes(vols):
    shape = vols[0].shape
    for v in vols[1:]:
        if v.shape != shape:
            raise ShapeMismatchError(f"probability volumes disagree: {v.shape} vs {shape}")
    return shape


def mean_fusion(vols) -> np.ndarray:
    """Per-voxel per-class arithmetic mean of probability volumes."""
    if len(vols) == 0:
        raise EmptyListError("mean_fusion needs at least one volume")
    _check_same_shapes(vols)
    out = np.zeros_like(np.asarray(vols[0], dtype=np.float64))
    for v in vols:
        out += v
    return out / len(vols)


def apply_fusion(vols, weights: FusionWeights) -> np.ndarray:
    """fused[c] = sum_v w[v, c] * vols[v][c]; class sums may deviate from 1."""
    if len(vols) == 0:
        raise EmptyListError("apply_fusion needs at least one volume")
    shape = _check_same_shapes(vols)
    if weights.num_views != len(vols):
        raise ShapeMismatchError(f"weights describe {weights.num_views} views, got {len(vols)} volumes")
    if weights.num_classes != shape[0]:
        raise ShapeMismatchError(f"weights describe {weights.num_classes} classes, volumes have {shape[0]}")
    out = np.zeros(shape, dtype=np.float64)
    for v, vol in enumerate(vols):
        out += weights.w[v][:, None, None, None] * np.asarray(vol, dtype=np.float64)
    return out


def soft_dice(probs: np.ndarray, onehot_labels: np.ndarray) -> np.ndarray:
    """Per-class soft Dice: (2 sum(p*y) + eps) / (sum p + sum y + eps)."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot_labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatchError(f"probs {p.shape} vs labels {y.shape}")
    axes = tuple(range(1, p.ndim))
    inter = (p * y).sum(axis=axes)
    return (2.0 * inter + SOFT_DICE_EPS) / (p.sum(axis=axes) + y.sum(axis=axes) + SOFT_DICE_EPS)


def labels_to_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[None] == np.arange(num_classes)[:, None, None, None]).astype(np.float64)


def _fit_stats(subject_vols, subject_labels, num_classes):
    """Sufficient statistics per subject: inter[v,c], psum[v,c], ysum[c].

    The fused field is linear in the weights, so soft Dice over any weight
    vector is a ratio of linear forms in these reductions; no volume needs
    to be touched again during the ascent.
    """
    inter, psum, ysum = [], [], []
    for vols, labels in zip(subject_vols, subject_labels):
        _check_same_shapes(vols)
        lab = labels.labels if hasattr(labels, "labels") else np.asarray(labels)
        y = labels_to_onehot(lab, num_classes)
        s1 = np.empty((len(vols), num_classes))
        s2 = np.empty((len(vols), num_classes))
        for v, vol in enumerate(vols):
            p = np.asarray(vol, dtype=np.float64)
            if p.shape[0] != num_classes:
                raise ShapeMismatchError(f"volume has {p.shape[0]} classes, expected {num_classes}")
            s1[v] = (p * y).sum(axis=(1, 2, 3))
            s2[v] = p.sum(axis=(1, 2, 3))
        inter.append(s1)
        psum.append(s2)
        ysum.append(y.sum(axis=(1, 2, 3)))
    return np.stack(inter), np.stack(psum), np.stack(ysum)


def _objective_and_grad(w, inter, psum, ysum):
    # dice_sc = (2 w[:,c].inter[s,:,c] + eps) / (w[:,c].psum[s,:,c] + ysum[s,c] + eps)
    num = 2.0 * np.einsum("svc,vc->sc", inter, w) + SOFT_DICE_EPS
    den = np.einsum("svc,vc->sc", psum, w) + ysum + SOFT_DICE_EPS
    obj = float((num / den).mean())
    grad = (2.0 * inter * den[:, None] - psum * num[:, None]) / (den[:, None] ** 2)
    return obj, grad.mean(axis=0) / w.shape[1]


def fusion_objective(subject_vols, subject_labels, weights: FusionWeights) -> float:
    """Mean per-class soft Dice of the fused volumes over subjects."""
    inter, psum, ysum = _fit_stats(subject_vols, subject_labels, weights.num_classes)
    obj, _ = _objective_and_grad(weights.w, inter, psum, ysum)
    return obj


def fit_fusion_weights(subject_vols, subject_labels, num_classes: int | None = None,
                       iterations: int = 100, step_size: float = 0.5) -> FusionWeights:
    """Projected gradient ascent from the uniform initializer, best iterate kept.

    subject_vols: per subject, the list of per-view probability volumes
    (class, i, j, k); subject_labels: matching label volumes or masks. The
    returned weights never score below the uniform baseline.
    """
    if len(subject_vols) == 0:
        raise EmptyListError("fit_fusion_weights needs at least one validation subject")
    n_views = len(subject_vols[0])
    if num_classes is None:
        num_classes = np.asarray(subject_vols[0][0]).shape[0]
    inter, psum, ysum = _fit_stats(subject_vols, subject_labels, num_classes)
    if inter.shape[1] != n_views:
        raise ShapeMismatchError("subjects disagree on the number of views")

    w = np.full((n_views, num_classes), 1.0 / n_views)
    best_obj, grad = _objective_and_grad(w, inter, psum, ysum)
    best_w = w.copy()
    for _ in range(iterations):
        w = w + step_size * grad
        w = np.clip(w, 0.0, None)
        col = w.sum(axis=0)
        flat = col <= 0
        if flat.any():
            w[:, flat] = 1.0 / n_views
            col[flat] = 1.0
        w = w / col
        obj, grad = _objective_and_grad(w, inter, psum, ysum)
        if obj > best_obj:
            best_obj = obj
            best_w = w.copy()
    return FusionWeights(best_w)


def argmax_labels(vol: np.ndarray, label_scheme=None) -> SegmentationMask:
    """Per-voxel argmax over classes; ties break toward the lowest index."""
    p = np.asarray(vol)
    if not np.isfinite(p).all():
        raise ValueError("probability volume contains non-finite values")
    labels = p.argmax(axis=0).astype(np.int32)
    if label_scheme is None:
        if p.shape[0] == len(BRATS_LABEL_SCHEME):
            label_scheme = dict(BRATS_LABEL_SCHEME)
        else:
            label_scheme = {c: f"class{c}" for c in range(p.shape[0])}
    return SegmentationMask(labels=labels, label_scheme=label_scheme)
