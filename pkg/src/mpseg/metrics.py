"""Composite-region Dice evaluation and report aggregation.

Label codes follow the BraTS 2023 convention: 0 background, 1 necrotic core
(NCR), 2 peritumoral edema (ED), 3 enhancing tumor (ET). The three evaluation
regions are nested composites of those labels:

    ET = {3}    TC = {1, 3}    WT = {1, 2, 3}
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyListError, ShapeMismatchError, UnknownLabelError

BRATS_LABEL_SCHEME = {0: "background", 1: "NCR", 2: "ED", 3: "ET"}

REGION_NAMES = ("ET", "TC", "WT")


@dataclass
class SegmentationMask:
    """Integer label volume plus the scheme describing its codes."""

    labels: np.ndarray
    label_scheme: dict[int, str] = field(default_factory=lambda: dict(BRATS_LABEL_SCHEME))

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise UnknownLabelError("mask labels must be integers")
        present = np.unique(self.labels)
        unknown = [int(v) for v in present if int(v) not in self.label_scheme]
        if unknown:
            raise UnknownLabelError(f"labels {unknown} not in scheme {sorted(self.label_scheme)}")

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class RegionSpec:
    name: str
    member_labels: frozenset[int]


ET_REGION = RegionSpec("ET", frozenset({3}))
TC_REGION = RegionSpec("TC", frozenset({1, 3}))
WT_REGION = RegionSpec("WT", frozenset({1, 2, 3}))
BRATS_REGIONS = (ET_REGION, TC_REGION, WT_REGION)


def region_mask(seg: SegmentationMask, region: RegionSpec) -> np.ndarray:
    """Binary mask of voxels whose label belongs to the region."""
    if not region.member_labels <= set(seg.label_scheme):
        missing = sorted(region.member_labels - set(seg.label_scheme))
        raise UnknownLabelError(f"region {region.name} references labels {missing} outside the scheme")
    return np.isin(seg.labels, sorted(region.member_labels))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary masks.

    Both empty -> 1.0 (correctly predicted absence); exactly one empty -> 0.0.
    """
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def evaluate_subject(pred: SegmentationMask, gt: SegmentationMask) -> tuple[float, float, float]:
    """Dice over the (ET, TC, WT) region pairs of one subject."""
    if pred.labels.shape != gt.labels.shape:
        raise ShapeMismatchError(f"prediction shape {pred.labels.shape} != ground truth {gt.labels.shape}")
    return tuple(dice(region_mask(pred, r), region_mask(gt, r)) for r in BRATS_REGIONS)


@dataclass
class DiceReport:
    """Per-subject (ET, TC, WT) triples with mean/std aggregates."""

    triples: np.ndarray  # (n_subjects, 3)
    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,)
    region_names: tuple[str, str, str] = REGION_NAMES


def aggregate_report(triples) -> DiceReport:
    """Mean and sample (n-1) standard deviation per region; n=1 gives std 0."""
    arr = np.asarray(triples, dtype=float)
    if arr.size == 0:
        raise EmptyListError("no subjects to aggregate")
    arr = arr.reshape(-1, 3)
    mean = arr.mean(axis=0)
    if arr.shape[0] == 1:
        std = np.zeros(3)
    else:
        std = arr.std(axis=0, ddof=1)
    return DiceReport(triples=arr, mean=mean, std=std)


def render_report(report: DiceReport, format: str = "markdown") -> str:
    """Table with columns Dice_ET/Dice_TC/Dice_WT and rows Mean/Std, 3 decimals."""
    cols = [f"Dice_{n}" for n in report.region_names]
    rows = [("Mean", report.mean), ("Std", report.std)]
    if format == "csv":
        lines = ["," + ",".join(cols)]
        for name, vals in rows:
            lines.append(name + "," + ",".join(f"{v:.3f}" for v in vals))
        return "\n".join(lines) + "\n"
    if format == "markdown":
        header = "| | " + " | ".join(cols) + " |"
        sep = "| --- | " + " | ".join("---" for _ in cols) + " |"
        lines = [header, sep]
        for name, vals in rows:
            lines.append(f"| {name} | " + " | ".join(f"{v:.3f}" for v in vals) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format: {format!r}")


def per_subject_csv(subject_ids, triples) -> str:
    """CSV dump of per-subject scores: subject_id, dice_et, dice_tc, dice_wt."""
    arr = np.asarray(triples, dtype=float).reshape(-1, 3)
    if len(subject_ids) != arr.shape[0]:
        raise ShapeMismatchError("subject id count does not match score rows")
    lines = ["subject_id,dice_et,dice_tc,dice_wt"]
    for sid, row in zip(subject_ids, arr):
        lines.append(f"{sid}," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
