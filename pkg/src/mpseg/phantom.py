"""Deterministic synthetic subjects with nested tumor regions.

Each subject is a smooth brain ellipsoid of nonzero tissue intensity on an
exact-zero background (mimicking skull-stripped MRI), containing a randomly
placed tumor built from three nested ellipsoids: an NCR core (label 1)
wrapped by an ET shell (label 3) inside an ED halo (label 2). Four modality
channels carry fixed per-region mean intensities plus seeded Gaussian noise
confined to the brain.

Per-region channel means (easy difficulty), channels ordered t1c/t1n/t2f/t2w:

    tissue  0.40 0.45 0.35 0.30
    NCR     0.20 0.25 0.55 0.65
    ED      0.30 0.35 0.80 0.90   (brightest on t2w, channel 3)
    ET      0.95 0.60 0.50 0.45   (brightest on t1c, channel 0)

Medium difficulty halves each tumor region's contrast against tissue.
Geometry and noise are a pure function of (seed, subject_index).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, TumorDoesNotFitError
from .metrics import SegmentationMask
from .volume_io import CANONICAL_MODALITIES, Volume, write_nifti

REGION_INTENSITIES = {
    "tissue": np.array([0.40, 0.45, 0.35, 0.30]),
    "NCR": np.array([0.20, 0.25, 0.55, 0.65]),
    "ED": np.array([0.30, 0.35, 0.80, 0.90]),
    "ET": np.array([0.95, 0.60, 0.50, 0.45]),
}

# normalized tumor radii: rho <= NCR is core, <= ET is enhancing shell, <= 1 is edema
_NCR_FRAC = 0.40
_ET_FRAC = 0.68

_BRAIN_SEMI_RANGE = (0.36, 0.42)   # fraction of grid edge
_TUMOR_RADIUS_RANGE = (0.12, 0.16)
_TUMOR_AXIS_JITTER = (0.95, 1.05)

_PLACEMENT_ATTEMPTS = 50


@dataclass
class PhantomConfig:
    grid_size: int = 32
    noise_std: float = 0.05
    difficulty: str = "easy"
    seed: int = 0
    n_modalities: int = 4

    def __post_init__(self):
        if self.grid_size < 16:
            raise InvalidConfigError(f"grid_size must be >= 16, got {self.grid_size}")
        if self.noise_std < 0:
            raise InvalidConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.difficulty not in ("easy", "medium"):
            raise InvalidConfigError(f"difficulty must be easy or medium, got {self.difficulty!r}")
        if self.n_modalities != 4:
            raise InvalidConfigError("phantoms always carry 4 modalities")
        if self.seed < 0:
            raise InvalidConfigError("seed must be nonnegative")


def _place_tumor(rng, brain_semi, tumor_semi, max_attempts=_PLACEMENT_ATTEMPTS):
    """Tumor center in brain-normalized coordinates, or TumorDoesNotFit.

    Containment uses the conservative bound |(t-C)/A| + r_max/min(A) <= 1,
    which guarantees the whole tumor ellipsoid sits inside the brain.
    """
    limit = 1.0 - float(np.max(tumor_semi) / np.min(brain_semi))
    for _ in range(max_attempts):
        q = rng.uniform(-1.0, 1.0, 3)
        if np.linalg.norm(q) <= limit:
            return q
    raise TumorDoesNotFitError(
        f"no tumor placement found in {max_attempts} attempts (limit {limit:.3f})"
    )


def _region_means(difficulty: str) -> dict[str, np.ndarray]:
    if difficulty == "easy":
        return {k: v.copy() for k, v in REGION_INTENSITIES.items()}
    tissue = REGION_INTENSITIES["tissue"]
    out = {"tissue": tissue.copy()}
    for name in ("NCR", "ED", "ET"):
        out[name] = tissue + 0.5 * (REGION_INTENSITIES[name] - tissue)
    return out


def generate_subject(config: PhantomConfig, subject_index: int) -> tuple[Volume, SegmentationMask]:
    """One 4-channel subject volume plus its label mask."""
    rng = np.random.default_rng((config.seed, subject_index))
    g = config.grid_size
    coords = np.stack(np.meshgrid(*(np.arange(g, dtype=float),) * 3, indexing="ij"), axis=-1)

    brain_center = g / 2.0 + rng.uniform(-0.02, 0.02, 3) * g
    brain_semi = rng.uniform(*_BRAIN_SEMI_RANGE, 3) * g
    brain_rho = np.linalg.norm((coords - brain_center) / brain_semi, axis=-1)
    brain = brain_rho <= 1.0

    radius = rng.uniform(*_TUMOR_RADIUS_RANGE) * g
    tumor_semi = radius * rng.uniform(*_TUMOR_AXIS_JITTER, 3)
    q = _place_tumor(rng, brain_semi, tumor_semi)
    tumor_center = brain_center + q * brain_semi
    tumor_rho = np.linalg.norm((coords - tumor_center) / tumor_semi, axis=-1)

    labels = np.zeros((g, g, g), dtype=np.int16)
    labels[tumor_rho <= 1.0] = 2
    labels[tumor_rho <= _ET_FRAC] = 3
    labels[tumor_rho <= _NCR_FRAC] = 1

    means = _region_means(config.difficulty)
    data = np.zeros((4, g, g, g), dtype=np.float64)
    for name, region in (("tissue", brain & (labels == 0)), ("NCR", labels == 1),
                         ("ED", labels == 2), ("ET", labels == 3)):
        for c in range(4):
            data[c][region] = means[name][c]
    if config.noise_std > 0:
        noise = rng.standard_normal((4, g, g, g)) * config.noise_std
        noise[:, ~brain] = 0.0
        data += noise

    volume = Volume(data=data.astype(np.float32), spacing=np.ones(3))
    return volume, SegmentationMask(labels=labels)


def generate_dataset(n_subjects: int, config: PhantomConfig, out_dir) -> dict:
    """Write subjects in the BraTS-style layout and return the manifest.

    Layout per subject: <out>/<id>/<id>-<modality>.nii.gz plus <id>-seg.nii.gz;
    the manifest (also written to <out>/manifest.json) lists ids and paths.
    """
    if n_subjects < 1:
        raise InvalidConfigError(f"n_subjects must be >= 1, got {n_subjects}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for i in range(n_subjects):
        sid = f"sub-{i:03d}"
        volume, mask = generate_subject(config, i)
        sub_dir = out_dir / sid
        sub_dir.mkdir(exist_ok=True)
        modality_files = {}
        for c, mod in enumerate(CANONICAL_MODALITIES):
            rel = f"{sid}/{sid}-{mod}.nii.gz"
            write_nifti(Volume(data=volume.data[c][None], spacing=volume.spacing), out_dir / rel)
            modality_files[mod] = rel
        seg_rel = f"{sid}/{sid}-seg.nii.gz"
        write_nifti(Volume(data=mask.labels.astype(np.float32)[None], spacing=volume.spacing),
                    out_dir / seg_rel)
        subjects.append({"id": sid, "modalities": modality_files, "seg": seg_rel})
    manifest = {
        "dataset": "phantom",
        "n_subjects": n_subjects,
        "config": asdict(config),
        "subjects": subjects,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
