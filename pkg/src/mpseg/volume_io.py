"""NIfTI-1 subset I/O and multi-modality subject assembly.

Supported file shape: single-file NIfTI-1 (348-byte header + data), magic
"n+1\\0" or "ni1\\0", datatypes uint8 (2), int16 (4), float32 (16), 3D or 4D
dims, optional gzip compression by ".gz" suffix. Both endiannesses are read
(detected via dim[0] in [1, 7]); files are always written little-endian with
float32 data, vox_offset 352 and magic "n+1\\0".

Orientation is reduced to voxel spacing plus a translation offset
(qoffset_{x,y,z}); rotation matrices are deliberately not interpreted, all
downstream geometry lives in voxel space.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    IoFailureError,
    MalformedHeaderError,
    MissingModalityError,
    ShapeMismatchError,
    TruncatedFileError,
    UnsupportedDatatypeError,
)
from .metrics import SegmentationMask

# BraTS 2023 suffixes in alphabetical order; "first three" selects t1c/t1n/t2f.
CANONICAL_MODALITIES = ("t1c", "t1n", "t2f", "t2w")

_HEADER_SIZE = 348
_DATA_OFFSET = 352
_MAGICS = (b"n+1\x00", b"ni1\x00")
_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


@dataclass
class Volume:
    """Multi-channel scalar grid: data indexed (channel, i, j, k).

    spacing is millimeters per voxel along i/j/k; origin_offset is a pure
    translation in millimeters and carries no pipeline semantics.
    """

    data: np.ndarray
    spacing: np.ndarray
    origin_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 4D (channel, i, j, k), got ndim={self.data.ndim}")
        self.spacing = np.asarray(self.spacing, dtype=float).reshape(3)
        self.origin_offset = np.asarray(self.origin_offset, dtype=float).reshape(3)
        if not np.all(self.spacing > 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class SubjectRecord:
    """Paths making up one subject, modalities in canonical order."""

    subject_id: str
    modality_paths: list[tuple[str, Path]]
    seg_path: Path | None = None

    def __post_init__(self):
        names = [m for m, _ in self.modality_paths]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names for subject {self.subject_id}: {names}")


def _open_raw(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e


def read_nifti(path) -> Volume:
    """Read a supported NIfTI-1 file into a Volume.

    Intensities are mapped through the header scaling (value = raw * slope +
    intercept, slope 0 treated as 1); spacing comes from pixdim[1..3].
    """
    path = Path(path)
    raw = _open_raw(path)
    if len(raw) < _HEADER_SIZE:
        raise MalformedHeaderError(f"{path}: file shorter than the 348-byte header")

    magic = raw[344:348]
    if magic not in _MAGICS:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")

    # Endianness: dim[0] must land in [1, 7] in the file's byte order.
    (dim0_le,) = struct.unpack_from("<h", raw, 40)
    if 1 <= dim0_le <= 7:
        bo = "<"
    else:
        (dim0_be,) = struct.unpack_from(">h", raw, 40)
        if 1 <= dim0_be <= 7:
            bo = ">"
        else:
            raise MalformedHeaderError(f"{path}: dim[0] invalid in both byte orders")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    (datatype,) = struct.unpack_from(bo + "h", raw, 70)
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(bo + "f", raw, 108)
    slope, inter = struct.unpack_from(bo + "2f", raw, 112)
    qoffset = struct.unpack_from(bo + "3f", raw, 268)

    if dim[0] not in (3, 4):
        raise MalformedHeaderError(f"{path}: dim[0]={dim[0]}, only 3D/4D supported")
    shape3 = dim[1:4]
    channels = dim[4] if dim[0] == 4 else 1
    if any(d < 1 for d in shape3) or channels < 1:
        raise MalformedHeaderError(f"{path}: nonpositive dim {dim[:5]}")
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise MalformedHeaderError(f"{path}: nonpositive pixdim {spacing}")
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} not in {sorted(_DTYPES)}")

    offset = int(round(vox_offset))
    if offset < _HEADER_SIZE:
        raise MalformedHeaderError(f"{path}: vox_offset {vox_offset} overlaps the header")

    dt = np.dtype(_DTYPES[datatype]).newbyteorder(bo)
    count = int(np.prod(shape3)) * channels
    need = count * dt.itemsize
    if len(raw) < offset + need:
        raise TruncatedFileError(f"{path}: need {need} data bytes at offset {offset}, have {len(raw) - offset}")

    arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    arr = arr.reshape((*shape3, channels), order="F").transpose(3, 0, 1, 2)
    if slope == 0.0:
        slope = 1.0
    data = arr.astype(np.float32) * np.float32(slope) + np.float32(inter)
    return Volume(data=data, spacing=np.asarray(spacing, float), origin_offset=np.asarray(qoffset, float))


def _build_header(volume: Volume) -> bytes:
    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    c, i, j, k = volume.data.shape
    if c == 1:
        dim = (3, i, j, k, 1, 1, 1, 1)
    else:
        dim = (4, i, j, k, c, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    pixdim = (1.0, *volume.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(_DATA_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 0)  # qform_code=1 (identity quaternion), sform_code=0
    struct.pack_into("<3f", hdr, 268, *volume.origin_offset)
    hdr[344:348] = _MAGICS[0]
    return bytes(hdr)


def write_nifti(volume: Volume, path) -> None:
    """Write a Volume as single-file little-endian float32 NIfTI-1.

    Gzip-compresses when the path ends in ".gz" (with mtime pinned to 0 so
    identical volumes always produce identical bytes).
    """
    path = Path(path)
    payload = _build_header(volume) + b"\x00" * (_DATA_OFFSET - _HEADER_SIZE)
    data = np.ascontiguousarray(volume.data.transpose(1, 2, 3, 0), dtype="<f4")
    payload += data.tobytes(order="F")
    try:
        if path.suffix == ".gz":
            with open(path, "wb") as f:
                with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
                    gz.write(payload)
        else:
            with open(path, "wb") as f:
                f.write(payload)
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def _resolve(base: Path, stem: str) -> Path | None:
    for suffix in (".nii", ".nii.gz"):
        p = base / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def find_subject_record(root, subject_id: str, modalities=CANONICAL_MODALITIES) -> SubjectRecord:
    """Resolve <root>/<id>/<id>-<modality>.nii[.gz] paths for one subject."""
    root = Path(root)
    base = root / subject_id
    paths = []
    for mod in modalities:
        p = _resolve(base, f"{subject_id}-{mod}")
        if p is None:
            raise MissingModalityError(f"subject {subject_id}: modality {mod} not found under {base}")
        paths.append((mod, p))
    seg = _resolve(base, f"{subject_id}-seg")
    return SubjectRecord(subject_id=subject_id, modality_paths=paths, seg_path=seg)


def list_subject_records(root, modalities=CANONICAL_MODALITIES) -> list[SubjectRecord]:
    """All subject records under a dataset root, sorted by subject id."""
    root = Path(root)
    if not root.is_dir():
        raise IoFailureError(f"dataset root {root} is not a directory")
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        records.append(find_subject_record(root, sub.name, modalities))
    return records


def load_subject(record: SubjectRecord, use_first_k: int) -> tuple[Volume, SegmentationMask | None]:
    """Stack the first use_first_k modalities into one Volume; load labels if present.

    All selected modalities must agree on grid shape and spacing.
    """
    if use_first_k < 1:
        raise ValueError(f"use_first_k must be >= 1, got {use_first_k}")
    if use_first_k > len(record.modality_paths):
        raise MissingModalityError(
            f"subject {record.subject_id}: requested {use_first_k} modalities, have {len(record.modality_paths)}"
        )
    channels = []
    spacing = None
    shape = None
    for mod, path in record.modality_paths[:use_first_k]:
        vol = read_nifti(path)
        if vol.num_channels != 1:
            raise ShapeMismatchError(f"{path}: modality file must be single-channel, got {vol.num_channels}")
        if shape is None:
            shape, spacing = vol.grid_shape, vol.spacing
        else:
            if vol.grid_shape != shape:
                raise ShapeMismatchError(
                    f"subject {record.subject_id}: {mod} grid {vol.grid_shape} != {shape}"
                )
            if not np.allclose(vol.spacing, spacing, rtol=1e-5, atol=1e-6):
                raise ShapeMismatchError(
                    f"subject {record.subject_id}: {mod} spacing {vol.spacing} != {spacing}"
                )
        channels.append(vol.data[0])
    volume = Volume(data=np.stack(channels), spacing=spacing)

    mask = None
    if record.seg_path is not None:
        seg_vol = read_nifti(record.seg_path)
        if seg_vol.grid_shape != shape:
            raise ShapeMismatchError(f"subject {record.subject_id}: seg grid {seg_vol.grid_shape} != {shape}")
        labels = np.rint(seg_vol.data[0]).astype(np.int32)
        mask = SegmentationMask(labels=labels)
    return volume, mask


def normalize_channels(volume: Volume) -> Volume:
    """Zero-mean/unit-std per channel over nonzero voxels; zeros stay zero.

    Skull-stripped MRI backgrounds are exact zeros and must not dominate the
    statistics. Constant (or all-zero) channels map to all zeros. Idempotent
    up to float rounding.
    """
    out = np.zeros_like(volume.data)
    for c in range(volume.num_channels):
        ch = volume.data[c]
        mask = ch != 0
        vals = ch[mask].astype(np.float64)
        if vals.size == 0:
            continue
        mu = vals.mean()
        sigma = vals.std()
        if sigma == 0.0:
            continue
        out[c][mask] = ((vals - mu) / sigma).astype(np.float32)
    return Volume(data=out, spacing=volume.spacing.copy(), origin_offset=volume.origin_offset.copy())
