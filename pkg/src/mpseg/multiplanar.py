"""Multi-view slicing of 3D volumes and probability back-projection.

A "view" is a unit slice-normal plus an in-plane orthonormal basis. Volumes
are resampled onto an isotropic cubic grid centered near the volume center
and large enough to cover the physical bounding sphere, so every view sees
the whole object regardless of orientation.

Physical coordinates are voxel_index * spacing (millimeters, origin at voxel
(0,0,0)). The grid anchor is snapped to the nearest voxel center so that a
canonical-axis view at native spacing samples exactly on grid nodes and the
resample/backproject pair is an identity there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AngleInfeasibleError,
    DegenerateAxisError,
    ExtentOverflowError,
    GeometryMismatchError,
)
from .volume_io import Volume, read_nifti, write_nifti

CANONICAL_AXES = (
    np.array([0.0, 0.0, 1.0]),
    np.array([0.0, 1.0, 0.0]),
    np.array([1.0, 0.0, 0.0]),
)

DEFAULT_MAX_VOXELS = 2**27

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class ViewGeometry:
    """Right-handed sampling frame of one view.

    extent is (slices, rows, cols); center_offset is the physical position of
    the central grid sample. Rows advance along basis_u, columns along
    basis_v, slices along axis, all with step iso_spacing.
    """

    axis: np.ndarray
    basis_u: np.ndarray
    basis_v: np.ndarray
    iso_spacing: float
    extent: tuple[int, int, int]
    center_offset: np.ndarray

    def __post_init__(self):
        for name in ("axis", "basis_u", "basis_v", "center_offset"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "extent", tuple(int(e) for e in self.extent))
        if self.iso_spacing <= 0:
            raise ValueError(f"iso_spacing must be positive, got {self.iso_spacing}")
        if any(e < 1 for e in self.extent):
            raise ValueError(f"extent must be positive, got {self.extent}")
        frame = np.stack([self.basis_u, self.basis_v, self.axis])
        gram = frame @ frame.T
        if not np.allclose(gram, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("view frame is not orthonormal")
        if abs(np.linalg.det(frame) - 1.0) > _ORTHO_TOL:
            raise ValueError("view frame is not right-handed")


@dataclass
class PlaneStack:
    """Resampled slices of one view: (channel, slice, row, col)."""

    slices: np.ndarray
    geometry: ViewGeometry
    source_shape: tuple[int, int, int]

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 4:
            raise ValueError("slices must be 4D (channel, slice, row, col)")
        if self.slices.shape[1:] != self.geometry.extent:
            raise ValueError(f"slices shape {self.slices.shape[1:]} != geometry extent {self.geometry.extent}")
        if not np.isfinite(self.slices).all():
            raise ValueError("stack contains non-finite values")
        self.source_shape = tuple(int(s) for s in self.source_shape)


def plane_basis(axis) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic in-plane orthonormal basis completing a right-handed frame.

    basis_u is the normalized projection of the canonical vector least aligned
    with the axis (ties resolved x -> y -> z); basis_v = axis x basis_u.
    """
    a = np.asarray(axis, dtype=float).reshape(3)
    norm = np.linalg.norm(a)
    if norm < 1e-6:
        raise DegenerateAxisError(f"axis {axis} has near-zero length")
    a = a / norm
    pick = int(np.argmin(np.abs(a)))
    e = np.zeros(3)
    e[pick] = 1.0
    u = e - np.dot(e, a) * a
    u = u / np.linalg.norm(u)
    v = np.cross(a, u)
    return u, v


def _pair_angle_deg(a, b) -> float:
    # a and -a describe the same slicing direction
    c = min(1.0, abs(float(np.dot(a, b))))
    return float(np.degrees(np.arccos(c)))


def sample_views(count: int, seed: int, min_pairwise_angle_deg: float = 30.0,
                 max_attempts: int = 10_000) -> list[np.ndarray]:
    """View axes: the 3 canonical grid axes first, then seeded random ones.

    Random axes are uniform on the sphere, rejection-sampled so every pair
    (antipodes identified) subtends at least min_pairwise_angle_deg.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0 <= min_pairwise_angle_deg < 90:
        raise ValueError(f"min_pairwise_angle_deg must be in [0, 90), got {min_pairwise_angle_deg}")
    axes = [ax.copy() for ax in CANONICAL_AXES[: min(count, 3)]]
    rng = np.random.default_rng(seed)
    attempts = 0
    while len(axes) < count:
        if attempts >= max_attempts:
            raise AngleInfeasibleError(
                f"could not place {count} axes with min angle {min_pairwise_angle_deg} deg "
                f"after {max_attempts} attempts"
            )
        attempts += 1
        x = rng.standard_normal(3)
        n = np.linalg.norm(x)
        if n < 1e-12:
            continue
        cand = x / n
        if all(_pair_angle_deg(cand, ax) >= min_pairwise_angle_deg for ax in axes):
            axes.append(cand)
    return axes


def trilinear_sample_points(grid: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a 3D grid at fractional voxel coordinates.

    The grid is implicitly embedded in zeros, so corners that fall outside
    contribute nothing and far-outside points return 0. Accumulates in
    float64.
    """
    grid = np.asarray(grid)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    base = np.floor(pts).astype(np.int64)
    frac = pts - base
    shape = np.asarray(grid.shape, dtype=np.int64)
    out = np.zeros(len(pts), dtype=np.float64)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1], dtype=np.int64)
        idx = base + off
        w = np.ones(len(pts), dtype=np.float64)
        for d in range(3):
            w *= frac[:, d] if off[d] else (1.0 - frac[:, d])
        valid = np.all((idx >= 0) & (idx < shape), axis=1)
        if not valid.any():
            continue
        vals = np.zeros(len(pts), dtype=np.float64)
        iv = idx[valid]
        vals[valid] = grid[iv[:, 0], iv[:, 1], iv[:, 2]]
        out += w * vals
    return out


def trilinear_sample(volume: Volume, channel: int, point) -> float:
    """Single-point trilinear sample of one channel, in voxel coordinates."""
    if not 0 <= channel < volume.num_channels:
        raise ValueError(f"channel {channel} out of range [0, {volume.num_channels})")
    return float(trilinear_sample_points(volume.data[channel], np.asarray(point, float)[None])[0])


def _grid_anchor(grid_shape, spacing) -> tuple[np.ndarray, np.ndarray]:
    """(exact physical center, center snapped to the nearest voxel center)."""
    half_idx = (np.asarray(grid_shape, float) - 1.0) / 2.0
    spacing = np.asarray(spacing, float)
    return half_idx * spacing, np.round(half_idx) * spacing


def make_view_geometry(volume: Volume, axis, iso_spacing: float | None = None,
                       margin_frac: float = 0.05) -> ViewGeometry:
    """Sampling geometry covering the volume's bounding sphere for one axis."""
    a = np.asarray(axis, dtype=float).reshape(3)
    a = a / np.linalg.norm(a)
    u, v = plane_basis(a)
    spacing = volume.spacing
    if iso_spacing is None:
        iso_spacing = float(np.max(spacing))
    if iso_spacing <= 0:
        raise ValueError(f"iso_spacing must be positive, got {iso_spacing}")
    shape3 = np.asarray(volume.grid_shape, float)
    center, anchor = _grid_anchor(volume.grid_shape, spacing)
    radius = float(np.linalg.norm((shape3 - 1.0) * spacing)) / 2.0 * (1.0 + margin_frac)
    shift = float(np.linalg.norm(anchor - center))
    half = int(np.ceil((radius + shift) / iso_spacing))
    n = 2 * half + 1
    return ViewGeometry(axis=a, basis_u=u, basis_v=v, iso_spacing=iso_spacing,
                        extent=(n, n, n), center_offset=anchor)


def view_to_physical(geometry: ViewGeometry, view_pts: np.ndarray) -> np.ndarray:
    """Map (slice, row, col) grid coordinates to physical millimeters."""
    p = np.asarray(view_pts, dtype=float).reshape(-1, 3)
    half = (np.asarray(geometry.extent, float) - 1.0) / 2.0
    rel = (p - half) * geometry.iso_spacing
    frame = np.stack([geometry.axis, geometry.basis_u, geometry.basis_v])
    return geometry.center_offset + rel @ frame


def physical_to_view(geometry: ViewGeometry, phys_pts: np.ndarray) -> np.ndarray:
    """Map physical millimeters to fractional (slice, row, col) coordinates."""
    p = np.asarray(phys_pts, dtype=float).reshape(-1, 3)
    d = p - geometry.center_offset
    frame = np.stack([geometry.axis, geometry.basis_u, geometry.basis_v])
    half = (np.asarray(geometry.extent, float) - 1.0) / 2.0
    return d @ frame.T / geometry.iso_spacing + half


def _view_grid_voxel_coords(geometry: ViewGeometry, spacing) -> np.ndarray:
    n_s, n_r, n_c = geometry.extent
    s, r, c = np.meshgrid(np.arange(n_s), np.arange(n_r), np.arange(n_c), indexing="ij")
    view_pts = np.stack([s.ravel(), r.ravel(), c.ravel()], axis=1).astype(float)
    phys = view_to_physical(geometry, view_pts)
    return phys / np.asarray(spacing, float)


def resample_to_view(volume: Volume, axis, iso_spacing: float | None = None,
                     margin_frac: float = 0.05, max_voxels: int = DEFAULT_MAX_VOXELS) -> PlaneStack:
    """Resample all channels of a volume onto one view's isotropic grid."""
    geometry = make_view_geometry(volume, axis, iso_spacing, margin_frac)
    n_total = int(np.prod(geometry.extent)) * volume.num_channels
    if n_total > max_voxels:
        raise ExtentOverflowError(
            f"view grid {geometry.extent} x {volume.num_channels} channels = {n_total} voxels "
            f"exceeds budget {max_voxels}"
        )
    vox = _view_grid_voxel_coords(geometry, volume.spacing)
    slices = np.empty((volume.num_channels, *geometry.extent), dtype=np.float64)
    for ch in range(volume.num_channels):
        slices[ch] = trilinear_sample_points(volume.data[ch], vox).reshape(geometry.extent)
    return PlaneStack(slices=slices, geometry=geometry, source_shape=volume.grid_shape)


def resample_mask_to_view(labels: np.ndarray, spacing, geometry: ViewGeometry) -> np.ndarray:
    """Nearest-neighbor label resampling on a view grid; outside maps to 0."""
    labels = np.asarray(labels)
    vox = _view_grid_voxel_coords(geometry, spacing)
    idx = np.rint(vox).astype(np.int64)
    shape = np.asarray(labels.shape, dtype=np.int64)
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    out = np.zeros(len(idx), dtype=labels.dtype)
    ii = idx[inside]
    out[inside] = labels[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out.reshape(geometry.extent)


def backproject(per_slice_probs: np.ndarray, geometry: ViewGeometry,
                target_shape, target_spacing) -> np.ndarray:
    """Map per-slice class probabilities back onto the native voxel grid.

    Returns (class, i, j, k) probabilities renormalized to sum to 1 per
    voxel; voxels outside the stack's support get background probability 1.
    """
    probs = np.asarray(per_slice_probs, dtype=np.float64)
    if probs.ndim != 4:
        raise GeometryMismatchError(f"probability stack must be 4D (class, slice, row, col), got {probs.shape}")
    if probs.shape[1:] != geometry.extent:
        raise GeometryMismatchError(f"stack shape {probs.shape[1:]} != geometry extent {geometry.extent}")
    n_classes = probs.shape[0]
    target_shape = tuple(int(s) for s in target_shape)
    spacing = np.asarray(target_spacing, float)

    i, j, k = np.meshgrid(*(np.arange(s) for s in target_shape), indexing="ij")
    phys = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1).astype(float) * spacing
    view_pts = physical_to_view(geometry, phys)

    out = np.empty((n_classes, len(view_pts)), dtype=np.float64)
    for c in range(n_classes):
        out[c] = trilinear_sample_points(probs[c], view_pts)
    sums = out.sum(axis=0)
    dead = sums < 1e-8
    if dead.any():
        out[:, dead] = 0.0
        out[0, dead] = 1.0
        sums[dead] = 1.0
    out /= sums
    return out.reshape(n_classes, *target_shape)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_plane_stack(stack: PlaneStack, path) -> Path:
    """Cache a stack as NIfTI plus a sidecar JSON geometry record."""
    path = Path(path)
    vol = Volume(data=stack.slices.astype(np.float32),
                 spacing=np.full(3, stack.geometry.iso_spacing))
    write_nifti(vol, path)
    g = stack.geometry
    record = "{\n" + ",\n".join([
        f'  "axis": [{", ".join(_fmt(x) for x in g.axis)}]',
        f'  "basis_u": [{", ".join(_fmt(x) for x in g.basis_u)}]',
        f'  "basis_v": [{", ".join(_fmt(x) for x in g.basis_v)}]',
        f'  "iso_spacing": {_fmt(g.iso_spacing)}',
        f'  "extent": [{", ".join(str(e) for e in g.extent)}]',
        f'  "center_offset": [{", ".join(_fmt(x) for x in g.center_offset)}]',
        f'  "source_shape": [{", ".join(str(s) for s in stack.source_shape)}]',
    ]) + "\n}\n"
    sidecar = path.with_name(path.name + ".geometry.json")
    sidecar.write_text(record)
    return sidecar


def load_plane_stack(path) -> PlaneStack:
    path = Path(path)
    sidecar = path.with_name(path.name + ".geometry.json")
    rec = json.loads(sidecar.read_text())
    geometry = ViewGeometry(axis=rec["axis"], basis_u=rec["basis_u"], basis_v=rec["basis_v"],
                            iso_spacing=rec["iso_spacing"], extent=tuple(rec["extent"]),
                            center_offset=rec["center_offset"])
    vol = read_nifti(path)
    return PlaneStack(slices=vol.data.astype(np.float64), geometry=geometry,
                      source_shape=tuple(rec["source_shape"]))
