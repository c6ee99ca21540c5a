#!/usr/bin/env python3
"""
🧠 Volume - intensity volumes, lesion masks, patches and file I/O.

Two on-disk formats are understood:
- nifti1: uncompressed single-file NIfTI-1 (.nii), int16 or float32 voxels.
- rawf32: `<name>.json` sidecar ({dims, spacing, affine?}) next to
  `<name>.bin`, little-endian float32 in C order, index = (i*W + j)*D + k.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import (
    PreconditionError,
    UnsupportedFormatError,
    VolumeFormatError,
    VolumeIOError,
)

logger = logging.getLogger(__name__)

FORMATS = ("nifti1", "rawf32")
NIFTI_MAGIC = b"n+1\x00"
NIFTI_DTYPES = {4: np.int16, 16: np.float32}


def _frozen(array):
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 3 or data.size == 0:
            raise PreconditionError(f"Volume3D needs a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise PreconditionError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        if self.affine is not None:
            affine = np.array(self.affine, dtype=np.float64)
            if affine.shape != (4, 4):
                raise PreconditionError(f"affine must be 4x4, got {affine.shape}")
            object.__setattr__(self, "affine", _frozen(affine))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data):
        """Same geometry, new voxels."""
        return Volume3D(data, self.spacing, self.affine)


@dataclass(frozen=True, eq=False)
class Mask3D:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 3:
            raise PreconditionError(f"Mask3D needs a 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data.astype(bool)))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.data.shape

    @property
    def count(self):
        return int(self.data.sum())

    @classmethod
    def from_volume(cls, volume, threshold=0.5):
        return cls(volume.data > threshold, volume.spacing)

    def as_volume(self, reference=None):
        spacing = reference.spacing if reference is not None else self.spacing
        affine = reference.affine if reference is not None else None
        return Volume3D(self.data.astype(np.float32), spacing, affine)


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple
    size: tuple = field(default=(64, 64, 64))

    @property
    def slices(self):
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def check(self, dims):
        if len(self.origin) != 3 or len(self.size) != 3:
            raise PreconditionError(f"PatchSpec must be 3D, got {self}")
        for o, s, d in zip(self.origin, self.size, dims):
            if o < 0 or s < 1 or o + s > d:
                raise PreconditionError(f"{self} does not fit a volume of dims {tuple(dims)}")


def _check_same_dims(a, b, what="volume and mask"):
    if tuple(a.dims) != tuple(b.dims):
        raise PreconditionError(f"{what} dims differ: {tuple(a.dims)} vs {tuple(b.dims)}")


def normalize_intensity(v):
    """Min-max scale a whole scan to [0, 1]; a constant scan maps to zeros."""
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return v.with_data(np.zeros_like(data, dtype=np.float32))
    return v.with_data(((data - lo) / (hi - lo)).astype(np.float32))


# --- patches ----------------------------------------------------------------

def _window_counts(mask, size):
    """Foreground count of every window of `size`, indexed by window origin."""
    integral = np.zeros(tuple(d + 1 for d in mask.shape), dtype=np.int64)
    integral[1:, 1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    h, w, d = size
    H, W, D = mask.shape
    a = integral
    return (
        a[h:H + 1, w:W + 1, d:D + 1]
        - a[:H - h + 1, w:W + 1, d:D + 1]
        - a[h:H + 1, :W - w + 1, d:D + 1]
        - a[h:H + 1, w:W + 1, :D - d + 1]
        + a[:H - h + 1, :W - w + 1, d:D + 1]
        + a[:H - h + 1, w:W + 1, :D - d + 1]
        + a[h:H + 1, :W - w + 1, :D - d + 1]
        - a[:H - h + 1, :W - w + 1, :D - d + 1]
    )


def extract_patch(v, m, size, rng):
    """
    Random patch whose window holds at least one lesion voxel.

    The origin is drawn uniformly among all origins satisfying that
    constraint, using only `rng`.
    """
    _check_same_dims(v, m)
    size = tuple(int(s) for s in size)
    if any(s > d for s, d in zip(size, v.dims)):
        raise PreconditionError(f"patch size {size} exceeds volume dims {v.dims}")
    if not m.data.any():
        raise PreconditionError("cannot extract a lesion patch: mask has no foreground voxel")

    valid = np.flatnonzero(_window_counts(m.data, size) > 0)
    pick = valid[rng.integers(len(valid))]
    n_origins = tuple(d - s + 1 for d, s in zip(v.dims, size))
    origin = tuple(int(i) for i in np.unravel_index(pick, n_origins))
    spec = PatchSpec(origin, size)
    sl = spec.slices
    return v.with_data(v.data[sl]), Mask3D(m.data[sl], m.spacing), spec


def insert_patch(v, patch, spec):
    spec.check(v.dims)
    if tuple(patch.dims) != tuple(spec.size):
        raise PreconditionError(f"patch dims {patch.dims} differ from spec size {spec.size}")
    data = v.data.copy()
    data[spec.slices] = patch.data
    return v.with_data(data)


# --- file I/O ---------------------------------------------------------------

def infer_format(path):
    name = str(path).lower()
    if name.endswith(".nii"):
        return "nifti1"
    if name.endswith(".nii.gz"):
        raise UnsupportedFormatError(f"compressed NIfTI is not supported: {path}")
    if name.endswith((".bin", ".json")):
        return "rawf32"
    raise UnsupportedFormatError(f"cannot infer volume format from '{path}' (use .nii, .bin or .json)")


def _raw_paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".bin", ".json") else path
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def load_volume(path, format=None):
    format = format or infer_format(path)
    if format == "nifti1":
        return _load_nifti(Path(path))
    if format == "rawf32":
        return _load_raw(path)
    raise UnsupportedFormatError(f"unknown volume format '{format}' (expected one of {FORMATS})")


def save_volume(v, path, format=None):
    format = format or infer_format(path)
    try:
        if format == "nifti1":
            _save_nifti(v, Path(path))
        elif format == "rawf32":
            _save_raw(v, path)
        else:
            raise UnsupportedFormatError(f"unknown volume format '{format}' (expected one of {FORMATS})")
    except OSError as exc:
        raise VolumeIOError(f"cannot write volume: {exc.strerror or exc}", path) from exc
    logger.debug(f"Saved {format} volume {v.dims} -> {path}")


def _load_raw(path):
    json_path, bin_path = _raw_paths(path)
    try:
        with open(json_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
        payload = bin_path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read rawf32 volume: {exc.strerror or exc}", path) from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"sidecar {json_path} is not valid JSON: {exc}", field="json") from exc

    dims = meta.get("dims")
    if not isinstance(dims, list) or len(dims) != 3 or any(not isinstance(d, int) or d < 1 for d in dims):
        raise VolumeFormatError(f"'dims' must be three positive integers, got {dims!r}", field="dims")
    spacing = meta.get("spacing", [1.0, 1.0, 1.0])
    try:
        if not isinstance(spacing, list) or len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
            raise ValueError(spacing)
    except (TypeError, ValueError):
        raise VolumeFormatError(f"'spacing' must be three positive numbers, got {spacing!r}", field="spacing") from None
    expected = 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload of {bin_path} has {len(payload)} bytes, dims {dims} need {expected}", field="dims")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    affine = meta.get("affine")
    if affine is not None:
        try:
            affine = np.array(affine, dtype=np.float64)
        except (TypeError, ValueError):
            raise VolumeFormatError(f"'affine' must be a numeric 4x4 matrix, got {affine!r}", field="affine") from None
        if affine.shape != (4, 4):
            raise VolumeFormatError(f"'affine' must be 4x4, got shape {affine.shape}", field="affine")
    return Volume3D(data, tuple(float(s) for s in spacing), affine)


def _save_raw(v, path):
    json_path, bin_path = _raw_paths(path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"dims": [int(d) for d in v.dims], "spacing": list(v.spacing)}
    if v.affine is not None:
        meta["affine"] = v.affine.tolist()
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(meta, f)
    bin_path.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def _load_nifti(path):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read NIfTI volume: {exc.strerror or exc}", path) from exc
    if len(raw) < 348:
        raise VolumeFormatError(f"{path} is shorter than a NIfTI-1 header ({len(raw)} bytes)", field="sizeof_hdr")
    if raw[344:348] != NIFTI_MAGIC:
        raise VolumeFormatError(f"{path}: magic {raw[344:348]!r} is not single-file NIfTI-1", field="magic")
    endian = "<" if struct.unpack_from("<i", raw, 0)[0] == 348 else ">"
    (code,) = struct.unpack_from(endian + "h", raw, 70)
    if code not in NIFTI_DTYPES:
        raise UnsupportedFormatError(f"{path}: NIfTI datatype code {code} unsupported (int16=4, float32=16)")

    try:
        img = nib.Nifti1Image.from_bytes(raw)
    except Exception as exc:
        raise VolumeFormatError(f"{path}: unreadable NIfTI-1 header: {exc}", field="header") from exc
    header = img.header

    dim = header['dim']
    if dim[0] < 3 or any(d < 1 for d in dim[1:4]) or any(d > 1 for d in dim[4:dim[0] + 1]):
        raise VolumeFormatError(f"{path}: dim {list(dim)} is not a single 3D volume", field="dim")
    spacing = tuple(float(s) for s in header['pixdim'][1:4])
    if min(spacing) <= 0:
        raise VolumeFormatError(f"{path}: pixdim {spacing} must be positive", field="pixdim")
    shape = tuple(int(d) for d in dim[1:4])
    needed = int(header['vox_offset']) + int(np.prod(shape)) * np.dtype(NIFTI_DTYPES[code]).itemsize
    if len(raw) < needed:
        raise VolumeFormatError(f"{path}: payload truncated ({len(raw)} of {needed} bytes)", field="vox_offset")

    data = np.asarray(img.dataobj.get_unscaled()).reshape(shape)
    slope, inter = float(header['scl_slope']), float(header['scl_inter'])
    if np.isfinite(slope) and slope != 0:
        inter = inter if np.isfinite(inter) else 0.0
        if slope != 1 or inter != 0:
            data = data.astype(np.float64) * slope + inter
    return Volume3D(data.astype(np.float32), spacing, img.affine)


def _save_nifti(v, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = v.affine if v.affine is not None else np.diag([*v.spacing, 1.0])
    img = nib.Nifti1Image(np.asarray(v.data, dtype=np.float32), affine)
    img.header.set_data_dtype(np.float32)
    img.header.set_zooms(v.spacing)
    nib.save(img, str(path))


def load_mask(path, format=None):
    return Mask3D.from_volume(load_volume(path, format))


def save_mask(m, path, format=None):
    save_volume(m.as_volume(), path, format)
