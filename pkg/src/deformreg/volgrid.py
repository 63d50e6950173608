"""Volumetric grid types and MetaImage-style raw file I/O.

Arrays are indexed ``values[x, y, z]``. On disk the payload is x-fastest,
which is numpy Fortran order for that indexing; every conversion between the
two goes through :func:`to_payload` / :func:`from_payload`.

Axis conventions used across the package:

* x: left-right
* y: anteroposterior (the DRR projection axis)
* z: superior-inferior, increasing superiorly
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    HeaderError,
    InvalidDimsError,
    MissingFileError,
    NonFiniteError,
    SizeMismatchError,
    ValidationError,
    VolumeIOError,
)

BACKGROUND, LIVER, STOMACH = 0, 1, 2
ORGAN_LABELS = {"liver": LIVER, "stomach": STOMACH}
LABEL_SET = frozenset({BACKGROUND, LIVER, STOMACH})

_ELEMENT_TYPES = {"MET_FLOAT": np.dtype("<f4"), "MET_UCHAR": np.dtype("u1")}
_HEADER_KEYS = ("NDims", "DimSize", "ElementSpacing", "ElementType", "ByteOrder", "DataFile")

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


def linear_index(x, y, z, dims: Sequence[int]):
    """Flat payload offset of voxel (x, y, z) in x-fastest layout."""
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


def to_payload(arr: np.ndarray) -> np.ndarray:
    return np.ravel(arr, order="F")


def from_payload(flat: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    return np.reshape(flat, tuple(dims), order="F")


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class VolumeGrid:
    """Regular 3D grid of CT values in HU.

    ``values`` has shape ``(nx, ny, nz)`` and dtype float32; ``spacing`` is in
    mm per voxel.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 3 or min(vals.shape) < 1:
            raise ValidationError(f"volume must be 3D with positive dims, got shape {vals.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be 3 positive numbers, got {self.spacing}")
        vals = _frozen(vals, np.float32)
        if not np.isfinite(vals).all():
            raise ValidationError("volume contains non-finite values")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    def equals(self, other: "VolumeGrid") -> bool:
        """Bitwise equality of values, dims and spacing."""
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    label_set: frozenset = field(default=LABEL_SET)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3 or min(lab.shape) < 1:
            raise ValidationError(f"label volume must be 3D with positive dims, got {lab.shape}")
        if np.any(lab < 0):
            raise ValidationError("labels must be non-negative")
        lab = _frozen(lab, np.uint8)
        present = set(np.unique(lab).tolist())
        if not present <= set(self.label_set):
            raise ValidationError(f"labels {sorted(present - set(self.label_set))} not in label set")
        object.__setattr__(self, "labels", lab)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)


@dataclass(frozen=True)
class Image2D:
    """2D image with values in [0, 1], shape ``(h, w)``."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2 or min(vals.shape) < 1:
            raise ValidationError(f"image must be 2D with positive dims, got {vals.shape}")
        vals = _frozen(vals, np.float32)
        if not np.isfinite(vals).all() or vals.min() < 0.0 or vals.max() > 1.0:
            raise ValidationError("image values must be finite and within [0, 1]")
        object.__setattr__(self, "values", vals)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(d) for d in self.values.shape)


def check_same_dims(a, b, what: str = "inputs") -> None:
    if tuple(a) != tuple(b):
        raise DimensionMismatchError(f"{what}: dims {tuple(a)} and {tuple(b)} differ")


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _split_path(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".mhd", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".mhd"), p.with_suffix(".raw")


def write_header(header_path: Path, dims, spacing, element_type: str, data_files) -> None:
    lines = [
        f"NDims = {len(dims)}",
        "DimSize = " + " ".join(str(int(d)) for d in dims),
        "ElementSpacing = " + " ".join(repr(float(s)) for s in spacing),
        f"ElementType = {element_type}",
        "ByteOrder = LittleEndian",
        "DataFile = " + " ".join(data_files),
    ]
    try:
        Path(header_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise VolumeIOError(f"cannot write header {header_path}: {exc}") from exc


def read_header(header_path) -> dict:
    """Parse a header into a dict with typed dims, spacing, dtype and data files."""
    header_path = Path(header_path)
    if not header_path.is_file():
        raise MissingFileError(f"header not found: {header_path}")
    raw = {}
    for lineno, line in enumerate(header_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise HeaderError(f"{header_path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    missing = [k for k in _HEADER_KEYS if k not in raw]
    if missing:
        raise HeaderError(f"{header_path}: missing keys {missing}")
    try:
        ndims = int(raw["NDims"])
        dims = tuple(int(v) for v in raw["DimSize"].split())
        spacing = tuple(float(v) for v in raw["ElementSpacing"].split())
    except ValueError as exc:
        raise HeaderError(f"{header_path}: malformed numeric field ({exc})") from exc
    if len(dims) != ndims or len(spacing) != ndims:
        raise HeaderError(f"{header_path}: NDims={ndims} inconsistent with DimSize/ElementSpacing")
    if any(d <= 0 for d in dims):
        raise InvalidDimsError(f"{header_path}: dims must be positive, got {dims}")
    if raw["ElementType"] not in _ELEMENT_TYPES:
        raise HeaderError(f"{header_path}: unsupported ElementType {raw['ElementType']}")
    if raw["ByteOrder"] != "LittleEndian":
        raise HeaderError(f"{header_path}: unsupported ByteOrder {raw['ByteOrder']}")
    return {
        "dims": dims,
        "spacing": spacing,
        "dtype": _ELEMENT_TYPES[raw["ElementType"]],
        "data_files": [header_path.parent / name for name in raw["DataFile"].split()],
    }


def write_payload(path: Path, arr: np.ndarray, dtype) -> None:
    try:
        Path(path).write_bytes(to_payload(np.asarray(arr)).astype(dtype).tobytes())
    except OSError as exc:
        raise VolumeIOError(f"cannot write payload {path}: {exc}") from exc


def read_payload(path: Path, dims, dtype) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"payload not found: {path}")
    data = path.read_bytes()
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(data) != expected:
        raise SizeMismatchError(f"{path}: payload has {len(data)} bytes, header implies {expected}")
    return from_payload(np.frombuffer(data, dtype=dtype), dims)


def save_volume(v: VolumeGrid, path) -> Path:
    """Write ``v`` as ``<path>.mhd`` + ``<path>.raw``; returns the header path."""
    header, payload = _split_path(path)
    write_payload(payload, v.values, "<f4")
    write_header(header, v.dims, v.spacing, "MET_FLOAT", [payload.name])
    return header


def load_volume(path) -> VolumeGrid:
    header, _ = _split_path(path)
    info = read_header(header)
    if len(info["dims"]) != 3 or info["dtype"] != np.dtype("<f4"):
        raise HeaderError(f"{header}: not a 3D float volume")
    values = read_payload(info["data_files"][0], info["dims"], "<f4")
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{header}: payload contains NaN or Inf")
    return VolumeGrid(values.astype(np.float32), info["spacing"])


def save_labels(lv: LabelVolume, path, spacing=(1.0, 1.0, 1.0)) -> Path:
    header, payload = _split_path(path)
    write_payload(payload, lv.labels, "u1")
    write_header(header, lv.dims, spacing, "MET_UCHAR", [payload.name])
    return header


def load_labels(path) -> LabelVolume:
    header, _ = _split_path(path)
    info = read_header(header)
    if len(info["dims"]) != 3 or info["dtype"] != np.dtype("u1"):
        raise HeaderError(f"{header}: not a 3D label volume")
    try:
        return LabelVolume(read_payload(info["data_files"][0], info["dims"], "u1"))
    except ValidationError as exc:
        raise HeaderError(f"{header}: {exc}") from exc


def save_image(img: Image2D, path) -> Path:
    header, payload = _split_path(path)
    write_payload(payload, img.values, "<f4")
    write_header(header, img.dims, (1.0, 1.0), "MET_FLOAT", [payload.name])
    return header


def load_image(path) -> Image2D:
    header, _ = _split_path(path)
    info = read_header(header)
    if len(info["dims"]) != 2 or info["dtype"] != np.dtype("<f4"):
        raise HeaderError(f"{header}: not a 2D float image")
    values = read_payload(info["data_files"][0], info["dims"], "<f4")
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{header}: payload contains NaN or Inf")
    return Image2D(values)


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary 8-bit PGM (P5). ``image`` is ``(rows, cols)`` with values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError("PGM export needs a 2D array")
    pix = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    rows, cols = pix.shape
    try:
        Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes())
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc
    return Path(path)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise HeaderError(f"{path}: not an 8-bit binary PGM")
    cols, rows = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4][: rows * cols], dtype=np.uint8)
    return pix.reshape(rows, cols)


def display_orientation(plane: np.ndarray) -> np.ndarray:
    """Turn an ``[a, z]`` plane into rows=z (superior on top), cols=a."""
    return np.asarray(plane).T[::-1]


# ---------------------------------------------------------------------------
# resampling and slicing
# ---------------------------------------------------------------------------


def _linear_resample_axis(arr: np.ndarray, axis: int, new_n: int) -> np.ndarray:
    n = arr.shape[axis]
    if new_n == n:
        return arr
    if n == 1 or new_n == 1:
        coords = np.zeros(new_n)
    else:
        coords = np.arange(new_n) * ((n - 1) / (new_n - 1))
    i0 = np.clip(np.floor(coords).astype(np.intp), 0, max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    frac = coords - i0
    shape = [1] * arr.ndim
    shape[axis] = new_n
    frac = frac.reshape(shape)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i1, axis=axis)
    return lo * (1.0 - frac) + hi * frac


def resample_trilinear(v: VolumeGrid, new_dims: Sequence[int]) -> VolumeGrid:
    """Resample onto ``new_dims`` keeping the corner voxels' physical positions fixed."""
    new_dims = tuple(int(d) for d in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise ValidationError(f"new_dims must be 3 positive ints, got {new_dims}")
    if new_dims == v.dims:
        return VolumeGrid(v.values, v.spacing)
    arr = v.values.astype(np.float64)
    for axis in range(3):
        arr = _linear_resample_axis(arr, axis, new_dims[axis])
    spacing = tuple(
        s * (n - 1) / (m - 1) if n > 1 and m > 1 else s
        for s, n, m in zip(v.spacing, v.dims, new_dims)
    )
    return VolumeGrid(arr.astype(np.float32), spacing)


def minmax_normalize(plane: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant input maps to zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.float32)
    return ((plane - lo) / (hi - lo)).astype(np.float32)


def extract_slice(v: VolumeGrid, axis: str, index: int) -> Image2D:
    """Min-max normalized 2D plane.

    axial fixes z (result ``[x, y]``), coronal fixes y (``[x, z]``),
    sagittal fixes x (``[y, z]``).
    """
    if axis not in AXES:
        raise ValidationError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    ax = AXES[axis]
    n = v.dims[ax]
    if not 0 <= index < n:
        raise ValidationError(f"{axis} index {index} outside [0, {n})")
    return Image2D(minmax_normalize(np.take(v.values, index, axis=ax)))
