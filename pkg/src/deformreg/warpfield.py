"""Displacement fields and the differentiable linear-interpolation warp.

The warp pulls back: ``out(p) = src(p + u(p))``. Sample coordinates are
clamped to the grid (clamp-to-edge). The array routines work for any number
of spatial dims, so the same code serves the 3D volume warp and the 2D
DRR warp used by the 2D-DF baseline. They compute in the dtype of their
inputs; pass float64 arrays for gradient checks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, HeaderError, NonFiniteError, ValidationError
from .volgrid import (
    LabelVolume,
    VolumeGrid,
    check_same_dims,
    read_header,
    read_payload,
    write_header,
    write_payload,
)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement in voxel units, ``components[c, x, y, z]``."""

    components: np.ndarray

    def __post_init__(self):
        comp = np.asarray(self.components)
        if comp.ndim != 4 or comp.shape[0] != 3 or min(comp.shape) < 1:
            raise ValidationError(f"field must have shape (3, nx, ny, nz), got {comp.shape}")
        comp = np.array(comp, dtype=np.float32, copy=True)
        if not np.isfinite(comp).all():
            raise ValidationError("displacement field contains non-finite values")
        comp.flags.writeable = False
        object.__setattr__(self, "components", comp)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.components.shape[1:])

    @classmethod
    def zeros(cls, dims) -> "DisplacementField":
        return cls(np.zeros((3, *dims), dtype=np.float32))

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.components.astype(np.float64) ** 2, axis=0))


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------


def _sample_setup(disp: np.ndarray, shape):
    """Corner indices, fractional offsets and clamp masks per spatial dim."""
    ndim = len(shape)
    dtype = disp.dtype
    lows, highs, fracs, clamped = [], [], [], []
    for d in range(ndim):
        n = shape[d]
        view = [1] * ndim
        view[d] = n
        pos = np.arange(n, dtype=dtype).reshape(view) + disp[d]
        out_of_grid = (pos < 0) | (pos > n - 1)
        pos = np.clip(pos, 0, n - 1)
        i0 = np.clip(np.floor(pos).astype(np.intp), 0, max(n - 2, 0))
        lows.append(i0)
        highs.append(np.minimum(i0 + 1, n - 1))
        fracs.append(pos - i0.astype(dtype))
        clamped.append(out_of_grid)
    return lows, highs, fracs, clamped


def _corners(ndim):
    return list(itertools.product((0, 1), repeat=ndim))


def _flat_index(shape, idx_per_dim):
    strides = np.cumprod((1,) + tuple(shape[::-1]))[:-1][::-1]
    flat = idx_per_dim[0] * int(strides[0])
    for d in range(1, len(shape)):
        flat = flat + idx_per_dim[d] * int(strides[d])
    return flat


def linear_warp(src: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Pull-back warp of ``src`` (spatial array) by ``disp`` (ndim, *shape)."""
    src = np.asarray(src)
    disp = np.asarray(disp)
    shape = src.shape
    if disp.shape != (len(shape), *shape):
        raise DimensionMismatchError(f"field shape {disp.shape} does not fit source {shape}")
    dtype = np.result_type(src.dtype, disp.dtype)
    disp = disp.astype(dtype, copy=False)
    lows, highs, fracs, _ = _sample_setup(disp, shape)
    flat_src = src.astype(dtype, copy=False).ravel()
    out = np.zeros(shape, dtype=dtype)
    for corner in _corners(len(shape)):
        idx = [highs[d] if bit else lows[d] for d, bit in enumerate(corner)]
        weight = None
        for d, bit in enumerate(corner):
            w = fracs[d] if bit else (1 - fracs[d])
            weight = w if weight is None else weight * w
        out += flat_src[_flat_index(shape, np.broadcast_arrays(*idx))] * weight
    return out


def linear_warp_backward(src: np.ndarray, disp: np.ndarray, grad_out: np.ndarray, need_src: bool = True):
    """Gradients of ``sum(grad_out * linear_warp(src, disp))`` w.r.t. src and disp.

    At integer sample coordinates the derivative comes from the cell starting
    at that coordinate (the one ``floor`` selects); along a clamped
    coordinate the positional derivative is zero. With ``need_src=False`` the
    source gradient is skipped and returned as ``None``.
    """
    src = np.asarray(src)
    disp = np.asarray(disp)
    shape = src.shape
    if disp.shape != (len(shape), *shape) or np.shape(grad_out) != shape:
        raise DimensionMismatchError("src, field and grad_out dims must agree")
    ndim = len(shape)
    dtype = np.result_type(src.dtype, disp.dtype, np.asarray(grad_out).dtype)
    disp = disp.astype(dtype, copy=False)
    grad_out = np.asarray(grad_out, dtype=dtype)
    lows, highs, fracs, clamped = _sample_setup(disp, shape)
    flat_src = src.astype(dtype, copy=False).ravel()
    size = flat_src.size

    grad_src = np.zeros(size, dtype=np.float64)
    grad_disp = np.zeros((ndim, *shape), dtype=dtype)
    one_minus = [1 - f for f in fracs]
    for corner in _corners(ndim):
        idx = _flat_index(shape, np.broadcast_arrays(*[highs[d] if b else lows[d] for d, b in enumerate(corner)]))
        factors = [fracs[d] if b else one_minus[d] for d, b in enumerate(corner)]
        weight = np.ones(shape, dtype=dtype)
        for f in factors:
            weight = weight * f
        if need_src:
            grad_src += np.bincount(idx.ravel(), weights=(grad_out * weight).ravel(), minlength=size)
        vals = flat_src[idx]
        for d in range(ndim):
            partial = np.ones(shape, dtype=dtype) if corner[d] else -np.ones(shape, dtype=dtype)
            for e in range(ndim):
                if e != d:
                    partial = partial * factors[e]
            grad_disp[d] += grad_out * vals * partial
    for d in range(ndim):
        grad_disp[d][np.broadcast_to(clamped[d], shape)] = 0
    if not need_src:
        return None, grad_disp
    return grad_src.reshape(shape).astype(dtype), grad_disp


def trilinear_weights(point) -> np.ndarray:
    """The eight corner weights for a single in-grid sample point (for tests/diagnostics)."""
    f = np.asarray(point, dtype=np.float64) - np.floor(point)
    return np.array([
        np.prod([f[d] if b else 1 - f[d] for d, b in enumerate(corner)])
        for corner in _corners(3)
    ])


def nearest_warp(src: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Nearest-neighbour pull-back; ties round toward +inf (floor(x + 0.5))."""
    shape = src.shape
    idx = []
    for d in range(len(shape)):
        view = [1] * len(shape)
        view[d] = shape[d]
        pos = np.arange(shape[d], dtype=np.float64).reshape(view) + disp[d]
        idx.append(np.clip(np.floor(pos + 0.5).astype(np.intp), 0, shape[d] - 1))
    return src[tuple(np.broadcast_arrays(*idx))]


# ---------------------------------------------------------------------------
# typed wrappers
# ---------------------------------------------------------------------------


def warp_volume(v: VolumeGrid, u: DisplacementField) -> VolumeGrid:
    check_same_dims(v.dims, u.dims, "warp_volume")
    return VolumeGrid(linear_warp(v.values, u.components), v.spacing)


def warp_volume_backward(v: VolumeGrid, u: DisplacementField, grad_out: np.ndarray):
    check_same_dims(v.dims, u.dims, "warp_volume_backward")
    check_same_dims(v.dims, np.shape(grad_out), "warp_volume_backward grad_out")
    return linear_warp_backward(v.values, u.components, grad_out)


def warp_labels(lv: LabelVolume, u: DisplacementField) -> LabelVolume:
    check_same_dims(lv.dims, u.dims, "warp_labels")
    return LabelVolume(nearest_warp(lv.labels, u.components))


def field_paths(path) -> tuple[Path, list[Path]]:
    """Header ``<base>_u.mhd`` and payloads ``<base>_u{x,y,z}.raw``."""
    base = Path(path)
    if base.suffix in (".mhd", ".raw"):
        base = base.with_suffix("")
    if base.name.endswith("_u"):
        base = base.with_name(base.name[:-2])
    header = base.with_name(base.name + "_u.mhd")
    payloads = [base.with_name(f"{base.name}_u{c}.raw") for c in "xyz"]
    return header, payloads


def save_field(u: DisplacementField, path, spacing=(1.0, 1.0, 1.0)) -> Path:
    header, payloads = field_paths(path)
    for comp, p in zip(u.components, payloads):
        write_payload(p, comp, "<f4")
    write_header(header, u.dims, spacing, "MET_FLOAT", [p.name for p in payloads])
    return header


def load_field(path) -> DisplacementField:
    header, _ = field_paths(path)
    info = read_header(header)
    if len(info["dims"]) != 3 or len(info["data_files"]) != 3:
        raise HeaderError(f"{header}: expected a 3D header listing three component payloads")
    comps = np.stack([read_payload(p, info["dims"], "<f4") for p in info["data_files"]])
    if not np.isfinite(comps).all():
        raise NonFiniteError(f"{header}: field contains NaN or Inf")
    return DisplacementField(comps)
