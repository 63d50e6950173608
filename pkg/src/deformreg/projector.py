"""Parallel-beam front-view DRRs along the anteroposterior (y) axis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError
from .volgrid import Image2D, VolumeGrid


@dataclass(frozen=True)
class ProjectionGeometry:
    """Output dims ``(nx, nz)`` and the min/max used to normalize the raw image."""

    dims: tuple[int, int]
    ny: int
    raw_min: float
    raw_max: float
    axis: str = "y"

    @property
    def scale(self) -> float:
        span = self.raw_max - self.raw_min
        return 1.0 / span if span > 0 else 0.0


def attenuation(hu: np.ndarray) -> np.ndarray:
    """Water-normalized attenuation, air clamped to zero."""
    return np.maximum(0.0, 1.0 + hu / 1000.0)


def attenuation_slope(hu: np.ndarray) -> np.ndarray:
    # subgradient 0 at the clamp point
    return np.where(hu > -1000.0, 1.0 / 1000.0, 0.0).astype(np.result_type(hu, np.float32))


def project(mu: np.ndarray) -> np.ndarray:
    """Mean along y of an attenuation volume; ``(nx, ny, nz) -> (nx, nz)``."""
    return np.mean(mu, axis=1)


def project_adjoint(img: np.ndarray, ny: int) -> np.ndarray:
    img = np.asarray(img)
    return np.repeat(img[:, None, :] / ny, ny, axis=1)


def raw_drr(hu: np.ndarray) -> np.ndarray:
    return project(attenuation(np.asarray(hu)))


def normalize_with(raw: np.ndarray, geometry: ProjectionGeometry) -> np.ndarray:
    return (raw - geometry.raw_min) * geometry.scale


def render_drr(v: VolumeGrid) -> tuple[Image2D, ProjectionGeometry]:
    raw = raw_drr(v.values.astype(np.float64))
    lo, hi = float(raw.min()), float(raw.max())
    geometry = ProjectionGeometry((v.dims[0], v.dims[2]), v.dims[1], lo, hi)
    img = np.clip(normalize_with(raw, geometry), 0.0, 1.0).astype(np.float32)
    return Image2D(img), geometry


def render_drr_array(hu: np.ndarray, geometry: ProjectionGeometry) -> np.ndarray:
    """Render with fixed normalization constants (the differentiable path)."""
    return normalize_with(raw_drr(hu), geometry)


def render_drr_adjoint(grad_image, geometry: ProjectionGeometry, v_dims, hu=None) -> np.ndarray:
    """Gradient w.r.t. the HU volume of ``sum(grad_image * render_drr_array(hu))``.

    ``hu`` is needed for the attenuation clamp; without it every voxel is
    treated as above -1000 HU.
    """
    grad = np.asarray(getattr(grad_image, "values", grad_image))
    nx, ny, nz = tuple(v_dims)
    if grad.shape != (nx, nz) or tuple(geometry.dims) != (nx, nz) or geometry.ny != ny:
        raise DimensionMismatchError(
            f"gradient image {grad.shape} / geometry {geometry.dims} do not match volume {tuple(v_dims)}"
        )
    back = project_adjoint(grad * geometry.scale, ny)
    if hu is None:
        return back / 1000.0
    return back * attenuation_slope(np.asarray(hu))
