"""Analytic abdominal phantom with a 10-phase breathing cycle.

Shapes are defined in unit-cube coordinates, where the centre of voxel ``i``
sits at ``(i + 0.5) / n``; the same spec therefore rasterizes at any grid
size. Displacements are in voxels. Frames follow the pull-back convention
``V_t(p) = V_0(p + u_t(p))``, so ``u_t`` is exactly the field a registration
of phase 0 onto phase t should find.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .volgrid import LIVER, STOMACH, LabelVolume, VolumeGrid
from .warpfield import DisplacementField, warp_labels, warp_volume

PHASES = tuple(range(0, 100, 10))
AIR_HU = -1000.0


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    hu: float

    def contains(self, x, y, z):
        cx, cy, cz = self.center
        a, b, c = self.semi_axes
        return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0

    def bounds(self):
        return [(c - a, c + a) for c, a in zip(self.center, self.semi_axes)]

    @property
    def volume(self) -> float:
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * np.pi * a * b * c


@dataclass(frozen=True)
class PhantomSpec:
    """Anatomy of the phantom; lengths are fractions of the grid edge."""

    n: int = 64
    body: Ellipsoid = Ellipsoid((0.5, 0.5, 0.5), (0.42, 0.32, 0.47), 40.0)
    liver: Ellipsoid = Ellipsoid((0.32, 0.48, 0.40), (0.18, 0.22, 0.17), 60.0)
    stomach: Ellipsoid = Ellipsoid((0.68, 0.42, 0.38), (0.12, 0.14, 0.13), 30.0)
    gas: Ellipsoid = Ellipsoid((0.68, 0.40, 0.45), (0.07, 0.08, 0.04), -800.0)
    spine_center: tuple[float, float] = (0.5, 0.74)
    spine_radius: float = 0.06
    spine_hu: float = 400.0
    dome_apex: float = 0.62
    dome_curvature: float = 0.9
    lung_hu: float = -800.0
    background_hu: float = AIR_HU

    def dome_height(self, x, y):
        """Height of the diaphragm surface above (x, y); lung lies above it."""
        return self.dome_apex - self.dome_curvature * ((x - 0.5) ** 2 + (y - 0.5) ** 2)

    def validate(self, check_n: int = 64) -> None:
        if self.n < 4:
            raise ValidationError(f"grid size must be at least 4, got {self.n}")
        hus = [self.body.hu, self.liver.hu, self.stomach.hu, self.gas.hu, self.spine_hu,
               self.lung_hu, self.background_hu]
        if any(not -1000.0 <= h <= 2000.0 for h in hus):
            raise ValidationError("HU values must lie within [-1000, 2000]")
        for lo, hi in self.body.bounds():
            if lo < 0.0 or hi > 1.0:
                raise ValidationError("body ellipsoid must lie inside the grid")
        # containment checks on a fixed-resolution raster, independent of n
        x, y, z = _centres(check_n)
        body = self.body.contains(x, y, z)
        below = z <= self.dome_height(x, y)
        spine = self._spine(x, y, z)
        liver = self.liver.contains(x, y, z)
        stomach = self.stomach.contains(x, y, z)
        gas = self.gas.contains(x, y, z)
        for name, mask in (("liver", liver), ("stomach", stomach)):
            if np.any(mask & ~body) or np.any(mask & ~below):
                raise ValidationError(f"{name} must lie inside the body and below the diaphragm")
            if np.any(mask & spine):
                raise ValidationError(f"{name} overlaps the spine")
        if np.any(liver & stomach):
            raise ValidationError("liver and stomach overlap")
        if np.any(gas & ~stomach):
            raise ValidationError("gas pocket must lie inside the stomach")

    def _spine(self, x, y, z):
        sx, sy = self.spine_center
        inside = (x - sx) ** 2 + (y - sy) ** 2 <= self.spine_radius ** 2
        return inside & self.body.contains(x, y, z)

    def with_size(self, n: int) -> "PhantomSpec":
        return replace(self, n=int(n))


def _centres(n: int):
    c = (np.arange(n) + 0.5) / n
    return c[:, None, None], c[None, :, None], c[None, None, :]


def build_reference(spec: PhantomSpec) -> tuple[VolumeGrid, LabelVolume]:
    """Rasterize at voxel centres; later shapes in the precedence order win.

    Order: body, lung (above the dome), liver, stomach, gas, spine.
    """
    spec.validate()
    n = spec.n
    x, y, z = _centres(n)
    shape = (n, n, n)
    hu = np.full(shape, spec.background_hu)
    labels = np.zeros(shape, dtype=np.uint8)

    body = np.broadcast_to(spec.body.contains(x, y, z), shape)
    hu[body] = spec.body.hu
    lung = body & np.broadcast_to(z > spec.dome_height(x, y), shape)
    hu[lung] = spec.lung_hu
    liver = np.broadcast_to(spec.liver.contains(x, y, z), shape)
    hu[liver] = spec.liver.hu
    labels[liver] = LIVER
    stomach = np.broadcast_to(spec.stomach.contains(x, y, z), shape)
    hu[stomach] = spec.stomach.hu
    labels[stomach] = STOMACH
    gas = np.broadcast_to(spec.gas.contains(x, y, z), shape)
    hu[gas] = spec.gas.hu
    spine = np.broadcast_to(spec._spine(x, y, z), shape)
    hu[spine] = spec.spine_hu
    labels[spine] = 0
    return VolumeGrid(hu.astype(np.float32)), LabelVolume(labels)


@dataclass(frozen=True)
class RespiratoryModel:
    """Breathing motion: superior-inferior plus anteroposterior displacement.

    ``amp_si`` and ``amp_ap`` are peak displacements in voxels, reached at
    end-exhalation (t=50) where the weight fields equal 1. The SI weight is a
    cosine taper in height, 0 at the inferior boundary and 1 at the dome apex,
    modulated laterally; organs rise toward the lungs as the patient exhales.
    """

    n: int = 64
    amp_si: float = 6.0
    amp_ap: float = 2.0
    apex_height: float = 0.62
    lateral_falloff: float = 0.3
    ap_falloff: float = 0.4

    @classmethod
    def for_spec(cls, spec: PhantomSpec, **kwargs) -> "RespiratoryModel":
        return cls(n=spec.n, apex_height=spec.dome_apex, **kwargs)

    def taper(self, z):
        return 0.5 * (1.0 - np.cos(np.pi * z / self.apex_height))

    def weight_si(self, x, y, z):
        return self.taper(z) * (1.0 - self.lateral_falloff * ((x - 0.5) / 0.5) ** 2)

    def weight_ap(self, x, y, z):
        return self.taper(z) * (1.0 - self.ap_falloff * ((y - 0.5) / 0.5) ** 2)

    def max_jacobian_perturbation(self) -> float:
        """Largest infinity-norm of the displacement Jacobian over the grid at t=50."""
        x, y, z = _centres(self.n)
        u = _displacement_unit(self, 1.0, x, y, z)
        jac_rows = []
        for c in range(3):
            grads = np.gradient(u[c], axis=(0, 1, 2)) if self.n > 2 else [np.zeros_like(u[c])] * 3
            jac_rows.append(sum(np.abs(g) for g in grads))
        return float(max(np.max(r) for r in jac_rows))

    def validate(self) -> None:
        if self.amp_si < 0 or self.amp_ap < 0:
            raise ValidationError("amplitudes must be non-negative")
        if not 0.0 < self.apex_height < 1.0:
            raise ValidationError("apex height must lie inside the grid")
        if self.max_jacobian_perturbation() >= 1.0:
            raise ValidationError("respiratory amplitudes too large: p -> p + u(p) may fold")


def phase_weight(t: float) -> float:
    """s(t) = (1 - cos(2 pi t / 100)) / 2, evaluated symmetrically in t <-> 100 - t."""
    if not 0 <= t <= 100:
        raise ValidationError(f"phase must lie in [0, 100], got {t}")
    t = min(t, 100 - t)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * t / 100.0))


def _displacement_unit(model: RespiratoryModel, s: float, x, y, z):
    shape = np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(z))
    u = np.zeros((3, *shape))
    u[1] = s * model.amp_ap * model.weight_ap(x, y, z)
    u[2] = -s * model.amp_si * model.weight_si(x, y, z)
    return u


def respiratory_displacement(model: RespiratoryModel, t: float, p) -> np.ndarray:
    """Displacement (voxels) at voxel coordinate(s) ``p`` (last axis = xyz) and phase t."""
    p = np.asarray(p, dtype=np.float64)
    unit = (p + 0.5) / model.n
    u = _displacement_unit(model, phase_weight(t), unit[..., 0], unit[..., 1], unit[..., 2])
    return np.moveaxis(u, 0, -1)


def displacement_field(model: RespiratoryModel, t: float) -> DisplacementField:
    x, y, z = _centres(model.n)
    return DisplacementField(_displacement_unit(model, phase_weight(t), x, y, z))


@dataclass(frozen=True)
class PhantomFrame:
    phase: int
    volume: VolumeGrid
    labels: LabelVolume
    u_gt: DisplacementField


def generate_4dct(spec: PhantomSpec, model: RespiratoryModel,
                  phases: Sequence[int] = PHASES) -> list[PhantomFrame]:
    if model.n != spec.n:
        raise ValidationError(f"motion model grid {model.n} differs from phantom grid {spec.n}")
    model.validate()
    ref, ref_labels = build_reference(spec)
    frames = []
    for t in phases:
        u = displacement_field(model, t)
        frames.append(PhantomFrame(int(t), warp_volume(ref, u), warp_labels(ref_labels, u), u))
    return frames


def random_model(spec: PhantomSpec, rng: np.random.Generator,
                 si_range=(0.5, 1.0), ap_range=(0.5, 1.0), base: RespiratoryModel | None = None
                 ) -> RespiratoryModel:
    """Motion model with amplitudes drawn as fractions of ``base``'s amplitudes."""
    base = base or RespiratoryModel.for_spec(spec)
    return replace(
        base,
        n=spec.n,
        apex_height=spec.dome_apex,
        amp_si=float(base.amp_si * rng.uniform(*si_range)),
        amp_ap=float(base.amp_ap * rng.uniform(*ap_range)),
    )


def default_amplitudes(n: int) -> tuple[float, float]:
    """Default SI/AP amplitudes (6 and 2 voxels at n=64) scaled to grid size ``n``."""
    return 6.0 * n / 64.0, 2.0 * n / 64.0
