"""Deformable 2D/3D registration of CT volumes to a single frontal DRR.

Modules: ``volgrid`` (volumes, file I/O), ``phantom`` (breathing phantom),
``projector`` (DRR), ``warpfield`` (differentiable warp), ``losses``,
``diffnet`` (numpy U-Net and Adam), ``solvers``, ``metrics``, ``cli``.
"""

from .errors import (
    DeformRegError,
    DimensionMismatchError,
    NumericalError,
    UsageError,
    ValidationError,
    VolumeIOError,
)
from .volgrid import Image2D, LabelVolume, VolumeGrid

__version__ = "0.1.0"
