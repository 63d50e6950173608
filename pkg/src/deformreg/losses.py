"""Loss terms: intensity MSE, displacement smoothness, supervised field error.

Every function returns ``(value, gradient)``. Arrays keep their dtype, so
float64 inputs give float64 gradients for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError, ValidationError

HU_WINDOW = (-1000.0, 1000.0)


def normalize_hu(hu):
    lo, hi = HU_WINDOW
    return (np.asarray(hu) - lo) / (hi - lo)


def denormalize_hu(x):
    lo, hi = HU_WINDOW
    return np.asarray(x) * (hi - lo) + lo


@dataclass(frozen=True)
class LossWeights:
    lambda_smooth: float = 0.05
    gamma_dvf: float = 0.0

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.gamma_dvf < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass
class LossTerms:
    total: float
    mse: float
    smooth: float
    dvf: float
    grad_v_def: np.ndarray
    grad_u: np.ndarray


def _check(a, b, what):
    if np.shape(a) != np.shape(b):
        raise DimensionMismatchError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def mse_loss(v_gt, v_def):
    v_gt = np.asarray(v_gt)
    v_def = np.asarray(v_def)
    _check(v_gt, v_def, "mse_loss")
    diff = v_def - v_gt
    n = diff.size
    return float(np.sum(diff.astype(np.float64) ** 2) / n), (2.0 / n) * diff


def smooth_loss(u):
    """Mean squared forward difference of each component along each spatial axis.

    ``u`` has shape ``(C, *spatial)``. Differences that would reach outside
    the grid are left out of both the sum and the count.
    """
    u = np.asarray(u)
    grad = np.zeros_like(u)
    total = 0.0
    count = 0
    for axis in range(1, u.ndim):
        if u.shape[axis] < 2:
            continue
        d = np.diff(u, axis=axis)
        total += float(np.sum(d.astype(np.float64) ** 2))
        count += d.size
        lo = [slice(None)] * u.ndim
        hi = [slice(None)] * u.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        grad[tuple(hi)] += 2 * d
        grad[tuple(lo)] -= 2 * d
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


def dvf_loss(u_gt, u_pre):
    """Mean over voxels of the squared endpoint error (components summed)."""
    u_gt = np.asarray(u_gt)
    u_pre = np.asarray(u_pre)
    _check(u_gt, u_pre, "dvf_loss")
    diff = u_pre - u_gt
    n_vox = diff[0].size
    return float(np.sum(diff.astype(np.float64) ** 2) / n_vox), (2.0 / n_vox) * diff


def total_loss(v_gt, v_def, u_gt: Optional[np.ndarray], u_pre, w: LossWeights) -> LossTerms:
    if w.gamma_dvf > 0 and u_gt is None:
        raise ValidationError("gamma_dvf > 0 requires a ground-truth field")
    mse, g_v = mse_loss(v_gt, v_def)
    smooth, g_s = smooth_loss(u_pre)
    grad_u = w.lambda_smooth * g_s
    dvf = 0.0
    if w.gamma_dvf > 0:
        dvf, g_d = dvf_loss(u_gt, u_pre)
        grad_u = grad_u + w.gamma_dvf * g_d
    total = mse + w.lambda_smooth * smooth + w.gamma_dvf * dvf
    return LossTerms(total, mse, smooth, dvf, g_v, grad_u)
