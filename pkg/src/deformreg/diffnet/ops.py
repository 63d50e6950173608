"""Differentiable operators on ``(channels, nx, ny, nz)`` arrays.

Each forward has a matching ``*_backward`` taking the output gradient first,
then whatever the forward needs. Computation stays in the input dtype.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionMismatchError, ValidationError

LEAKY_SLOPE = 0.2


def _windows(x: np.ndarray, stride: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    return win[:, ::stride, ::stride, ::stride]


def _check_conv(x, kernel, stride):
    if x.ndim != 4:
        raise ValidationError(f"conv3d expects (c, nx, ny, nz), got {x.shape}")
    if kernel.shape[1:] != (x.shape[0], 3, 3, 3):
        raise DimensionMismatchError(f"kernel {kernel.shape} does not fit input with {x.shape[0]} channels")
    if stride not in (1, 2):
        raise ValidationError("stride must be 1 or 2")
    if stride == 2 and any(n % 2 for n in x.shape[1:]):
        raise ValidationError(f"stride-2 conv needs even spatial dims, got {x.shape[1:]}")


def conv3d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3x3 cross-correlation with zero padding 1."""
    _check_conv(x, kernel, stride)
    win = _windows(x, stride)
    out = np.tensordot(kernel, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out += bias[:, None, None, None]
    return out


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: int = 1):
    """Returns ``(grad_x, grad_kernel, grad_bias)``."""
    _check_conv(x, kernel, stride)
    win = _windows(x, stride)
    grad_bias = grad_out.sum(axis=(1, 2, 3))
    grad_kernel = np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))
    cols = np.tensordot(kernel, grad_out, axes=([0], [0]))  # (cin, 3, 3, 3, ox, oy, oz)
    cin, nx, ny, nz = x.shape
    ox, oy, oz = grad_out.shape[1:]
    grad_xp = np.zeros((cin, nx + 2, ny + 2, nz + 2), dtype=cols.dtype)
    s = stride
    for a in range(3):
        for b in range(3):
            for c in range(3):
                grad_xp[:, a:a + s * ox:s, b:b + s * oy:s, c:c + s * oz:s] += cols[:, a, b, c]
    return grad_xp[:, 1:-1, 1:-1, 1:-1], grad_kernel, grad_bias


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    # x == 0 takes the negative-side slope
    return np.where(x > 0, grad_out, grad_out * grad_out.dtype.type(slope))


def upsample3d(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2 in each spatial dim."""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample3d_backward(grad_out: np.ndarray) -> np.ndarray:
    c, nx, ny, nz = grad_out.shape
    return grad_out.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).sum(axis=(2, 4, 6))


def subsample3d(x: np.ndarray) -> np.ndarray:
    return x[:, ::2, ::2, ::2]


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1:] != b.shape[1:]:
        raise DimensionMismatchError(f"cannot concatenate spatial dims {a.shape[1:]} and {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


def concat_channels_backward(grad_out: np.ndarray, a_channels: int):
    return grad_out[:a_channels], grad_out[a_channels:]
