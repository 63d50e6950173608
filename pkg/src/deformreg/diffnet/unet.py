"""3D U-Net displacement generator with a hand-written backward pass.

Layout for ``levels = L`` and encoder widths ``[e1, ..., eL]``::

    input (2 ch, n)
    enc_i: conv stride 2 -> e_i, LeakyReLU           (n / 2^i)
    dec_j: conv stride 1 -> e_{L-j}, LeakyReLU, upsample x2,
           concat with the encoder output one level up (the input for the last)
    full:  conv stride 1 -> full_width, LeakyReLU    (n)
    flow:  conv stride 1 -> 3, linear                (n)

The flow layer starts at zero so an untrained network predicts u = 0.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DimensionMismatchError, ValidationError, VolumeIOError
from ..losses import normalize_hu
from ..volgrid import Image2D, VolumeGrid
from . import ops

PACKINGS = ("planes", "halves")


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    enc_widths: tuple[int, ...] = (16, 32, 32)
    full_width: Optional[int] = None
    in_channels: int = 2
    leaky_slope: float = 0.2
    packing: str = "planes"

    def __post_init__(self):
        object.__setattr__(self, "enc_widths", tuple(int(w) for w in self.enc_widths))
        if self.levels < 1 or len(self.enc_widths) != self.levels:
            raise ValidationError(f"need one encoder width per level, got {self.enc_widths} for L={self.levels}")
        if any(w <= 0 for w in self.enc_widths) or (self.full_width is not None and self.full_width <= 0):
            raise ValidationError("channel widths must be positive")
        if self.packing not in PACKINGS:
            raise ValidationError(f"packing must be one of {PACKINGS}")

    @property
    def full(self) -> int:
        return self.full_width or self.enc_widths[0]

    def check_dims(self, dims) -> None:
        step = 2 ** self.levels
        if any(int(d) % step for d in dims):
            raise ValidationError(f"input dims {tuple(dims)} must be divisible by 2^L = {step}")

    def layer_shapes(self) -> list[tuple[str, int, int, int]]:
        """``(name, in_channels, out_channels, stride)`` in declaration order."""
        L, widths = self.levels, self.enc_widths
        layers = []
        prev = self.in_channels
        for i in range(L):
            layers.append((f"enc{i}", prev, widths[i], 2))
            prev = widths[i]
        skip_channels = [self.in_channels, *widths[:-1]]
        for j in range(L):
            out = widths[L - 1 - j]
            layers.append((f"dec{j}", prev, out, 1))
            prev = out + skip_channels[L - 1 - j]
        layers.append(("full", prev, self.full, 1))
        layers.append(("flow", self.full, 3, 1))
        return layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        return d


@dataclass
class UNetParams:
    config: UNetConfig
    arrays: dict = field(default_factory=dict)
    seed: int = 0

    def names(self) -> list[str]:
        return list(self.arrays)

    def astype(self, dtype) -> "UNetParams":
        return UNetParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()}, self.seed)

    def copy(self) -> "UNetParams":
        return UNetParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.seed)


def init_params(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetParams:
    """He-uniform kernels, zero biases, zero flow layer."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, cin, cout, _ in config.layer_shapes():
        if name == "flow":
            w = np.zeros((cout, cin, 3, 3, 3))
        else:
            bound = np.sqrt(6.0 / (cin * 27))
            w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3, 3))
        arrays[f"{name}.w"] = w.astype(dtype)
        arrays[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    return UNetParams(config, arrays, seed)


def pack_input(v_s: VolumeGrid, i_s: Image2D, i_t: Image2D, packing: str = "planes",
               dtype=np.float32) -> np.ndarray:
    """Two-channel network input.

    Channel 0 is the source volume mapped from HU to [0, 1]. Channel 1 is zero
    except for the DRRs: ``planes`` writes ``i_s`` at y=0 and ``i_t`` at
    y=ny-1; ``halves`` fills y < ny/2 with ``i_s`` and the rest with ``i_t``.
    """
    nx, ny, nz = v_s.dims
    if i_s.dims != (nx, nz) or i_t.dims != (nx, nz):
        raise DimensionMismatchError(f"DRR dims {i_s.dims}/{i_t.dims} must equal (nx, nz) = {(nx, nz)}")
    x = np.zeros((2, nx, ny, nz), dtype=dtype)
    x[0] = normalize_hu(v_s.values.astype(np.float64))
    if packing == "planes":
        x[1, :, 0, :] = i_s.values
        x[1, :, ny - 1, :] = i_t.values
    elif packing == "halves":
        half = ny // 2
        x[1, :, :half, :] = i_s.values[:, None, :]
        x[1, :, half:, :] = i_t.values[:, None, :]
    else:
        raise ValidationError(f"unknown packing {packing!r}")
    return x


def unet_forward(params: UNetParams, x: np.ndarray):
    """Returns ``(u, cache)`` with ``u`` shaped ``(3, nx, ny, nz)``."""
    cfg = params.config
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise DimensionMismatchError(f"expected input with {cfg.in_channels} channels, got {x.shape}")
    cfg.check_dims(x.shape[1:])
    P = params.arrays
    slope = cfg.leaky_slope
    cache = {"x": x, "layers": {}}
    skips = [x]
    h = x
    for i in range(cfg.levels):
        z = ops.conv3d(h, P[f"enc{i}.w"], P[f"enc{i}.b"], 2)
        cache["layers"][f"enc{i}"] = (h, z)
        h = ops.leaky_relu(z, slope)
        skips.append(h)
    cache["concat_split"] = []
    for j in range(cfg.levels):
        z = ops.conv3d(h, P[f"dec{j}.w"], P[f"dec{j}.b"], 1)
        cache["layers"][f"dec{j}"] = (h, z)
        up = ops.upsample3d(ops.leaky_relu(z, slope))
        cache["concat_split"].append(up.shape[0])
        h = ops.concat_channels(up, skips[cfg.levels - 1 - j])
    z = ops.conv3d(h, P["full.w"], P["full.b"], 1)
    cache["layers"]["full"] = (h, z)
    h = ops.leaky_relu(z, slope)
    u = ops.conv3d(h, P["flow.w"], P["flow.b"], 1)
    cache["layers"]["flow"] = (h, None)
    return u, cache


def unet_backward(params: UNetParams, cache, grad_u: np.ndarray):
    """Gradients for every parameter (same keys as ``params.arrays``) and for the input."""
    cfg = params.config
    P = params.arrays
    slope = cfg.leaky_slope
    L = cfg.levels
    grads = {}

    h, _ = cache["layers"]["flow"]
    g, grads["flow.w"], grads["flow.b"] = ops.conv3d_backward(grad_u, h, P["flow.w"], 1)
    h, z = cache["layers"]["full"]
    g = ops.leaky_relu_backward(g, z, slope)
    g, grads["full.w"], grads["full.b"] = ops.conv3d_backward(g, h, P["full.w"], 1)

    # gradients flowing into encoder activations through skip connections
    skip_grads = [None] * (L + 1)
    for j in reversed(range(L)):
        g_up, g_skip = ops.concat_channels_backward(g, cache["concat_split"][j])
        skip_grads[L - 1 - j] = g_skip
        h, z = cache["layers"][f"dec{j}"]
        g = ops.leaky_relu_backward(ops.upsample3d_backward(g_up), z, slope)
        g, grads[f"dec{j}.w"], grads[f"dec{j}.b"] = ops.conv3d_backward(g, h, P[f"dec{j}.w"], 1)
    # g now is the gradient w.r.t. the deepest encoder activation
    for i in reversed(range(L)):
        if skip_grads[i + 1] is not None:
            g = g + skip_grads[i + 1]
        h, z = cache["layers"][f"enc{i}"]
        g = ops.leaky_relu_backward(g, z, slope)
        g, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = ops.conv3d_backward(g, h, P[f"enc{i}.w"], 2)
    grad_x = g + skip_grads[0]
    return {k: grads[k] for k in P}, grad_x


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def like(cls, arrays: dict, **kwargs) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
            **kwargs,
        )


def adam_step(arrays: dict, grads: dict, state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``arrays`` (and ``state``)."""
    if set(grads) != set(arrays):
        raise DimensionMismatchError("gradient keys do not match parameter keys")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in arrays.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionMismatchError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"DRCKPT1\n"


def save_checkpoint(path, params: UNetParams, state: Optional[AdamState] = None, extra: Optional[dict] = None) -> Path:
    """Binary checkpoint: magic, u64 header length, JSON header, float32 LE payloads.

    Payload order: parameters in declaration order, then Adam first and
    second moments in the same order when a state is given.
    """
    names = params.names()
    header = {
        "config": params.config.to_dict(),
        "seed": params.seed,
        "params": [[k, list(params.arrays[k].shape)] for k in names],
        "adam": None,
        "extra": extra or {},
    }
    blobs = [params.arrays[k] for k in names]
    if state is not None:
        header["adam"] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                          "eps": state.eps, "step": state.step}
        blobs += [state.m[k] for k in names] + [state.v[k] for k in names]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for b in blobs:
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    except OSError as exc:
        raise VolumeIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return Path(path)


def load_checkpoint(path):
    """Returns ``(params, adam_state_or_None, extra)``."""
    path = Path(path)
    if not path.is_file():
        raise VolumeIOError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(_MAGIC):
        raise VolumeIOError(f"{path}: not a checkpoint")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = header["config"]
    config = UNetConfig(**{**cfg, "enc_widths": tuple(cfg["enc_widths"])})

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        return arr

    try:
        arrays = {name: take(shape) for name, shape in header["params"]}
        state = None
        if header["adam"] is not None:
            a = header["adam"]
            m = {name: take(shape) for name, shape in header["params"]}
            v = {name: take(shape) for name, shape in header["params"]}
            state = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"], m, v)
    except ValueError as exc:
        raise VolumeIOError(f"{path}: truncated payload") from exc
    if off != len(data):
        raise VolumeIOError(f"{path}: trailing bytes after payload")
    return UNetParams(config, arrays, header["seed"]), state, header["extra"]
