"""Registration procedures.

* :func:`register_direct` optimizes a displacement field per instance.
* :func:`train_unet` / :func:`infer_unet` are the learned 3D-DF generator.
* :func:`register_rigid` is the DRR-similarity rigid baseline.
* :func:`register_2d` + :func:`apply_2ddf_to_volume` are the 2D-DF baseline.

Intensities are mapped from HU to [0, 1] (see ``losses.normalize_hu``)
before any volume loss; returned volumes are in HU.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .diffnet.unet import (
    AdamState,
    UNetConfig,
    UNetParams,
    adam_step,
    init_params,
    load_checkpoint,
    pack_input,
    save_checkpoint,
    unet_backward,
    unet_forward,
)
from .errors import DimensionMismatchError, NumericalError, ValidationError
from .losses import LossWeights, dvf_loss, mse_loss, normalize_hu, smooth_loss, total_loss
from .projector import ProjectionGeometry, raw_drr, render_drr, render_drr_adjoint, render_drr_array
from .volgrid import Image2D, LabelVolume, VolumeGrid, check_same_dims
from .warpfield import DisplacementField, linear_warp, linear_warp_backward, nearest_warp

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "L_total", "L_MSE", "L_smooth", "L_DVF")


@dataclass
class SolveReport:
    method: str
    seed: int = 0
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    # in-memory only (e.g. the optimizer state after training); never serialized
    artifacts: dict = field(default_factory=dict, repr=False)

    def record(self, step: int, total: float, mse: float, smooth: float = 0.0, dvf: float = 0.0) -> None:
        if not np.isfinite(total):
            raise NumericalError(f"{self.method}: non-finite loss at step {step}")
        if self.history and step <= self.history[-1]["step"]:
            raise ValidationError("history steps must increase")
        self.history.append({"step": int(step), "L_total": float(total), "L_MSE": float(mse),
                             "L_smooth": float(smooth), "L_DVF": float(dvf)})

    @property
    def initial_loss(self) -> float:
        return self.history[0]["L_total"]

    @property
    def best(self) -> dict:
        return min(self.history, key=lambda h: h["L_total"])

    def write_csv(self, path) -> Path:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.history:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return Path(path)

    def summary(self) -> str:
        """Deterministic text summary (wall clock excluded; see ``write``)."""
        body = {"method": self.method, "seed": self.seed, "config": self.config,
                "steps": len(self.history), "initial_loss": self.initial_loss,
                "best_step": self.best["step"], "final": self.final}
        return json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n"

    def write(self, out_dir, stem: str = "report") -> list[Path]:
        out_dir = Path(out_dir)
        csv_path = self.write_csv(out_dir / f"{stem}_loss.csv")
        txt = out_dir / f"{stem}.json"
        txt.write_text(self.summary())
        (out_dir / f"{stem}_timing.txt").write_text(f"wall_clock_s = {self.wall_clock:.3f}\n")
        return [csv_path, txt]


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return str(obj)


# ---------------------------------------------------------------------------
# direct displacement-field optimization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectOptions:
    steps: int = 300
    lr: float = 0.1
    seed: int = 0


def register_direct(v_s: VolumeGrid, i_s: Optional[Image2D], i_t: Optional[Image2D],
                    v_gt: Optional[VolumeGrid] = None, u_gt: Optional[DisplacementField] = None,
                    weights: LossWeights = LossWeights(), opts: DirectOptions = DirectOptions(),
                    target_geometry: Optional[ProjectionGeometry] = None,
                    callback: Optional[Callable[[int, np.ndarray], None]] = None):
    """Optimize u with Adam; returns ``(u_best, v_def, report)``.

    With ``v_gt`` the objective is the total loss on the warped volume
    (volume-supervised). Without it the objective is the DRR-domain MSE
    between the rendered warped source and ``i_t`` plus the smoothness term
    (and the DVF term when ``u_gt`` is given); rendering uses
    ``target_geometry`` or, by default, the source DRR's normalization.
    """
    t0 = time.perf_counter()
    dims = v_s.dims
    if weights.gamma_dvf > 0 and u_gt is None:
        raise ValidationError("gamma_dvf > 0 needs u_gt")
    if u_gt is not None:
        check_same_dims(dims, u_gt.dims, "register_direct u_gt")
    ug = None if u_gt is None else u_gt.components
    mode = "volume" if v_gt is not None else "projection"
    if mode == "volume":
        check_same_dims(dims, v_gt.dims, "register_direct v_gt")
        src = normalize_hu(v_s.values).astype(np.float32)
        gt = normalize_hu(v_gt.values).astype(np.float32)
    else:
        if i_t is None:
            raise ValidationError("projection-only mode needs the target DRR i_t")
        if i_t.dims != (dims[0], dims[2]):
            raise DimensionMismatchError(f"target DRR dims {i_t.dims} do not match volume {dims}")
        src = v_s.values
        geometry = target_geometry or render_drr(v_s)[1]
        target = i_t.values.astype(np.float32)

    report = SolveReport("direct", opts.seed, {"mode": mode, "weights": asdict(weights), **asdict(opts)})
    u = np.zeros((3, *dims), dtype=np.float32)
    state = AdamState.like({"u": u}, lr=opts.lr)
    best_u, best_loss = u.copy(), np.inf
    for step in range(opts.steps + 1):
        warped = linear_warp(src, u)
        if mode == "volume":
            terms = total_loss(gt, warped, ug, u, weights)
            total, mse, smooth, dvf = terms.total, terms.mse, terms.smooth, terms.dvf
            grad_warped, grad_u = terms.grad_v_def, terms.grad_u
        else:
            drr = render_drr_array(warped, geometry).astype(np.float32)
            mse, g_img = mse_loss(target, drr)
            smooth, g_s = smooth_loss(u)
            dvf, g_d = (0.0, 0.0) if ug is None or weights.gamma_dvf == 0 else dvf_loss(ug, u)
            total = mse + weights.lambda_smooth * smooth + weights.gamma_dvf * dvf
            grad_warped = render_drr_adjoint(g_img, geometry, dims, warped).astype(np.float32)
            grad_u = weights.lambda_smooth * g_s + weights.gamma_dvf * g_d
        report.record(step, total, mse, smooth, dvf)
        if callback is not None:
            callback(step, u)
        if total < best_loss:
            best_loss, best_u = total, u.copy()
        if step == opts.steps:
            break
        _, g_warp = linear_warp_backward(src, u, grad_warped, need_src=False)
        adam_step({"u": u}, {"u": (g_warp + grad_u).astype(np.float32)}, state)

    u_best = DisplacementField(best_u)
    v_def = VolumeGrid(linear_warp(v_s.values, u_best.components), v_s.spacing)
    report.final = {"L_total": float(best_loss), "best_step": report.best["step"]}
    report.wall_clock = time.perf_counter() - t0
    return u_best, v_def, report


# ---------------------------------------------------------------------------
# U-Net training and inference
# ---------------------------------------------------------------------------


@dataclass
class TrainingInstance:
    v_s: VolumeGrid
    i_s: Image2D
    i_t: Image2D
    v_gt: VolumeGrid
    u_gt: Optional[DisplacementField] = None


@dataclass(frozen=True)
class TrainOptions:
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None


def _instance_arrays(inst: TrainingInstance, packing: str):
    x = pack_input(inst.v_s, inst.i_s, inst.i_t, packing)
    gt = normalize_hu(inst.v_gt.values).astype(np.float32)
    ug = None if inst.u_gt is None else inst.u_gt.components
    return x, gt, ug


def instance_loss_and_grads(params: UNetParams, x, gt, ug, weights: LossWeights):
    u, cache = unet_forward(params, x)
    terms = total_loss(gt, linear_warp(x[0], u), ug, u, weights)
    _, g_warp = linear_warp_backward(x[0], u, terms.grad_v_def, need_src=False)
    grads, _ = unet_backward(params, cache, (g_warp + terms.grad_u).astype(x.dtype))
    return terms, grads


def epoch_order(seed: int, epoch: int, size: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(size)


def train_unet(dataset: Sequence[TrainingInstance], config: UNetConfig = UNetConfig(),
               weights: LossWeights = LossWeights(), epochs: int = 200, batch: int = 4,
               opts: TrainOptions = TrainOptions(), resume=None,
               on_epoch: Optional[Callable[[int, float], None]] = None, workers: int = 1):
    """Mini-batch Adam on the total loss averaged over each batch.

    Returns ``(params, report)``; ``report.final['epoch_mean_loss']`` holds the
    per-epoch mean total loss. ``resume`` is a checkpoint path written by an
    earlier call with the same dataset and options; training continues from
    the epoch stored in it.

    ``workers`` threads compute the per-instance gradients of a batch; they
    are summed in batch order, so the result does not depend on the count.
    """
    t0 = time.perf_counter()
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    run_instances = pool.map if pool is not None else map
    if not dataset:
        raise ValidationError("training set is empty")
    dims = dataset[0].v_s.dims
    for inst in dataset:
        for d in (inst.v_s.dims, inst.v_gt.dims):
            check_same_dims(dims, d, "training instance")
        if weights.gamma_dvf > 0 and inst.u_gt is None:
            raise ValidationError("gamma_dvf > 0 needs u_gt for every training instance")
    config.check_dims(dims)
    if batch < 1 or epochs < 0:
        raise ValidationError("batch must be >= 1 and epochs >= 0")

    arrays = [_instance_arrays(inst, config.packing) for inst in dataset]
    start_epoch = 0
    epoch_means: list[float] = []
    history: list[dict] = []
    if resume is not None:
        params, state, extra = load_checkpoint(resume)
        if params.config != config:
            raise ValidationError("checkpoint config differs from the requested config")
        if state is None:
            raise ValidationError("checkpoint has no optimizer state to resume from")
        start_epoch = int(extra["epoch"])
        epoch_means = list(extra.get("epoch_mean_loss", []))
        history = list(extra.get("history", []))
    else:
        params = init_params(config, opts.seed)
        state = AdamState.like(params.arrays, lr=opts.lr)

    report = SolveReport("unet", opts.seed, {"config": config.to_dict(), "weights": asdict(weights),
                                             "epochs": epochs, "batch": batch, **asdict(opts)})
    report.history = history
    step = len(history)
    n = len(arrays)
    for epoch in range(start_epoch, epochs):
        order = epoch_order(opts.seed, epoch, n)
        epoch_total = 0.0
        for start in range(0, n, batch):
            members = order[start:start + batch]
            acc = None
            sums = np.zeros(4)
            per_instance = run_instances(lambda idx: instance_loss_and_grads(params, *arrays[idx], weights), members)
            for terms, grads in per_instance:
                sums += (terms.total, terms.mse, terms.smooth, terms.dvf)
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            scale = np.float32(1.0 / len(members))
            for k in acc:
                acc[k] *= scale
            means = sums / len(members)
            report.record(step, *means)
            epoch_total += sums[0]
            adam_step(params.arrays, acc, state)
            step += 1
        epoch_means.append(epoch_total / n)
        log.info("epoch %d mean loss %.6g", epoch + 1, epoch_means[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_means[-1])
        if opts.checkpoint_every and opts.checkpoint_dir and (epoch + 1) % opts.checkpoint_every == 0:
            save_checkpoint(Path(opts.checkpoint_dir) / f"ckpt_epoch{epoch + 1:04d}.bin", params, state,
                            {"epoch": epoch + 1, "epoch_mean_loss": epoch_means, "history": report.history})
    report.final = {"epoch_mean_loss": epoch_means, "steps": step, "epochs": epochs}
    report.wall_clock = time.perf_counter() - t0
    report.artifacts["adam"] = state
    if pool is not None:
        pool.shutdown()
    return params, report


def checkpoint_extra(report: SolveReport) -> dict:
    return {"epoch": report.final.get("epochs", 0), "epoch_mean_loss": report.final.get("epoch_mean_loss", []),
            "history": report.history}


def infer_unet(params: UNetParams, v_s: VolumeGrid, i_s: Image2D, i_t: Image2D):
    """Single forward pass and warp; returns ``(u, v_def)``."""
    params.config.check_dims(v_s.dims)
    x = pack_input(v_s, i_s, i_t, params.config.packing)
    u, _ = unet_forward(params, x)
    field_ = DisplacementField(u)
    return field_, VolumeGrid(linear_warp(v_s.values, field_.components), v_s.spacing)


# ---------------------------------------------------------------------------
# rigid baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidParams:
    """Translation in voxels; rotations in degrees about the volume centre, applied x, then y, then z."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def __post_init__(self):
        for name in ("rx", "ry", "rz"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    @classmethod
    def from_vector(cls, vec) -> "RigidParams":
        return cls(*(float(v) for v in vec))

    def vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz])


def wrap_angle(deg: float) -> float:
    """Map to (-180, 180]."""
    w = float(deg) % 360.0
    return w - 360.0 if w > 180.0 else w


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    ax, ay, az = np.deg2rad([rx, ry, rz])
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def rigid_displacement(dims, theta: RigidParams) -> np.ndarray:
    """Pull-back field of the map ``p -> R (p - c) + c + t``."""
    centre = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    rel = np.stack(grids) - centre[:, None, None, None]
    t = np.array([theta.tx, theta.ty, theta.tz])
    R = rotation_matrix(theta.rx, theta.ry, theta.rz)
    shifted = rel - t[:, None, None, None]
    src_rel = np.tensordot(R.T, shifted, axes=([1], [0]))
    return src_rel - rel


def apply_rigid(v: VolumeGrid, theta: RigidParams) -> VolumeGrid:
    """Move the volume content by ``theta`` (trilinear, clamp-to-edge)."""
    disp = rigid_displacement(v.dims, theta)
    return VolumeGrid(linear_warp(v.values.astype(np.float64), disp).astype(np.float32), v.spacing)


def apply_rigid_labels(lv: LabelVolume, theta: RigidParams) -> LabelVolume:
    return LabelVolume(nearest_warp(lv.labels, rigid_displacement(lv.dims, theta)))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / denom) if denom > 0 else 0.0


@dataclass(frozen=True)
class RigidOptions:
    restarts: int = 3
    seed: int = 0
    max_iter: int = 600
    translation_step: float = 2.0
    rotation_step: float = 3.0
    start_spread: tuple[float, float] = (2.0, 3.0)
    xatol: float = 1e-2
    fatol: float = 1e-7
    optimize_ty: bool = False


def register_rigid(v_s: VolumeGrid, i_t: Image2D, opts: RigidOptions = RigidOptions()):
    """Nelder-Mead over the rigid parameters maximizing DRR normalized cross-correlation.

    The loss recorded is ``1 - NCC``. The first start is the identity, the
    others are seeded random perturbations of it. Translation along the
    projection axis (ty) leaves a parallel-beam DRR unchanged, so the simplex
    wanders freely along it; unless ``optimize_ty`` is set, ty is held at its
    start value (0) and the simplex spans the other five parameters.
    """
    t0 = time.perf_counter()
    dims = v_s.dims
    if i_t.dims != (dims[0], dims[2]):
        raise DimensionMismatchError(f"target DRR dims {i_t.dims} do not match volume {dims}")
    src = v_s.values.astype(np.float64)
    target = i_t.values

    free = [0, 1, 2, 3, 4, 5] if opts.optimize_ty else [0, 2, 3, 4, 5]

    def full(vec):
        out = np.zeros(6)
        out[free] = vec
        return out

    def objective(vec):
        disp = rigid_displacement(dims, RigidParams.from_vector(full(vec)))
        return 1.0 - ncc(raw_drr(linear_warp(src, disp)), target)

    rng = np.random.default_rng(opts.seed)
    report = SolveReport("rigid", opts.seed, asdict(opts))
    ts, rs = opts.start_spread
    starts = [np.zeros(6)]
    for _ in range(max(opts.restarts, 1) - 1):
        starts.append(np.concatenate([rng.uniform(-ts, ts, 3), rng.uniform(-rs, rs, 3)]))
    steps = np.array([opts.translation_step] * 3 + [opts.rotation_step] * 3)[free]
    starts = [s[free] for s in starts]

    initial = objective(np.zeros(len(free)))
    report.record(0, initial, initial)
    best_vec, best_val = np.zeros(len(free)), initial
    it = 0
    for start in starts:
        simplex = np.vstack([start, start + np.diag(steps)])
        res = minimize(objective, start, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "maxiter": opts.max_iter,
                                "xatol": opts.xatol, "fatol": opts.fatol})
        it += max(int(res.nit), 1)
        if res.fun < best_val:
            best_val, best_vec = float(res.fun), res.x
        report.record(it, best_val, best_val)
    theta = RigidParams.from_vector(full(best_vec))
    report.final = {"L_total": best_val, "ncc": 1.0 - best_val, "params": asdict(theta)}
    report.wall_clock = time.perf_counter() - t0
    return theta, apply_rigid(v_s, theta), report


# ---------------------------------------------------------------------------
# 2D-DF baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dvf2D:
    """In-plane displacement ``components[c, x, z]`` with c = (ux, uz); no AP component."""

    components: np.ndarray

    def __post_init__(self):
        comp = np.array(self.components, dtype=np.float32, copy=True)
        if comp.ndim != 3 or comp.shape[0] != 2:
            raise ValidationError(f"2D field must have shape (2, nx, nz), got {comp.shape}")
        if not np.isfinite(comp).all():
            raise ValidationError("2D field contains non-finite values")
        comp.flags.writeable = False
        object.__setattr__(self, "components", comp)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(d) for d in self.components.shape[1:])


@dataclass(frozen=True)
class TwoDOptions:
    steps: int = 300
    lr: float = 0.1
    seed: int = 0


def register_2d(i_s: Image2D, i_t: Image2D, weights: LossWeights = LossWeights(),
                opts: TwoDOptions = TwoDOptions()):
    """Direct optimization of a 2D field: MSE(warp2d(i_s, u), i_t) + lambda * smooth2d(u)."""
    t0 = time.perf_counter()
    check_same_dims(i_s.dims, i_t.dims, "register_2d")
    src = i_s.values
    target = i_t.values
    u = np.zeros((2, *i_s.dims), dtype=np.float32)
    state = AdamState.like({"u": u}, lr=opts.lr)
    report = SolveReport("2ddf", opts.seed, {"weights": asdict(weights), **asdict(opts)})
    best_u, best_loss = u.copy(), np.inf
    for step in range(opts.steps + 1):
        warped = linear_warp(src, u)
        mse, g_img = mse_loss(target, warped)
        smooth, g_s = smooth_loss(u)
        total = mse + weights.lambda_smooth * smooth
        report.record(step, total, mse, smooth)
        if total < best_loss:
            best_loss, best_u = total, u.copy()
        if step == opts.steps:
            break
        _, g_u = linear_warp_backward(src, u, g_img, need_src=False)
        adam_step({"u": u}, {"u": g_u + weights.lambda_smooth * g_s}, state)
    report.final = {"L_total": float(best_loss), "best_step": report.best["step"]}
    report.wall_clock = time.perf_counter() - t0
    return Dvf2D(best_u), report


def lift_2ddf(u2d: Dvf2D, ny: int) -> np.ndarray:
    """3D field applying ``u2d`` to every coronal slice, zero along y."""
    nx, nz = u2d.dims
    disp = np.zeros((3, nx, ny, nz), dtype=np.float32)
    disp[0] = u2d.components[0][:, None, :]
    disp[2] = u2d.components[1][:, None, :]
    return disp


def apply_2ddf_to_volume(v_s: VolumeGrid, u2d: Dvf2D) -> VolumeGrid:
    nx, ny, nz = v_s.dims
    if u2d.dims != (nx, nz):
        raise DimensionMismatchError(f"2D field dims {u2d.dims} do not match coronal plane {(nx, nz)}")
    return VolumeGrid(linear_warp(v_s.values, lift_2ddf(u2d, ny)), v_s.spacing)


def apply_2ddf_to_labels(lv: LabelVolume, u2d: Dvf2D) -> LabelVolume:
    return LabelVolume(nearest_warp(lv.labels, lift_2ddf(u2d, lv.dims[1])))
