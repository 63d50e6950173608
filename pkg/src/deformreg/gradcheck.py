"""Central finite-difference checks for every differentiable operation.

Each check draws randomized small instances, reduces the operation to a
scalar through a random cotangent, and compares the analytic directional
derivative against ``(f(x + h d) - f(x - h d)) / 2h`` along directions ``d``
made of a random unit vector plus the normalized analytic gradient. Relative error is ``|a - n| / max(|a|, |n|)``; pairs where both are
below ``abs_floor`` count as agreeing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, projector
from .diffnet import ops
from .diffnet.unet import UNetConfig, init_params, unet_backward, unet_forward
from .warpfield import linear_warp, linear_warp_backward


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    tol: float
    dtype: str

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(a: float, n: float, abs_floor: float = 1e-10) -> float:
    scale = max(abs(a), abs(n))
    if scale < abs_floor:
        return 0.0
    return abs(a - n) / scale


def directional_error(f: Callable[[list], float], xs: list, grads: list, rng, n_dirs=3,
                      h=1e-6, abs_floor=1e-10) -> float:
    """Worst relative error over ``n_dirs`` random joint directions in all inputs."""
    worst = 0.0
    for _ in range(n_dirs):
        rand = [rng.standard_normal(x.shape) for x in xs]
        rnorm = np.sqrt(sum(float(np.sum(r ** 2)) for r in rand))
        gnorm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        # random direction plus the normalized gradient keeps the derivative away from 0
        dirs = []
        for r, g, x in zip(rand, grads, xs):
            d = r / rnorm + (g.astype(np.float64) / gnorm if gnorm > 0 else 0.0)
            dirs.append((d / np.sqrt(2.0)).astype(x.dtype))
        xp = [x + x.dtype.type(h) * d for x, d in zip(xs, dirs)]
        xm = [x - x.dtype.type(h) * d for x, d in zip(xs, dirs)]
        numeric = (f(xp) - f(xm)) / (2 * h)
        # project onto the step actually realized, so input rounding in 32-bit mode cancels
        analytic = sum(
            float(np.sum(g.astype(np.float64) * (a.astype(np.float64) - b.astype(np.float64)))) / (2 * h)
            for g, a, b in zip(grads, xp, xm)
        )
        worst = max(worst, rel_err(analytic, numeric, abs_floor))
    return worst


def _away_from_integers(u, margin=1e-3):
    frac = u - np.round(u)
    return np.where(np.abs(frac) < margin, u + 3 * margin, u)


# ---------------------------------------------------------------------------
# individual checks; each returns the max relative error over its instances
# ---------------------------------------------------------------------------


def check_warp(rng, instances, dtype=np.float64, ndim=3):
    worst = 0.0
    h = 1e-6 if dtype == np.float64 else 1e-2
    for _ in range(instances):
        shape = tuple(rng.integers(3, 6, size=ndim))
        src = rng.standard_normal(shape).astype(dtype)
        disp = _away_from_integers(rng.uniform(-1.8, 1.8, size=(ndim, *shape))).astype(dtype)
        cot = rng.standard_normal(shape).astype(dtype)
        g_src, g_disp = linear_warp_backward(src, disp, cot)
        f = lambda xs: float(np.sum(cot.astype(np.float64) * linear_warp(xs[0], xs[1])))
        worst = max(worst, directional_error(f, [src, disp], [g_src, g_disp], rng, h=h))
    return worst


def check_projector(rng, instances, dtype=np.float64):
    worst = 0.0
    h = 1e-4 if dtype == np.float64 else 1e-1
    for _ in range(instances):
        n = int(rng.choice([4, 8]))
        hu = rng.uniform(-1000, 1000, size=(n, n, n))
        # keep voxels clear of the attenuation clamp at -1000 HU
        hu = np.where(np.abs(hu + 1000) < 5, hu + 20, hu).astype(dtype)
        hu[0, 0, 0] = -1200.0
        raw = projector.raw_drr(hu)
        geom = projector.ProjectionGeometry((n, n), n, float(raw.min()), float(raw.max()))
        cot = rng.standard_normal((n, n)).astype(dtype)
        grad = projector.render_drr_adjoint(cot, geom, hu.shape, hu)
        f = lambda xs: float(np.sum(cot * projector.render_drr_array(xs[0], geom)))
        worst = max(worst, directional_error(f, [hu], [grad], rng, h=h))
    return worst


def check_conv3d(rng, instances, dtype=np.float64):
    worst = 0.0
    # conv is bilinear in (x, kernel), so central differences carry no truncation
    # error and a large step keeps 32-bit rounding small relative to the signal
    h = 1e-6 if dtype == np.float64 else 0.25
    for _ in range(instances):
        stride = int(rng.choice([1, 2]))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        n = int(rng.choice([2, 4, 6]))
        x = rng.standard_normal((cin, n, n, n)).astype(dtype)
        w = rng.standard_normal((cout, cin, 3, 3, 3)).astype(dtype)
        b = rng.standard_normal(cout).astype(dtype)
        out = ops.conv3d(x, w, b, stride)
        cot = rng.standard_normal(out.shape).astype(dtype)
        gx, gw, gb = ops.conv3d_backward(cot, x, w, stride)
        f = lambda xs: float(np.sum(cot.astype(np.float64) * ops.conv3d(xs[0], xs[1], xs[2], stride)))
        worst = max(worst, directional_error(f, [x, w, b], [gx, gw, gb], rng, h=h))
    return worst


def check_leaky_relu(rng, instances, dtype=np.float64):
    worst = 0.0
    h = 1e-6 if dtype == np.float64 else 1e-2
    for _ in range(instances):
        x = rng.standard_normal((2, 3, 3, 3))
        x = np.where(np.abs(x) < 1e-2, x + 0.05, x).astype(dtype)
        cot = rng.standard_normal(x.shape).astype(dtype)
        g = ops.leaky_relu_backward(cot, x)
        f = lambda xs: float(np.sum(cot.astype(np.float64) * ops.leaky_relu(xs[0])))
        worst = max(worst, directional_error(f, [x], [g], rng, h=h))
    return worst


def check_upsample(rng, instances, dtype=np.float64):
    worst = 0.0
    for _ in range(instances):
        x = rng.standard_normal((int(rng.integers(1, 4)), 2, 3, 2)).astype(dtype)
        cot = rng.standard_normal((x.shape[0], 4, 6, 4)).astype(dtype)
        g = ops.upsample3d_backward(cot)
        f = lambda xs: float(np.sum(cot.astype(np.float64) * ops.upsample3d(xs[0])))
        worst = max(worst, directional_error(f, [x], [g], rng, h=1e-6 if dtype == np.float64 else 1e-2))
    return worst


def check_concat(rng, instances, dtype=np.float64):
    worst = 0.0
    for _ in range(instances):
        a = rng.standard_normal((2, 3, 3, 3)).astype(dtype)
        b = rng.standard_normal((1, 3, 3, 3)).astype(dtype)
        cot = rng.standard_normal((3, 3, 3, 3)).astype(dtype)
        ga, gb = ops.concat_channels_backward(cot, 2)
        f = lambda xs: float(np.sum(cot * ops.concat_channels(xs[0], xs[1])))
        worst = max(worst, directional_error(f, [a, b], [ga, gb], rng))
    return worst


def check_losses(rng, instances):
    worst = 0.0
    for _ in range(instances):
        shape = tuple(rng.integers(2, 5, size=3))
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape)
        u = rng.standard_normal((3, *shape))
        ug = rng.standard_normal((3, *shape))
        _, g = losses.mse_loss(a, b)
        worst = max(worst, directional_error(lambda xs: losses.mse_loss(a, xs[0])[0], [b], [g], rng))
        _, g = losses.smooth_loss(u)
        worst = max(worst, directional_error(lambda xs: losses.smooth_loss(xs[0])[0], [u], [g], rng))
        _, g = losses.dvf_loss(ug, u)
        worst = max(worst, directional_error(lambda xs: losses.dvf_loss(ug, xs[0])[0], [u], [g], rng))
        w = losses.LossWeights(float(rng.uniform(0, 1)), float(rng.uniform(0, 2)))
        t = losses.total_loss(a, b, ug, u, w)
        f = lambda xs: losses.total_loss(a, xs[0], ug, xs[1], w).total
        worst = max(worst, directional_error(f, [b, u], [t.grad_v_def, t.grad_u], rng))
    return worst


def check_warp_loss_chain(rng, instances):
    """Total loss of a warped volume w.r.t. the field, through warp + losses."""
    worst = 0.0
    w = losses.LossWeights(0.05, 1.0)
    for _ in range(instances):
        shape = (4, 4, 4)
        src = rng.random(shape)
        gt = rng.random(shape)
        ug = rng.standard_normal((3, *shape))
        u = _away_from_integers(rng.uniform(-1.5, 1.5, size=(3, *shape)))

        def value(xs):
            return losses.total_loss(gt, linear_warp(src, xs[0]), ug, xs[0], w).total

        t = losses.total_loss(gt, linear_warp(src, u), ug, u, w)
        _, g_u = linear_warp_backward(src, u, t.grad_v_def)
        worst = max(worst, directional_error(value, [u], [g_u + t.grad_u], rng))
    return worst


def check_unet_end_to_end(rng, instances, n=8, levels=2):
    """Loss of the warped source w.r.t. U-Net parameters, in float64."""
    worst = 0.0
    cfg = UNetConfig(levels=levels, enc_widths=(4,) * levels, full_width=4)
    weights = losses.LossWeights(0.05, 0.5)
    for _ in range(instances):
        params = init_params(cfg, int(rng.integers(2 ** 31)), dtype=np.float64)
        params.arrays["flow.w"] = rng.normal(0, 0.3, params.arrays["flow.w"].shape)
        params.arrays["flow.b"] = rng.normal(0, 0.3, 3)
        src = rng.random((n, n, n))
        x = np.stack([src, rng.random((n, n, n))])
        gt = rng.random((n, n, n))
        ug = rng.standard_normal((3, n, n, n))
        names = params.names()

        def value(xs):
            p = params.copy()
            p.arrays = dict(zip(names, xs))
            u, _ = unet_forward(p, x)
            return losses.total_loss(gt, linear_warp(src, u), ug, u, weights).total

        u, cache = unet_forward(params, x)
        t = losses.total_loss(gt, linear_warp(src, u), ug, u, weights)
        _, g_u = linear_warp_backward(src, u, t.grad_v_def)
        grads, _ = unet_backward(params, cache, g_u + t.grad_u)
        xs = [params.arrays[k] for k in names]
        worst = max(worst, directional_error(value, xs, [grads[k] for k in names], rng, n_dirs=2, h=1e-6))
    return worst


def run_suite(instances: int = 20, seed: int = 0, e2e_instances: int | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    e2e = instances if e2e_instances is None else e2e_instances
    f64, f32 = 1e-4, 1e-3
    results = [
        CheckResult("warp3d", instances, check_warp(rng, instances), f64, "float64"),
        CheckResult("warp2d", instances, check_warp(rng, instances, ndim=2), f64, "float64"),
        CheckResult("projector_adjoint", instances, check_projector(rng, instances), f64, "float64"),
        CheckResult("conv3d", instances, check_conv3d(rng, instances), f64, "float64"),
        CheckResult("leaky_relu", instances, check_leaky_relu(rng, instances), f64, "float64"),
        CheckResult("upsample3d", instances, check_upsample(rng, instances), f64, "float64"),
        CheckResult("concat", instances, check_concat(rng, instances), f64, "float64"),
        CheckResult("losses", instances, check_losses(rng, instances), f64, "float64"),
        CheckResult("warp_loss_chain", instances, check_warp_loss_chain(rng, instances), f64, "float64"),
        CheckResult("unet_end_to_end", e2e, check_unet_end_to_end(rng, e2e), f64, "float64"),
        CheckResult("conv3d", instances, check_conv3d(rng, instances, np.float32), f32, "float32"),
        CheckResult("leaky_relu", instances, check_leaky_relu(rng, instances, np.float32), f32, "float32"),
        CheckResult("upsample3d", instances, check_upsample(rng, instances, np.float32), f32, "float32"),
    ]
    return results


def format_results(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'check':<20} {'dtype':<8} {'n':>3} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.dtype:<8} {r.instances:>3} {r.max_rel_err:>12.3e} {r.tol:>8.0e}  "
                     + ("PASS" if r.passed else "FAIL"))
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f} s")
    return "\n".join(lines)


if __name__ == "__main__":
    t0 = time.perf_counter()
    res = run_suite()
    print(format_results(res, time.perf_counter() - t0))
