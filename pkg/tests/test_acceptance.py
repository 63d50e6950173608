"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line with the measured values;
the lines are repeated in the pytest terminal summary. Phantom amplitudes
scale with the grid (``default_amplitudes``), so a 32^3 run sees half the
voxel motion of a 64^3 run.
"""

import json
import time

import numpy as np
import pytest

from deformreg.cli import run
from deformreg.diffnet import UNetConfig, save_checkpoint
from deformreg.gradcheck import format_results, run_suite
from deformreg.losses import LossWeights, mse_loss, normalize_hu
from deformreg.metrics import dsc, evaluate_case, mae, mean_endpoint_error
from deformreg.phantom import (PHASES, PhantomSpec, RespiratoryModel, build_reference, default_amplitudes,
                               generate_4dct, random_model)
from deformreg.projector import render_drr
from deformreg.solvers import (DirectOptions, RigidOptions, RigidParams, TrainingInstance, TrainOptions,
                               TwoDOptions, apply_2ddf_to_labels, apply_2ddf_to_volume, apply_rigid,
                               apply_rigid_labels, checkpoint_extra, infer_unet, register_2d, register_direct,
                               register_rigid, train_unet)
from deformreg.volgrid import LIVER, STOMACH, LabelVolume, VolumeGrid
from deformreg.warpfield import DisplacementField, linear_warp, trilinear_weights, warp_labels, warp_volume

from conftest import record_criterion


def check(number, passed, detail):
    record_criterion(number, bool(passed), detail)
    assert passed, detail


def _model(spec, scale=1.0):
    a, b = default_amplitudes(spec.n)
    return RespiratoryModel.for_spec(spec, amp_si=a * scale, amp_ap=b * scale)


def _instance(f0, ft):
    return TrainingInstance(f0.volume, render_drr(f0.volume)[0], render_drr(ft.volume)[0], ft.volume, ft.u_gt)


@pytest.fixture(scope="module")
def task32():
    """Phase 0 -> phase 50 at n=32: the deformable phantom task."""
    spec = PhantomSpec(n=32)
    f0, f50 = generate_4dct(spec, _model(spec), phases=(0, 50))
    return f0, f50, evaluate_case(f50.volume, f50.labels, f0.volume, f0.labels)


@pytest.fixture(scope="module")
def direct32(task32):
    f0, f50, _ = task32
    t0 = time.perf_counter()
    u, v_def, rep = register_direct(f0.volume, None, None, f50.volume, weights=LossWeights(0.05, 0.0),
                                    opts=DirectOptions(steps=300))
    elapsed = time.perf_counter() - t0
    return u, v_def, rep, evaluate_case(f50.volume, f50.labels, v_def, warp_labels(f0.labels, u)), elapsed


@pytest.fixture(scope="module")
def unet16():
    """20 randomized-amplitude training pairs and 4 held-out t=50 pairs at 16^3, trained 200 epochs."""
    t0 = time.perf_counter()
    spec = PhantomSpec(n=16)
    base = _model(spec)
    rng = np.random.default_rng(0)

    def make(t):
        m = random_model(spec, rng, (0.6, 1.4), (0.6, 1.4), base)
        f0, ft = generate_4dct(spec, m, phases=(0, t))
        return _instance(f0, ft), f0, ft

    train = [make(int(rng.choice([10, 20, 30, 40, 50, 60, 70, 80, 90])))[0] for _ in range(20)]
    held_out = [make(50) for _ in range(4)]
    params, rep = train_unet(train, UNetConfig(), LossWeights(0.05, 1.0), epochs=200, batch=4)
    cases = []
    for inst, f0, ft in held_out:
        u, v_def = infer_unet(params, inst.v_s, inst.i_s, inst.i_t)
        cases.append({
            "f0": f0, "ft": ft, "inst": inst,
            "initial": evaluate_case(ft.volume, ft.labels, f0.volume, f0.labels),
            "unet": evaluate_case(ft.volume, ft.labels, v_def, warp_labels(f0.labels, u)),
        })
    return params, rep, cases, time.perf_counter() - t0


# ---------------------------------------------------------------------------


def test_criterion_01_gradient_correctness(tmp_path):
    t0 = time.perf_counter()
    results = run_suite(instances=20, seed=0)
    elapsed = time.perf_counter() - t0
    print(format_results(results, elapsed))
    code = run(["gradcheck", "--out", str(tmp_path)])
    worst64 = max(r.max_rel_err for r in results if r.dtype == "float64")
    worst32 = max(r.max_rel_err for r in results if r.dtype == "float32")
    names = {r.name for r in results}
    required = {"warp3d", "projector_adjoint", "conv3d", "leaky_relu", "upsample3d", "losses", "unet_end_to_end"}
    ok = (all(r.passed and r.instances >= 20 for r in results) and required <= names
          and code == 0 and elapsed < 120)
    check(1, ok, f"{len(results)} checks, max rel err float64 {worst64:.1e} (<1e-4), float32 {worst32:.1e} "
                 f"(<1e-3), gradcheck exit {code}, suite {elapsed:.1f} s (<120 s)")


def test_criterion_02_warp_identities():
    rng = np.random.default_rng(2)
    src = rng.uniform(-1000, 1000, (7, 6, 5)).astype(np.float32)
    zero_ok = np.array_equal(linear_warp(src, np.zeros((3, 7, 6, 5), np.float32)), src)
    shift_ok = True
    for shift in [(1, 0, 0), (0, 2, 0), (0, 0, -1), (-2, 1, 3)]:
        disp = np.broadcast_to(np.array(shift, np.float32)[:, None, None, None], (3, 7, 6, 5))
        idx = np.meshgrid(*[np.clip(np.arange(n) + s, 0, n - 1) for n, s in zip(src.shape, shift)], indexing="ij")
        shift_ok &= np.array_equal(linear_warp(src, disp), src[tuple(idx)])
    affine_err = 0.0
    g = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in (7, 6, 5)], indexing="ij")
    for _ in range(20):
        a = rng.uniform(-3, 3, 4)
        vals = a[0] * g[0] + a[1] * g[1] + a[2] * g[2] + a[3]
        u = np.stack([rng.uniform(-gi, (n - 1) - gi) for gi, n in zip(g, (7, 6, 5))])
        want = a[0] * (g[0] + u[0]) + a[1] * (g[1] + u[1]) + a[2] * (g[2] + u[2]) + a[3]
        affine_err = max(affine_err, np.abs(linear_warp(vals, u) - want).max())
    pu_err = max(abs(trilinear_weights(p).sum() - 1.0) for p in rng.uniform(0, 10, (1000, 3)))
    ok = zero_ok and shift_ok and affine_err <= 1e-5 and pu_err <= 1e-6
    check(2, ok, f"zero field bitwise {zero_ok}, integer shifts {shift_ok}, affine max err {affine_err:.1e} "
                 f"(<=1e-5), partition of unity err {pu_err:.1e} (<=1e-6)")


def test_criterion_03_phantom_self_consistency():
    spec = PhantomSpec()  # n = 64
    ref, ref_lab = build_reference(spec)
    frames = generate_4dct(spec, RespiratoryModel.for_spec(spec))
    warp_ok = all(warp_volume(ref, f.u_gt).equals(f.volume) for f in frames)
    warp0_ok = all(warp_volume(frames[0].volume, f.u_gt).equals(f.volume) for f in frames)
    dscs = [dsc(warp_labels(ref_lab, f.u_gt), f.labels, lab) for f in frames for lab in (LIVER, STOMACH)]
    by_t = {f.phase: f for f in frames}
    sym_ok = all(by_t[t].volume.equals(by_t[100 - t].volume) and np.array_equal(by_t[t].labels.labels,
                                                                                  by_t[100 - t].labels.labels)
                 for t in PHASES if t > 50)
    ok = len(frames) == 10 and warp_ok and warp0_ok and min(dscs) == 1.0 and sym_ok
    check(3, ok, f"n=64, {len(frames)} phases: warp(frame0, u_gt) bitwise {warp_ok and warp0_ok}, "
                 f"min label DSC {min(dscs):.3f}, t/100-t identical {sym_ok}")


def test_criterion_04_direct_registration(task32, direct32):
    _, _, initial = task32
    _, _, rep, result, elapsed = direct32
    ok = (result.mae_hu <= 0.5 * initial.mae_hu
          and result.dsc["liver"] > initial.dsc["liver"]
          and result.dsc["stomach"] > initial.dsc["stomach"]
          and elapsed < 300)
    check(4, ok, f"MAE {initial.mae_hu:.1f} -> {result.mae_hu:.1f} HU (<= {0.5 * initial.mae_hu:.1f}), "
                 f"liver DSC {initial.dsc['liver']:.3f} -> {result.dsc['liver']:.3f}, "
                 f"stomach DSC {initial.dsc['stomach']:.3f} -> {result.dsc['stomach']:.3f}, {elapsed:.1f} s (<300 s)")


def test_criterion_05_supervised_field_recovery(task32):
    f0, f50, _ = task32
    u, _, _ = register_direct(f0.volume, None, None, f50.volume, f50.u_gt, LossWeights(0.05, 1.0),
                              DirectOptions(steps=300))
    epe = mean_endpoint_error(u, f50.u_gt)
    mean_gt = float(f50.u_gt.magnitude().mean())
    check(5, epe <= 0.5 * mean_gt, f"mean endpoint error {epe:.2e} voxels <= 0.5 x mean |u_gt| = {0.5 * mean_gt:.3f}")


@pytest.mark.slow
def test_criterion_06_overfit_and_determinism(tmp_path):
    spec = PhantomSpec(n=16)
    f0, f50 = generate_4dct(spec, _model(spec), phases=(0, 50))
    data = [_instance(f0, f50)]
    blobs, ratios = [], []
    for k in range(2):
        params, rep = train_unet(data, UNetConfig(), LossWeights(), epochs=500, batch=1,
                                 opts=TrainOptions(lr=1e-4, seed=0))
        mses = [h["L_MSE"] for h in rep.history]
        ratios.append(min(mses) / mses[0])
        path = save_checkpoint(tmp_path / f"run{k}.bin", params, rep.artifacts["adam"], checkpoint_extra(rep))
        blobs.append(path.read_bytes())
    same = blobs[0] == blobs[1]
    final_ratio = rep.history[-1]["L_MSE"] / rep.history[0]["L_MSE"]
    ok = len(rep.history) == 500 and ratios[0] <= 0.1 and same
    check(6, ok, f"500 steps at 16^3: best L_MSE ratio {ratios[0]:.4f}, final {final_ratio:.4f} (<=0.10); "
                 f"same-seed checkpoints identical {same}")


@pytest.mark.slow
def test_criterion_07_unet_generalization(unet16):
    _, rep, cases, elapsed = unet16
    lines = []
    ok = elapsed < 3600
    for c in cases:
        i, r = c["initial"], c["unet"]
        ok &= r.mae_hu < i.mae_hu and r.dsc["liver"] > i.dsc["liver"] and r.dsc["stomach"] > i.dsc["stomach"]
        lines.append(f"MAE {i.mae_hu:.1f}->{r.mae_hu:.1f} liver {i.dsc['liver']:.2f}->{r.dsc['liver']:.2f} "
                     f"stomach {i.dsc['stomach']:.2f}->{r.dsc['stomach']:.2f}")
    check(7, ok, f"4 held-out cases [{'; '.join(lines)}], train+eval {elapsed:.0f} s (<3600 s)")


@pytest.mark.slow
def test_criterion_08_rigid_baseline(task32, direct32, unet16):
    f0, f50, _ = task32
    truth = RigidParams(tx=3.0, tz=-3.0, ry=5.0)
    target = render_drr(apply_rigid(f0.volume, truth))[0]
    theta, _, _ = register_rigid(f0.volume, target, RigidOptions(seed=0))
    t_err = np.abs(theta.vector()[:3] - truth.vector()[:3]).max()
    r_err = np.abs(theta.vector()[3:] - truth.vector()[3:]).max()
    recovered = t_err <= 1.0 and r_err <= 1.0

    # deformable task at 32^3: rigid vs direct
    _, v_rigid, _ = register_rigid(f0.volume, render_drr(f50.volume)[0], RigidOptions(seed=0))
    rigid_mae = mae(f50.volume, v_rigid)
    direct_mae = direct32[3].mae_hu
    # held-out 16^3 cases: rigid vs U-Net
    _, _, cases, _ = unet16
    pairs = []
    for c in cases:
        th, v_r, _ = register_rigid(c["f0"].volume, c["inst"].i_t, RigidOptions(seed=0))
        c["rigid"] = evaluate_case(c["ft"].volume, c["ft"].labels, v_r, apply_rigid_labels(c["f0"].labels, th))
        pairs.append((c["rigid"].mae_hu, c["unet"].mae_hu))
    ordering = rigid_mae > direct_mae and all(r > u for r, u in pairs)
    check(8, recovered and ordering,
          f"recovery err {t_err:.2f} vox / {r_err:.2f} deg (<=1); rigid MAE {rigid_mae:.1f} > direct {direct_mae:.1f} "
          f"at 32^3; rigid vs U-Net held-out " + ", ".join(f"{r:.1f}>{u:.1f}" for r, u in pairs))


@pytest.mark.slow
def test_criterion_09_2ddf_baseline(task32, direct32, unet16):
    f0, f50, initial = task32
    assert _model(PhantomSpec(n=32)).amp_ap > 0
    i_s, i_t = render_drr(f0.volume)[0], render_drr(f50.volume)[0]
    u2d, rep = register_2d(i_s, i_t, LossWeights(0.05), TwoDOptions(steps=300))
    drr_before = rep.history[0]["L_MSE"]
    drr_after = rep.best["L_MSE"]
    v2 = apply_2ddf_to_volume(f0.volume, u2d)
    gain_2d = initial.mae_hu - mae(f50.volume, v2)
    gain_direct = initial.mae_hu - direct32[3].mae_hu

    _, _, cases, _ = unet16
    gains = []
    for c in cases:
        u, r = register_2d(c["inst"].i_s, c["inst"].i_t, LossWeights(0.05), TwoDOptions(steps=300))
        m2 = mae(c["ft"].volume, apply_2ddf_to_volume(c["f0"].volume, u))
        gains.append((c["initial"].mae_hu - m2, c["initial"].mae_hu - c["unet"].mae_hu))
    mean_2d = float(np.mean([g[0] for g in gains]))
    mean_unet = float(np.mean([g[1] for g in gains]))
    ok = drr_after < drr_before and gain_2d <= gain_direct and mean_2d <= mean_unet
    check(9, ok, f"DRR MSE {drr_before:.2e} -> {drr_after:.2e}; MAE gain 2D-DF {gain_2d:.1f} <= direct "
                 f"{gain_direct:.1f} HU at 32^3; held-out mean gain 2D-DF {mean_2d:.1f} <= U-Net {mean_unet:.1f} HU")


def test_criterion_10_metric_oracles():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(200):
        a = rng.uniform(-1000, 1000, (4, 4, 4)).astype(np.float32)
        b = rng.uniform(-1000, 1000, (4, 4, 4)).astype(np.float32)
        la = rng.integers(0, 3, (4, 4, 4)).astype(np.uint8)
        lb = rng.integers(0, 3, (4, 4, 4)).astype(np.uint8)
        total = sum(abs(float(a[idx]) - float(b[idx])) for idx in np.ndindex(4, 4, 4))
        worst = max(worst, abs(mae(VolumeGrid(a), VolumeGrid(b)) - total / 64) / max(1.0, total / 64))
        for lab in (LIVER, STOMACH):
            na = sum(1 for idx in np.ndindex(4, 4, 4) if la[idx] == lab)
            nb = sum(1 for idx in np.ndindex(4, 4, 4) if lb[idx] == lab)
            both = sum(1 for idx in np.ndindex(4, 4, 4) if la[idx] == lab and lb[idx] == lab)
            want = 1.0 if na + nb == 0 else 2 * both / (na + nb)
            worst = max(worst, abs(dsc(LabelVolume(la), LabelVolume(lb), lab) - want))
    c1 = np.zeros((8, 8, 8), np.uint8)
    c2 = np.zeros((8, 8, 8), np.uint8)
    c1[0:4, 0:4, 0:4] = LIVER
    c2[0:4, 0:4, 2:6] = LIVER
    half = dsc(LabelVolume(c1), LabelVolume(c2), LIVER)
    check(10, worst <= 1e-6 and half == 0.5, f"max deviation from brute force {worst:.1e} (<=1e-6); "
                                             f"half-overlap DSC {half!r}")


def test_criterion_11_determinism_across_threads(tmp_path):
    def manifest(d):
        return json.loads((d / "manifest.json").read_text())["files"]

    ph = tmp_path / "ph"
    assert run(["phantom", "--size", "16", "--out", str(ph)]) == 0
    src = ["--source", str(ph / "frame_t00.mhd"), "--source-labels", str(ph / "frame_t00_labels.mhd"),
           "--target-volume", str(ph / "frame_t50.mhd")]
    commands = {
        "phantom": ["phantom", "--size", "16", "--seed", "3", "--random-amplitudes"],
        "drr": ["drr", str(ph / "frame_t50.mhd")],
        "direct": ["register", "direct", *src, "--steps", "40"],
        "projection": ["register", "direct", *src, "--steps", "40", "--projection-only"],
        "rigid": ["register", "rigid", *src, "--max-iter", "80", "--restarts", "2"],
        "2ddf": ["register", "2ddf", *src, "--steps", "40"],
        "train": ["train", "--size", "16", "--pairs", "4", "--epochs", "2", "--batch", "2",
                  "--checkpoint-every", "1"],
        "gradcheck": ["gradcheck", "--instances", "3"],
    }
    mismatched = []
    for name, cmd in commands.items():
        outs = []
        for threads in ("1", "2", "4"):
            out = tmp_path / f"{name}_{threads}"
            assert run(cmd + ["--out", str(out), "--threads", threads]) == 0, name
            outs.append(manifest(out))
        if not (outs[0] == outs[1] == outs[2]):
            mismatched.append(name)
    ev = []
    for threads in ("1", "3"):
        out = tmp_path / f"eval_{threads}"
        assert run(["evaluate", "--gt", str(ph / "frame_t50.mhd"), "--initial", str(ph / "frame_t00.mhd"),
                    "--result", f"Proposed={tmp_path / 'direct_1'}", "--out", str(out),
                    "--threads", threads]) == 0
        ev.append(manifest(out))
    if ev[0] != ev[1]:
        mismatched.append("evaluate")
    check(11, not mismatched, f"{len(commands) + 1} commands x thread counts {{1,2,4}}: "
                              f"identical manifests except {mismatched or 'none'}")
