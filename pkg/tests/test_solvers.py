import numpy as np
import pytest

from deformreg.errors import DimensionMismatchError, NumericalError, ValidationError
from deformreg.diffnet import UNetConfig, init_params, load_checkpoint, save_checkpoint
from deformreg.losses import LossWeights
from deformreg.metrics import mean_endpoint_error
from deformreg.phantom import PhantomSpec, RespiratoryModel, default_amplitudes, generate_4dct, random_model
from deformreg.projector import render_drr
from deformreg.solvers import (DirectOptions, Dvf2D, RigidOptions, RigidParams, SolveReport, TrainingInstance,
                               TrainOptions, TwoDOptions, apply_2ddf_to_volume, apply_rigid, checkpoint_extra,
                               epoch_order, infer_unet, lift_2ddf, register_2d, register_direct, register_rigid,
                               train_unet, wrap_angle)
from deformreg.volgrid import Image2D, VolumeGrid


def _pair(n, t=50, scale=1.0):
    spec = PhantomSpec(n=n)
    a, b = default_amplitudes(n)
    model = RespiratoryModel.for_spec(spec, amp_si=a * scale, amp_ap=b * scale)
    return generate_4dct(spec, model, phases=(0, t))


@pytest.fixture(scope="module")
def pair16():
    return _pair(16)


@pytest.fixture(scope="module")
def pair32():
    return _pair(32)


def _instance(f0, ft):
    return TrainingInstance(f0.volume, render_drr(f0.volume)[0], render_drr(ft.volume)[0], ft.volume, ft.u_gt)


# --- reports ------------------------------------------------------------------


def test_report_contracts(tmp_path):
    r = SolveReport("x", 3)
    r.record(0, 2.0, 2.0)
    r.record(1, 1.0, 0.5, 5.0, 0.0)
    with pytest.raises(ValidationError):
        r.record(1, 1.0, 1.0)
    with pytest.raises(NumericalError):
        r.record(2, float("nan"), 0.0)
    assert r.initial_loss == 2.0 and r.best["step"] == 1
    paths = r.write(tmp_path, "s")
    lines = (tmp_path / "s_loss.csv").read_text().splitlines()
    assert lines[0] == "step,L_total,L_MSE,L_smooth,L_DVF"
    assert len(lines) == 3 and len(paths) == 2
    assert (tmp_path / "s_timing.txt").is_file()


# --- direct -------------------------------------------------------------------


def test_direct_self_registration(pair16):
    f0, _ = pair16
    img = render_drr(f0.volume)[0]
    u, v_def, rep = register_direct(f0.volume, img, img, f0.volume, opts=DirectOptions(steps=20))
    assert rep.best["L_total"] <= rep.initial_loss
    assert np.abs(u.components).max() < 1e-6
    assert v_def.equals(f0.volume)


def test_direct_supervised_endpoint_error_decreases(pair32):
    f0, f50 = pair32
    errs = []
    register_direct(f0.volume, None, None, f50.volume, f50.u_gt, LossWeights(0.05, 1.0),
                    DirectOptions(steps=50), callback=lambda s, u: errs.append(mean_endpoint_error(u, f50.u_gt)))
    assert len(errs) == 51
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_direct_projection_mode_reduces_drr_loss(pair16):
    f0, f50 = pair16
    i_s, i_t = render_drr(f0.volume)[0], render_drr(f50.volume)[0]
    _, _, rep = register_direct(f0.volume, i_s, i_t, opts=DirectOptions(steps=40))
    assert rep.config["mode"] == "projection"
    assert rep.best["L_total"] < rep.initial_loss


def test_direct_argument_errors(pair16):
    f0, f50 = pair16
    with pytest.raises(ValidationError):
        register_direct(f0.volume, None, None, f50.volume, None, LossWeights(0.05, 1.0))
    with pytest.raises(ValidationError):
        register_direct(f0.volume, None, None)
    with pytest.raises(DimensionMismatchError):
        register_direct(f0.volume, None, Image2D(np.zeros((16, 8), np.float32)))


# --- U-Net --------------------------------------------------------------------


def test_infer_untrained_is_identity(pair16):
    f0, f50 = pair16
    inst = _instance(f0, f50)
    u, v_def = infer_unet(init_params(UNetConfig()), inst.v_s, inst.i_s, inst.i_t)
    assert u.dims == f0.volume.dims and u.components.shape[0] == 3
    assert v_def.equals(f0.volume)


def test_training_errors(pair16):
    with pytest.raises(ValidationError):
        train_unet([], UNetConfig())
    f0, f50 = pair16
    other = _pair(8)
    with pytest.raises(DimensionMismatchError):
        train_unet([_instance(f0, f50), _instance(*other)], UNetConfig(), epochs=1)
    with pytest.raises(ValidationError):
        train_unet([_instance(*_pair(20))], UNetConfig(), epochs=1)


def test_epoch_order_seeded():
    assert np.array_equal(epoch_order(1, 3, 20), epoch_order(1, 3, 20))
    assert sorted(epoch_order(1, 3, 20)) == list(range(20))
    assert not np.array_equal(epoch_order(1, 3, 20), epoch_order(1, 4, 20))


def test_training_deterministic_and_resumable(tmp_path, pair16):
    f0, f50 = pair16
    data = [_instance(f0, f50)] * 3
    cfg = UNetConfig(enc_widths=(4, 4, 4))
    w = LossWeights(0.05, 1.0)
    blobs = []
    for run in range(2):
        d = tmp_path / f"run{run}"
        d.mkdir()
        params, rep = train_unet(data, cfg, w, epochs=4, batch=2,
                                 opts=TrainOptions(lr=1e-3, seed=7, checkpoint_every=2, checkpoint_dir=str(d)))
        blobs.append(save_checkpoint(d / "final.bin", params, rep.artifacts["adam"], checkpoint_extra(rep)).read_bytes())
    assert blobs[0] == blobs[1]
    assert (tmp_path / "run0" / "ckpt_epoch0002.bin").read_bytes() == (tmp_path / "run1" / "ckpt_epoch0002.bin").read_bytes()
    resumed, rep2 = train_unet(data, cfg, w, epochs=4, batch=2, opts=TrainOptions(lr=1e-3, seed=7),
                               resume=tmp_path / "run0" / "ckpt_epoch0002.bin")
    out = save_checkpoint(tmp_path / "resumed.bin", resumed, rep2.artifacts["adam"], checkpoint_extra(rep2))
    assert out.read_bytes() == blobs[0]
    with pytest.raises(ValidationError):
        train_unet(data, UNetConfig(), w, epochs=4, resume=tmp_path / "run0" / "ckpt_epoch0002.bin")


def test_worker_count_does_not_change_training(tmp_path, pair16):
    f0, f50 = pair16
    data = [_instance(f0, f50)] * 4
    cfg = UNetConfig(enc_widths=(4, 4, 4))
    blobs = []
    for workers in (1, 3):
        params, rep = train_unet(data, cfg, LossWeights(0.05, 1.0), epochs=2, batch=4,
                                 opts=TrainOptions(lr=1e-3), workers=workers)
        blobs.append(save_checkpoint(tmp_path / f"w{workers}.bin", params, rep.artifacts["adam"],
                                     checkpoint_extra(rep)).read_bytes())
    assert blobs[0] == blobs[1]
    with pytest.raises(ValidationError):
        train_unet(data, cfg, epochs=1, workers=0)


def test_epoch_mean_loss_decreases_on_twenty_pairs():
    spec = PhantomSpec(n=16)
    a, b = default_amplitudes(16)
    base = RespiratoryModel.for_spec(spec, amp_si=a, amp_ap=b)
    rng = np.random.default_rng(0)
    data = []
    for _ in range(20):
        f0, ft = generate_4dct(spec, random_model(spec, rng, (0.6, 1.4), (0.6, 1.4), base),
                               phases=(0, int(rng.choice([10, 30, 50, 70, 90]))))
        data.append(_instance(f0, ft))
    _, rep = train_unet(data, UNetConfig(), LossWeights(0.05, 1.0), epochs=20, batch=4)
    means = rep.final["epoch_mean_loss"]
    assert len(means) == 20 and means[19] < means[0]


# --- rigid --------------------------------------------------------------------


def test_rigid_params_wrap():
    assert RigidParams(rx=190.0).rx == -170.0
    assert RigidParams(rz=-180.0).rz == 180.0
    assert wrap_angle(540.0) == 180.0


def test_apply_rigid_identities(pair16):
    v = pair16[0].volume
    assert np.array_equal(apply_rigid(v, RigidParams()).values, v.values)
    shifted = apply_rigid(v, RigidParams(tx=2.0, tz=-1.0)).values
    # content moves by +t: out(p) = v(p - t)
    assert np.array_equal(shifted[2:, :, :-1], v.values[:-2, :, 1:])
    full_turn = apply_rigid(v, RigidParams(rx=360.0, ry=360.0, rz=360.0)).values
    assert np.abs(full_turn - v.values).max() < 1e-3


def test_rigid_self_registration(pair16):
    v = pair16[0].volume
    theta, _, rep = register_rigid(v, render_drr(v)[0], RigidOptions(restarts=1))
    assert np.all(np.abs(theta.vector()[:3]) <= 0.5) and np.all(np.abs(theta.vector()[3:]) <= 0.5)
    assert rep.best["L_total"] <= rep.initial_loss


def test_rigid_recovers_shift_and_leaves_ty(pair32):
    v = pair32[0].volume
    moved = apply_rigid(v, RigidParams(tx=3.0, ty=0.0, tz=2.0))
    theta, _, _ = register_rigid(v, render_drr(moved)[0], RigidOptions(restarts=2, seed=1))
    assert abs(theta.tx - 3.0) <= 1.0 and abs(theta.tz - 2.0) <= 1.0
    assert theta.ty == 0.0
    # an out-of-plane shift is invisible in a parallel-beam DRR
    moved_ap = apply_rigid(v, RigidParams(ty=2.0))
    assert np.abs(render_drr(moved_ap)[0].values - render_drr(v)[0].values).max() < 1e-5


# --- 2D-DF --------------------------------------------------------------------


def test_2d_self_registration(pair16):
    img = render_drr(pair16[0].volume)[0]
    u2d, rep = register_2d(img, img, opts=TwoDOptions(steps=20))
    assert np.abs(u2d.components).max() < 1e-6
    assert rep.best["L_total"] <= rep.initial_loss


def test_2d_recovers_integer_shift(pair32):
    img = render_drr(pair32[0].volume)[0].values
    shifted = np.empty_like(img)
    shifted[:, :-2] = img[:, 2:]
    shifted[:, -2:] = img[:, -1:]
    u2d, _ = register_2d(Image2D(img), Image2D(shifted), LossWeights(0.05), TwoDOptions(steps=300))
    # pull-back: target(x, z) = source(x, z + 2)
    informative = np.abs(np.gradient(img, axis=1)) > 0.02
    assert abs(u2d.components[1][informative].mean() - 2.0) < 0.5
    assert abs(u2d.components[0][informative].mean()) < 0.5


def test_2d_improves_phantom_drr(pair16):
    f0, f50 = pair16
    i_s, i_t = render_drr(f0.volume)[0], render_drr(f50.volume)[0]
    _, rep = register_2d(i_s, i_t, opts=TwoDOptions(steps=100))
    assert rep.best["L_MSE"] < rep.history[0]["L_MSE"]


def test_apply_2ddf(pair16, rng):
    v = pair16[0].volume
    zero = Dvf2D(np.zeros((2, 16, 16), np.float32))
    assert apply_2ddf_to_volume(v, zero).equals(v)
    u2d = Dvf2D(rng.uniform(-1, 1, (2, 16, 16)).astype(np.float32))
    lifted = lift_2ddf(u2d, 16)
    assert not lifted[1].any()
    assert all(np.array_equal(lifted[:, :, y], lifted[:, :, 0]) for y in range(16))
    with pytest.raises(DimensionMismatchError):
        apply_2ddf_to_volume(v, Dvf2D(np.zeros((2, 16, 8), np.float32)))
