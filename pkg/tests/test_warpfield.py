import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deformreg.errors import DimensionMismatchError, ValidationError
from deformreg.volgrid import LabelVolume, VolumeGrid
from deformreg.warpfield import (DisplacementField, linear_warp, linear_warp_backward, load_field, nearest_warp,
                                 save_field, trilinear_weights, warp_labels, warp_volume, warp_volume_backward)

from conftest import random_volume


def _const_field(dims, vec):
    comp = np.zeros((3, *dims), np.float32)
    for c in range(3):
        comp[c] = vec[c]
    return DisplacementField(comp)


def test_zero_field_is_bitwise_identity(rng):
    v = random_volume(rng, (5, 4, 6))
    assert warp_volume(v, DisplacementField.zeros(v.dims)).equals(v)


def test_unit_shift_matches_index_shift(rng):
    v = random_volume(rng, (5, 4, 3))
    out = warp_volume(v, _const_field(v.dims, (1, 0, 0))).values
    assert np.array_equal(out[:-1], v.values[1:])
    assert np.array_equal(out[-1], v.values[-1])


@pytest.mark.parametrize("shift", [(2, 0, 0), (0, -1, 0), (0, 0, 3), (1, -2, 1)])
def test_integer_shifts(rng, shift):
    v = random_volume(rng, (6, 5, 7))
    out = warp_volume(v, _const_field(v.dims, shift)).values
    idx = np.meshgrid(*[np.clip(np.arange(n) + s, 0, n - 1) for n, s in zip(v.dims, shift)], indexing="ij")
    assert np.array_equal(out, v.values[tuple(idx)])


def test_half_shift_on_ramp():
    ramp = np.broadcast_to(np.arange(6, dtype=np.float32)[:, None, None], (6, 2, 2)).copy()
    out = warp_volume(VolumeGrid(ramp), _const_field((6, 2, 2), (0.5, 0, 0))).values[:, 0, 0]
    assert np.allclose(out, np.minimum(np.arange(6) + 0.5, 5.0), atol=1e-6)


@given(st.tuples(*[st.floats(-2, 2)] * 4), st.integers(0, 2**31))
def test_exact_on_affine_volumes(coef, seed):
    rng = np.random.default_rng(seed)
    dims = (6, 5, 7)
    g = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    a, b, c, d = coef
    vals = a * g[0] + b * g[1] + c * g[2] + d
    # keep p + u(p) inside the grid
    u = np.stack([rng.uniform(-gi, (n - 1) - gi) for gi, n in zip(g, dims)]) * 0.999
    out = linear_warp(vals, u)
    want = a * (g[0] + u[0]) + b * (g[1] + u[1]) + c * (g[2] + u[2]) + d
    assert np.abs(out - want).max() <= 1e-5 * max(1.0, np.abs(want).max())


@given(st.tuples(*[st.floats(0, 10, allow_nan=False)] * 3))
def test_trilinear_weights_partition_unity(point):
    w = trilinear_weights(point)
    assert w.shape == (8,)
    assert abs(w.sum() - 1.0) <= 1e-6
    assert (w >= 0).all()


@given(st.integers(0, 2**31))
def test_output_within_source_range(seed):
    rng = np.random.default_rng(seed)
    v = random_volume(rng, (4, 5, 3))
    u = DisplacementField(rng.uniform(-3, 3, (3, 4, 5, 3)).astype(np.float32))
    out = warp_volume(v, u).values
    assert out.min() >= v.values.min() - 1e-3 and out.max() <= v.values.max() + 1e-3


def test_backward_zero_grad(rng):
    v = random_volume(rng, (4, 4, 4))
    u = DisplacementField(rng.uniform(-1, 1, (3, 4, 4, 4)).astype(np.float32))
    gv, gu = warp_volume_backward(v, u, np.zeros(v.dims))
    assert not gv.any() and not gu.any()


def _fd_check(src, disp, g, h=1e-6):
    gs, gd = linear_warp_backward(src, disp, g)
    f = lambda s, d: float(np.sum(g * linear_warp(s, d)))
    errs = []
    for c in range(3):
        for _ in range(3):
            idx = (c,) + tuple(np.random.default_rng(c).integers(0, n) for n in src.shape)
            dp, dm = disp.copy(), disp.copy()
            dp[idx] += h
            dm[idx] -= h
            num = (f(src, dp) - f(src, dm)) / (2 * h)
            errs.append(abs(num - gd[idx]) / max(abs(num), abs(gd[idx]), 1e-8))
    # grad_src is exact for a linear map: compare against the directional derivative
    r = np.random.default_rng(0).standard_normal(src.shape)
    num = (f(src + h * r, disp) - f(src - h * r, disp)) / (2 * h)
    ana = float(np.sum(gs * r))
    errs.append(abs(num - ana) / max(abs(num), 1e-8))
    return max(errs)


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((4, 4, 4))
    disp = rng.uniform(-1.5, 1.5, (3, 4, 4, 4))
    # stay away from integer coordinates, where the derivative jumps
    frac = disp - np.round(disp)
    disp[np.abs(frac) < 1e-3] += 0.01
    g = rng.standard_normal((4, 4, 4))
    assert _fd_check(src, disp, g) < 1e-4


def test_grad_src_sums_to_grad_out_without_clamping(rng):
    src = rng.standard_normal((6, 6, 6))
    disp = rng.uniform(-0.9, 0.9, (3, 6, 6, 6))
    disp[:, 0] = np.abs(disp[:, 0])
    disp[:, -1] = -np.abs(disp[:, -1])
    disp[:, :, 0] = np.abs(disp[:, :, 0])
    disp[:, :, -1] = -np.abs(disp[:, :, -1])
    disp[:, :, :, 0] = np.abs(disp[:, :, :, 0])
    disp[:, :, :, -1] = -np.abs(disp[:, :, :, -1])
    g = rng.standard_normal((6, 6, 6))
    gs, _ = linear_warp_backward(src, disp, g)
    assert abs(gs.sum() - g.sum()) < 1e-9


def test_lower_cell_subgradient_at_integers():
    src = np.array([0.0, 1.0, 5.0])
    disp = np.zeros((1, 3))
    _, gd = linear_warp_backward(src, disp, np.ones(3))
    # cells [0,1], [1,2], and the last point clamps into [1,2]
    assert np.allclose(gd[0], [1.0, 4.0, 4.0])


def test_clamped_positions_have_zero_positional_gradient():
    src = np.arange(4.0)
    disp = np.array([[-2.0, 0.3, 0.2, 1.5]])
    _, gd = linear_warp_backward(src, disp, np.ones(4))
    assert gd[0, 0] == 0.0 and gd[0, 3] == 0.0
    assert gd[0, 1] == 1.0


def test_dims_mismatch(rng):
    v = random_volume(rng, (4, 4, 4))
    with pytest.raises(DimensionMismatchError):
        warp_volume(v, DisplacementField.zeros((4, 4, 5)))
    with pytest.raises(ValidationError):
        DisplacementField(np.full((3, 2, 2, 2), np.inf))


def test_warp_labels_conventions(rng):
    lab = LabelVolume(rng.integers(0, 3, (5, 4, 3)).astype(np.uint8))
    assert np.array_equal(warp_labels(lab, DisplacementField.zeros(lab.dims)).labels, lab.labels)
    shifted = warp_labels(lab, _const_field(lab.dims, (0, 1, 0))).labels
    assert np.array_equal(shifted[:, :-1], lab.labels[:, 1:])
    half = warp_labels(lab, _const_field(lab.dims, (0.5, 0, 0))).labels
    assert np.array_equal(half[:-1], lab.labels[1:])  # 0.5 rounds up
    vals = set(np.unique(warp_labels(lab, DisplacementField(rng.uniform(-2, 2, (3, 5, 4, 3)))).labels).tolist())
    assert vals <= {0, 1, 2}


def test_nearest_warp_2d():
    src = np.arange(6).reshape(2, 3)
    disp = np.zeros((2, 2, 3))
    disp[1] = 0.49
    assert np.array_equal(nearest_warp(src, disp), src)


def test_field_round_trip(tmp_path, rng):
    u = DisplacementField(rng.standard_normal((3, 3, 4, 5)).astype(np.float32))
    header = save_field(u, tmp_path / "frame_t50")
    assert header.name == "frame_t50_u.mhd"
    for c in "xyz":
        assert (tmp_path / f"frame_t50_u{c}.raw").is_file()
    back = load_field(tmp_path / "frame_t50")
    assert back.components.tobytes() == u.components.tobytes()
    assert load_field(header).components.tobytes() == u.components.tobytes()
