import math

import numpy as np
import pytest

from rectiplane.autodiff import Tape, Tensor, l2_loss
from rectiplane.errors import DegenerateProjection, ShapeMismatch
from rectiplane.geometry import (
    PerspectiveEncoding,
    apply_many,
    centered_grid,
    compose,
    invert,
    perspective,
    rescale,
    similarity,
)
from rectiplane.imaging import ParamRanges, SceneSpec, distort, psnr, render_scene, sample_params, warp
from rectiplane.stn import (
    StnBlock,
    bilinear_sample,
    border_fill,
    grid_from_perspective,
    grid_from_rotation,
    identity_grid,
    supervised_stn_forward,
)

ENC = PerspectiveEncoding()
TOL = 1e-4
rng = np.random.default_rng(77)


def smooth_scene(size, seed):
    spec = SceneSpec(line_count=4, line_thickness=size / 12, line_spacing=size / 10, blur_sigma=size / 40)
    return render_scene(spec, size, seed)


# ---------------------------------------------------------------- grids


def test_zero_perspective_gives_identity_grid():
    g = grid_from_perspective(Tensor(np.array([[10.0, 10.0]])), (5, 7)).data
    gx, gy = centered_grid(5, 7)
    np.testing.assert_allclose(g[0, ..., 0], gx, atol=1e-12)
    np.testing.assert_allclose(g[0, ..., 1], gy, atol=1e-12)
    assert g[0, 0, 0].tolist() == pytest.approx([-3.0, -2.0])


def test_perspective_grid_composed_with_inverse_is_identity():
    for _ in range(20):
        px, py = rng.uniform(-9e-4, 9e-4, 2)
        scale = 256 / 32
        g = grid_from_perspective(Tensor(ENC.encode(np.array([[px, py]]))), (32, 32), ENC, scale).data[0]
        x, y = apply_many(rescale(perspective(-px, -py), scale), g[..., 0], g[..., 1])
        gx, gy = centered_grid(32, 32)
        np.testing.assert_allclose(x, gx, atol=1e-9)
        np.testing.assert_allclose(y, gy, atol=1e-9)


def test_perspective_grid_degenerate():
    with pytest.raises(DegenerateProjection):
        # z = 1 + px * x vanishes at x = -3 for px = 1/3
        grid_from_perspective(Tensor(np.array([[1e4 * (1 / 3 + 1e-3), 10.0]])), (1, 7))


def test_perspective_grid_shape_check():
    with pytest.raises(ShapeMismatch):
        grid_from_perspective(Tensor(np.ones((2, 3))), (4, 4))


def test_rotation_grid_examples():
    gx, gy = centered_grid(5, 5)
    g0 = grid_from_rotation(np.array([0.0]), (5, 5)).data[0]
    np.testing.assert_array_equal(g0[..., 0], gx)
    g90 = grid_from_rotation(np.array([math.pi / 2]), (5, 5)).data[0]
    np.testing.assert_allclose(g90[..., 0], gy, atol=1e-15)
    np.testing.assert_allclose(g90[..., 1], -gx, atol=1e-15)


def test_rotation_round_trip():
    t = 0.37
    g = grid_from_rotation(np.array([t]), (9, 9)).data[0]
    x, y = apply_many(similarity(-t), g[..., 0], g[..., 1])
    gx, gy = centered_grid(9, 9)
    np.testing.assert_allclose(x, gx, atol=1e-12)
    np.testing.assert_allclose(y, gy, atol=1e-12)


def test_grad_perspective_grid(gradcheck):
    enc = rng.uniform(2.0, 18.0, size=(2, 2))
    errs = gradcheck(lambda e: grid_from_perspective(e, (6, 5), ENC, 256 / 6), [enc])
    assert max(errs) < TOL


def test_grad_rotation_grid(gradcheck):
    assert max(gradcheck(lambda t: grid_from_rotation(t, (5, 6)), [rng.uniform(-1, 1, 3)])) < TOL


# ---------------------------------------------------------------- sampling


def test_identity_grid_copies_input():
    f = rng.normal(size=(2, 6, 5, 3))
    out = bilinear_sample(Tensor(f), identity_grid(2, (6, 5)), fill=0.0).data
    np.testing.assert_array_equal(out, f)


def test_half_pixel_grid_on_ramp_is_exact():
    h, w = 6, 8
    gx, gy = centered_grid(h, w)
    ramp = (2.0 * gx - 0.5 * gy + 1.0)[None, :, :, None]
    grid = np.stack([gx[1:-1, 1:-1] + 0.5, gy[1:-1, 1:-1] - 0.5], axis=-1)[None]
    out = bilinear_sample(Tensor(ramp), grid).data[0, :, :, 0]
    expect = 2.0 * grid[0, ..., 0] - 0.5 * grid[0, ..., 1] + 1.0
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_outside_samples_take_the_fill():
    f = np.ones((1, 4, 4, 2))
    grid = np.full((1, 1, 1, 2), 50.0)
    out = bilinear_sample(Tensor(f), grid, fill=np.array([[0.25, 0.75]])).data
    np.testing.assert_array_equal(out[0, 0, 0], [0.25, 0.75])


def test_border_fill_is_border_median():
    f = np.zeros((1, 4, 4, 1))
    f[0, 1:3, 1:3] = 5.0
    f[0, 0, :2] = 1.0
    assert border_fill(f)[0, 0] == 0.0


def test_grad_bilinear(gradcheck):
    f = rng.normal(size=(2, 5, 6, 2))
    # keep samples away from integer coordinates
    grid = rng.uniform(-3.5, 3.5, size=(2, 4, 3, 2))
    grid = np.where(np.abs(grid - np.round(grid)) < 0.05, grid + 0.1, grid)
    errs = gradcheck(lambda f, g: bilinear_sample(f, g, fill=0.3), [f, grid])
    assert max(errs) < TOL


def test_grad_through_perspective_warp(gradcheck):
    f = rng.normal(size=(1, 7, 7, 1))
    enc = np.array([[13.3, 6.1]])
    errs = gradcheck(lambda f, e: bilinear_sample(f, grid_from_perspective(e, (7, 7), ENC, 30.0), fill=0.1), [f, enc])
    assert max(errs) < TOL


def test_integer_translation_equivariance():
    # samples span input indices 2.5..8.5, all still present after the shift
    f = rng.normal(size=(1, 12, 12, 2))
    grid = rng.uniform(-3, 3, size=(1, 4, 4, 2))
    shifted = np.zeros_like(f)
    shifted[:, 2:, 1:] = f[:, :-2, :-1]  # content moves by (+1, +2)
    a = bilinear_sample(Tensor(f), grid, fill=0.0).data
    b = bilinear_sample(Tensor(shifted), grid + np.array([1.0, 2.0]), fill=0.0).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- supervised block


def test_block_matches_non_differentiable_warper():
    size = 64
    block = StnBlock("perspective", ENC, 256)
    for i in range(10):
        img = smooth_scene(size, i)
        p = sample_params(ParamRanges(), seed=i)
        dist = distort(img, p)
        enc = np.array([[ENC.encode(p.px), ENC.encode(p.py)]])
        feats = Tensor(dist[None, :, :, None])
        out = supervised_stn_forward(block, Tensor(enc), feats).data[0, :, :, 0]
        fill = float(border_fill(feats.data)[0, 0])
        ref = warp(dist, invert(rescale(perspective(p.px, p.py), 256 / size)), fill=fill)
        assert np.mean(np.abs(out - ref)) <= 2 / 255


def test_block_identity_params():
    f = rng.normal(size=(2, 8, 8, 3))
    out = supervised_stn_forward(StnBlock(), Tensor(np.full((2, 2), 10.0)), Tensor(f)).data
    np.testing.assert_allclose(out, f, atol=1e-12)


def test_gradient_reaches_head_and_features():
    f = Tensor(rng.normal(size=(2, 8, 8, 2)), requires_grad=True)
    enc = Tensor(np.array([[12.0, 7.5], [4.0, 15.0]]), requires_grad=True)
    with Tape() as tape:
        out = supervised_stn_forward(StnBlock(), enc, f)
        tape.backward(l2_loss(out.reshape(2, -1), np.zeros((2, 128))))
    assert np.any(f.grad != 0) and np.all(np.abs(enc.grad).sum(axis=1) > 0)


def test_unknown_block_kind():
    with pytest.raises(ValueError):
        StnBlock("affine").grid(np.zeros((1, 2)), (4, 4))


def test_perfect_supervision_restores_scene():
    size = 96
    scale = 256 / size
    persp_block = StnBlock("perspective", ENC, 256)
    rot_block = StnBlock("rotation")
    worst = np.inf
    for i in range(100):
        scene = smooth_scene(size, i)
        p = sample_params(ParamRanges(), seed=1000 + i)
        dist = distort(scene, p, fill=float(np.median(scene)))
        enc = Tensor(np.array([[ENC.encode(p.px), ENC.encode(p.py)]]))
        stage1 = supervised_stn_forward(persp_block, enc, Tensor(dist[None, :, :, None]))
        out = supervised_stn_forward(rot_block, Tensor(np.array([p.theta])), stage1).data[0, :, :, 0]
        # what remains after removing perspective and rotation is scale plus a shift
        rest = compose(invert(similarity(p.theta)), similarity(p.theta, p.alpha, p.tx, p.ty))
        rest = rescale(rest, scale)
        expect = warp(scene, rest)
        # interior: pixels whose full chain of samples stayed inside the image
        gx, gy = centered_grid(size, size)
        lim = (size - 1) / 2 - 1
        sx, sy = apply_many(invert(rest), gx, gy)
        ok = (np.abs(sx) <= lim) & (np.abs(sy) <= lim)
        mx, my = apply_many(similarity(p.theta), gx, gy)
        ok &= (np.abs(mx) <= lim) & (np.abs(my) <= lim)
        worst = min(worst, psnr(out[ok], expect[ok]))
    assert worst >= 28.0
