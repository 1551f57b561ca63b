import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from dynsurf.diffmath import Var, finite_diff_entries, gradients, rel_error, tape
from dynsurf.render import (Camera, RenderConfig, alpha_from_sdf, composite, gen_ray, importance_sample, make_rays,
                            ray_box, render_image, render_rays, sample_pdf, stratified_sample, weights_from_alpha)
from dynsurf.scene import default_camera

from conftest import small_model

sdf_rows = arrays(np.float64, st.integers(2, 40), elements=st.floats(-2, 2))


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


# --- cameras and rays -------------------------------------------------------------

def test_principal_ray_forward():
    cam = Camera(50, 50, 16, 12, 32, 24)
    assert np.allclose(gen_ray(cam, 16, 12).dir, [0, 0, 1], atol=1e-15)


def test_offset_ray_diagonal():
    cam = Camera(10, 10, 15.5, 15.5, 32, 32)
    assert np.allclose(gen_ray(cam, 25.5, 15.5).dir, np.array([1, 0, 1]) / np.sqrt(2), atol=1e-15)


def test_ray_projection_round_trip(rng):
    q = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    pose = np.eye(4)
    pose[:3, :3] = q * np.sign(np.linalg.det(q))
    pose[:3, 3] = rng.normal(size=3)
    cam = Camera(60, 55, 23.5, 20.0, 48, 48, pose)
    for _ in range(50):
        u, v = rng.uniform(0, 48, 2)
        ray = gen_ray(cam, u, v)
        assert abs(np.linalg.norm(ray.dir) - 1) < 1e-9
        assert np.abs(cam.project(ray.point_at(rng.uniform(0.1, 10))) - [u, v]).max() < 1e-6


def test_out_of_image_pixel():
    cam = default_camera(16)
    with pytest.raises(ValueError):
        gen_ray(cam, 16, 0)
    with pytest.raises(ValueError):
        gen_ray(cam, 0, -1)
    with pytest.raises(ValueError):
        make_rays(cam, [[3, 16]], 0, -np.ones(3), np.ones(3))


def test_non_orthonormal_pose_rejected():
    pose = np.eye(4)
    pose[0, 0] = 1.1
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 2, 2, pose)


def test_ray_box_padding():
    near, far, hit = ray_box(np.array([[0, 0, -2.0]]), np.array([[0, 0, 1.0]]), -0.5 * np.ones(3), 0.5 * np.ones(3))
    assert hit[0] and near[0] == pytest.approx(1.475) and far[0] == pytest.approx(2.525)
    _, _, hit = ray_box(np.array([[0, 2.0, -2.0]]), np.array([[0, 0, 1.0]]), -0.5 * np.ones(3), 0.5 * np.ones(3))
    assert not hit[0]


def test_missing_rays_dropped():
    cam = Camera(10, 10, 0, 0, 64, 64, np.eye(4))
    cam.pose[2, 3] = -3
    rays = make_rays(cam, [[0, 0], [63, 63]], 0, -0.5 * np.ones(3), 0.5 * np.ones(3))
    assert rays.pixels.tolist() == [[0, 0]]
    assert np.all(rays.near < rays.far)


# --- sampling -------------------------------------------------------------------

def test_stratified_strata(rng):
    d = stratified_sample([1.0, 0.0], [3.0, 64.0], 64, rng)
    assert d.shape == (2, 64)
    edges = np.linspace(1, 3, 65)
    assert np.all((d[0] >= edges[:-1]) & (d[0] < edges[1:]))
    assert np.all((d[1] >= np.arange(64)) & (d[1] < np.arange(1, 65)))
    assert np.all(np.diff(d, axis=1) > 0)


def test_stratified_midpoints():
    d = stratified_sample([0.0], [1.0], 4, u=0.5)
    assert np.array_equal(d[0], [0.125, 0.375, 0.625, 0.875])


def test_stratified_deterministic():
    a = stratified_sample([0.0], [1.0], 64, np.random.default_rng(5))
    b = stratified_sample([0.0], [1.0], 64, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_stratified_needs_two():
    with pytest.raises(ValueError):
        stratified_sample([0.0], [1.0], 1)


def test_importance_count(rng):
    d0 = stratified_sample(np.zeros(3), np.full(3, 2.0), 64, rng)
    d, phi = importance_sample(d0, lambda d: 0.7 - d, 50.0, rng)
    assert d.shape == (3, 128) and phi.shape == (3, 128)
    assert np.all(np.diff(d, axis=1) >= 0)
    assert np.allclose(phi, 0.7 - d)


def test_importance_concentrated(rng):
    edges = np.linspace(0, 1, 65)[None]
    w = np.zeros((1, 64))
    w[0, 20] = 1.0
    new = sample_pdf(edges, w, rng.random((1, 10000)))
    inside = (new >= edges[0, 20]) & (new <= edges[0, 21])
    assert inside.mean() >= 0.9


def test_importance_uniform_chi_square(rng):
    edges = np.linspace(2.0, 5.0, 17)[None]
    new = sample_pdf(edges, np.ones((1, 16)), rng.random((1, 100000)))
    counts, _ = np.histogram(new, bins=edges[0])
    assert stats.chisquare(counts).pvalue > 0.01


def test_importance_zero_weights_fall_back_to_uniform(rng):
    edges = np.linspace(0.0, 1.0, 9)[None]
    new = sample_pdf(edges, np.zeros((1, 8)), rng.random((1, 100000)))
    counts, _ = np.histogram(new, bins=edges[0])
    assert stats.chisquare(counts).pvalue > 0.01


def test_importance_batched_rows_independent(rng):
    edges = np.stack([np.linspace(0, 1, 5), np.linspace(10, 20, 5)])
    w = np.array([[0, 0, 0, 1.0], [1.0, 0, 0, 0]])
    new = sample_pdf(edges, w, rng.random((2, 1000)), floor=0.0)
    assert np.all((new[0] >= 0.75) & (new[0] <= 1)) and np.all((new[1] >= 10) & (new[1] <= 12.5))


# --- opacity and compositing ---------------------------------------------------------

def test_alpha_examples():
    assert alpha_from_sdf(0.3, 0.3, 10.0) == 0
    assert alpha_from_sdf(0.1, 0.4, 10.0) == 0
    assert alpha_from_sdf(0.1, -0.1, 10.0) == pytest.approx((sigmoid(1) - sigmoid(-1)) / sigmoid(1), abs=1e-12)
    assert alpha_from_sdf(0.1, -0.1, 10.0) == pytest.approx(0.6321205588, abs=1e-9)


def test_alpha_deep_inside_is_finite():
    a = alpha_from_sdf(np.array([-50.0, -1e4]), np.array([-51.0, -1e4 - 1]), 100.0)
    assert np.all(np.isfinite(a)) and np.all((a >= 0) & (a <= 1))


def test_alpha_tape_matches_numpy(rng):
    phi = rng.normal(size=(4, 9))
    nxt = rng.normal(size=(4, 9))
    a = alpha_from_sdf(Var(phi), Var(nxt), Var(np.array(7.0)))
    assert np.allclose(a.data, alpha_from_sdf(phi, nxt, 7.0), atol=1e-15)


def test_alpha_rejects_nonpositive_lambda():
    with pytest.raises(ValueError):
        alpha_from_sdf(0.1, 0.0, 0.0)


@given(st.floats(-1, 0), st.floats(0, 1), st.floats(0.1, 100), st.floats(0.1, 100))
def test_alpha_monotone_in_lambda(phi_next, gap, l1, l2):
    # holds once the interval reaches the inside (phi_next <= 0); two outside
    # samples give alpha -> 0 as lambda grows
    lo, hi = sorted((l1, l2))
    phi = phi_next + gap
    assert alpha_from_sdf(phi, phi_next, lo) <= alpha_from_sdf(phi, phi_next, hi) + 1e-12


def test_alpha_vanishes_outside_for_sharp_lambda():
    assert alpha_from_sdf(1.0, 0.5, 1.0) > alpha_from_sdf(1.0, 0.5, 3.0) > alpha_from_sdf(1.0, 0.5, 100.0)


def test_composite_single_opaque():
    w = weights_from_alpha(np.array([[1.0]]))[1]
    c, d, m = composite(w, np.array([[[0.2, 0.4, 0.6]]]), np.array([[3.0]]))
    assert np.allclose(c, [[0.2, 0.4, 0.6]]) and d[0] == 3.0 and m[0] == 1.0


def test_composite_empty():
    w = weights_from_alpha(np.zeros((1, 5)))[1]
    c, d, m = composite(w, np.ones((1, 5, 3)), np.arange(5.0)[None])
    assert np.all(c == 0) and d[0] == 0 and m[0] == 0


def test_composite_two_samples():
    t, w = weights_from_alpha(np.array([[0.5, 1.0]]))
    assert np.allclose(t, [[1.0, 0.5]]) and np.allclose(w, [[0.5, 0.5]])
    c, d, m = composite(w, np.array([[[1.0, 0, 0], [0, 1.0, 0]]]), np.array([[1.0, 2.0]]))
    assert np.allclose(c, [[0.5, 0.5, 0]]) and d[0] == pytest.approx(1.5) and m[0] == pytest.approx(1.0)


@given(sdf_rows, st.floats(0.01, 1000))
def test_weights_normalised(phi, lam):
    alpha = alpha_from_sdf(phi[None, :-1], phi[None, 1:], lam)
    t, w = weights_from_alpha(alpha)
    assert np.all((alpha >= 0) & (alpha <= 1))
    assert t[0, 0] == 1 and np.all(np.diff(t) <= 0)
    assert np.allclose(w, t * alpha) and w.sum() <= 1 + 1e-6


@given(st.floats(0.5, 1.5), st.floats(0.005, 0.05), st.floats(20, 200))
def test_weight_peak_at_zero_crossing(s0, h, lam_h):
    d = np.arange(0.0, 2.0, h)
    phi = s0 - d
    alpha = alpha_from_sdf(phi[None, :-1], phi[None, 1:], lam_h / h)
    _, w = weights_from_alpha(alpha)
    assert abs(d[np.argmax(w[0])] - s0) <= h * (1 + 1e-9)


def test_weights_tape_matches_numpy(rng):
    a = rng.uniform(0, 1, (3, 7))
    t, w = weights_from_alpha(Var(a))
    t0, w0 = weights_from_alpha(a)
    assert np.allclose(t.data, t0) and np.allclose(w.data, w0)


# --- full ray rendering -------------------------------------------------------

def centre_rays(size=33):
    cam = default_camera(size)
    c = (size - 1) // 2
    return cam, make_rays(cam, [[c, c], [0, 0]], 0, -0.5 * np.ones(3), 0.5 * np.ones(3))


def test_render_sphere_centre_and_miss(sphere_model):
    cam, rays = centre_rays()
    out, samples = render_rays(sphere_model, rays, sphere_model.codes(0), np.random.default_rng(0))
    cell = float(np.max(sphere_model.grid.cell_size))
    assert abs(out.depth.data[0] - 1.2) < 2 * cell
    assert out.mask.data[0] > 0.95
    assert out.mask.data[1] < 0.05
    assert samples.depths.shape == (2, 128)
    assert np.all((out.color.data >= 0) & (out.color.data <= 1))


def test_render_deterministic(sphere_model):
    _, rays = centre_rays()
    a, _ = render_rays(sphere_model, rays, sphere_model.codes(0), np.random.default_rng(7))
    b, _ = render_rays(sphere_model, rays, sphere_model.codes(0), np.random.default_rng(7))
    for x, y in ((a.color, b.color), (a.depth, b.depth), (a.mask, b.mask)):
        assert np.array_equal(x.data, y.data)


def test_render_color_grad_wrt_grid(rng):
    m = small_model()
    m.grid.values.data[...] = rng.normal(0, 0.3, m.grid.values.shape)
    m.sharpness.log_lam.data[...] = np.log(8.0)
    rays = make_rays(default_camera(9), [[4, 4], [3, 5]], 0, -0.5 * np.ones(3), 0.5 * np.ones(3))
    depths = stratified_sample(rays.near, rays.far, 16, rng)
    cfg = RenderConfig(n_uniform=16, rounds=0)
    probe = rng.normal(size=(2, 3))

    def f():
        out, _ = render_rays(m, rays, m.codes(0), cfg=cfg, depths=depths)
        return tape.vsum(out.color * probe)

    (g,) = gradients(f(), [m.grid.values])
    idx = np.argsort(-np.abs(g).ravel())[:12]
    fd = finite_diff_entries(lambda: float(f().data), m.grid.values.data, idx, 1e-6)
    assert rel_error(g.reshape(-1)[idx], fd, 1e-8).max() < 1e-3


def test_render_image_shapes(sphere_model):
    cam = default_camera(12)
    rgb, depth, mask = render_image(sphere_model, cam, 0, np.random.default_rng(0), RenderConfig(32, 8, 1))
    assert rgb.shape == (12, 12, 3) and depth.shape == mask.shape == (12, 12)
    assert mask[6, 6] > 0.9 and mask[0, 0] < 0.05
    assert 1.1 < depth[6, 6] < 1.3


def test_alpha_exiting_interval_no_overflow():
    phi = Var(np.array([[-20.0, 0.5, 0.1]]), requires_grad=True)
    nxt = Var(np.array([[0.5, 0.4, -0.1]]), requires_grad=True)
    with np.errstate(over="raise", invalid="raise"):
        a = alpha_from_sdf(phi, nxt, Var(np.array(100.0)))
        gp, gn = gradients(tape.vsum(a), [phi, nxt])
        assert np.array_equal(alpha_from_sdf(phi.data, nxt.data, 100.0)[0, :2], [0.0, 0.0])
    assert a.data[0, 0] == 0 and a.data[0, 1] == 0 and a.data[0, 2] > 0.99
    assert np.all(np.isfinite(gp)) and np.all(np.isfinite(gn)) and gp[0, 0] == 0
