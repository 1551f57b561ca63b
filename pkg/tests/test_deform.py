import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dynsurf.deform import (DeformationField, FrameCodes, PosEncConfig, SE3Params, deform_jacobian, map_to_canonical,
                            posenc, quat_exp, quat_to_matrix, se3_apply)
from dynsurf.diffmath import Dual, Var, finite_diff_entries, finite_diff_grad, gradients, rel_error, tape

vec3 = arrays(np.float64, 3, elements=st.floats(-10, 10))


def codes(rng, z_dim=8):
    return FrameCodes(Var(rng.normal(0, 0.01, z_dim)), Var(rng.normal(0, 0.01, 4)))


def awake_field(rng, ambient=2, std=0.3, **kw):
    """Field whose zero-initialised output layers are given random weights."""
    f = DeformationField(rng, ambient_dim=ambient, z_dim=8, bands=3, width=16, depth=3, skip=None, **kw)
    f.pe.window_alpha = 3.0
    for net in (f.deform_net, f.topo_net):
        if net is not None:
            for v in net.layers[-1].values():
                v.data[...] = rng.normal(0, std, v.data.shape)
    return f


# --- quaternion exponential ------------------------------------------------------

def test_quat_exp_identity():
    assert np.array_equal(quat_exp(np.zeros(3)), [1.0, 0.0, 0.0, 0.0])


def test_quat_exp_half_pi():
    assert np.allclose(quat_exp([np.pi / 2, 0, 0]), [0, 1, 0, 0], atol=1e-15)


def test_quat_exp_unit_norm_example():
    assert abs(np.linalg.norm(quat_exp([0.3, -0.2, 0.1])) - 1) < 1e-12


@given(vec3)
def test_quat_exp_unit_norm_property(r):
    assert abs(np.linalg.norm(quat_exp(r)) - 1) < 1e-9


@given(arrays(np.float64, 3, elements=st.floats(-1e-8, 1e-8)))
def test_quat_exp_series_branch(r):
    q = quat_exp(r)
    assert abs(np.linalg.norm(q) - 1) < 1e-12
    assert np.allclose(q[1:], r, rtol=1e-12, atol=1e-24)


def test_quat_exp_gradient_near_and_far(rng):
    for scale in (1e-5, 1.0):
        r0 = rng.normal(size=3) * scale
        r = Var(r0.copy(), requires_grad=True)
        q = quat_exp(Dual(tape.reshape(r, (1, 3))))
        out = tape.vsum(q.var * np.array([0.3, -1.2, 0.7, 2.0]))
        (g,) = gradients(out, [r])
        fd = finite_diff_grad(lambda v: float(quat_exp(v) @ [0.3, -1.2, 0.7, 2.0]), r0, 1e-7 * max(scale, 1e-2))
        assert rel_error(g, fd, 1e-6).max() < 1e-4


def test_rotation_matrix_is_proper(rng):
    R = quat_to_matrix(quat_exp(rng.normal(size=(50, 3))))
    assert np.abs(R @ np.swapaxes(R, -1, -2) - np.eye(3)).max() < 1e-12
    assert np.allclose(np.linalg.det(R), 1.0)


# --- SE(3) application --------------------------------------------------------

def test_se3_identity():
    p = SE3Params(np.zeros(3), np.array([0.4, -1, 2]), np.zeros(3))
    assert np.array_equal(se3_apply(p, np.array([1.0, 2.0, 3.0])), [1, 2, 3])


def test_se3_translation():
    p = SE3Params(np.zeros(3), np.zeros(3), np.array([0, 0, 0.5]))
    assert np.array_equal(se3_apply(p, np.zeros(3)), [0, 0, 0.5])


def test_se3_half_turn_about_z():
    p = SE3Params(np.array([0, 0, np.pi / 2]), np.zeros(3), np.zeros(3))
    assert np.abs(se3_apply(p, np.array([1.0, 0, 0])) - [-1, 0, 0]).max() < 1e-12


def test_se3_rotates_about_anchor():
    a = np.array([1.0, 1.0, 0.0])
    p = SE3Params(np.array([0, 0, np.pi / 2]), a, np.zeros(3))
    assert np.allclose(se3_apply(p, a), a, atol=1e-15)
    assert np.allclose(se3_apply(p, a + [1, 0, 0]), a - [1, 0, 0], atol=1e-12)


@given(vec3, vec3, vec3, vec3, vec3)
def test_se3_is_rigid(r, a, d, x, y):
    p = SE3Params(r / 3, a, d)
    fx, fy = se3_apply(p, x), se3_apply(p, y)
    assert abs(np.linalg.norm(fx - fy) - np.linalg.norm(x - y)) < 1e-9 * max(1.0, np.linalg.norm(x - y))


# --- positional encoding -------------------------------------------------------

def test_posenc_closed_window_is_identity_plus_zeros(rng):
    x = rng.normal(size=(5, 3))
    enc = posenc(x, PosEncConfig(4, 0.0))
    assert enc.shape == (5, 3 + 24)
    assert np.array_equal(enc[:, :3], x) and np.all(enc[:, 3:] == 0)


def test_posenc_open_window():
    cfg = PosEncConfig(4, 4.0)
    assert np.all(cfg.weights() == 1)
    cfg = PosEncConfig(4, 10.0)
    assert np.all(cfg.weights() == 1)


def test_posenc_half_band_weight():
    assert PosEncConfig(6, 0.5).weights()[0] == pytest.approx(0.5, abs=1e-15)


def test_posenc_values(rng):
    x = rng.normal(size=(2, 3))
    enc = posenc(x, PosEncConfig(2, 2.0))
    scaled = x[:, None, :] * (np.pi * np.array([1.0, 2.0]))[:, None]
    ref = np.concatenate([x, np.concatenate([np.sin(scaled), np.cos(scaled)], -1).reshape(2, -1)], -1)
    assert np.allclose(enc, ref, atol=1e-14)


@given(st.floats(0, 8), st.floats(0, 8))
def test_posenc_weights_monotone(a, b):
    lo, hi = sorted((a, b))
    wl, wh = PosEncConfig(6, lo).weights(), PosEncConfig(6, hi).weights()
    assert np.all(wl <= wh + 1e-15) and np.all((wl >= 0) & (wh <= 1))


# --- networks ----------------------------------------------------------------

def test_zero_init_is_identity_embedding(rng):
    f = DeformationField(rng, ambient_dim=2, z_dim=8, bands=3, width=16, depth=3)
    x = rng.uniform(-0.5, 0.5, (20, 3))
    xc, w = map_to_canonical(f, x, codes(rng))
    assert np.array_equal(xc, x) and np.array_equal(w, np.zeros((20, 2)))
    assert np.array_equal(deform_jacobian(f, x, codes(rng)), np.broadcast_to(np.eye(3), (20, 3, 3)))


@pytest.mark.parametrize("m", [2, 8])
def test_topology_output_length(rng, m):
    f = DeformationField(rng, ambient_dim=m, z_dim=8, bands=2, width=8, depth=2)
    _, w = map_to_canonical(f, rng.normal(size=(4, 3)), codes(rng))
    assert w.shape == (4, m)


def test_outputs_finite(rng):
    f = awake_field(rng)
    xc, w = map_to_canonical(f, rng.uniform(-0.5, 0.5, (100, 3)), codes(rng))
    assert np.all(np.isfinite(xc)) and np.all(np.isfinite(w))


def test_deform_jacobian_matches_fd(rng):
    f = awake_field(rng)
    c = codes(rng)
    x = rng.uniform(-0.5, 0.5, 3)
    J = deform_jacobian(f, x, c)
    fd = np.stack([finite_diff_grad(lambda v: map_to_canonical(f, v[None], c)[0][0, i], x, 1e-5) for i in range(3)])
    assert np.all(np.abs(J - fd) < 1e-5 * (1 + np.abs(J)))


def test_deform_weight_gradients_match_fd(rng):
    f = awake_field(rng)
    c = codes(rng)
    x = rng.uniform(-0.5, 0.5, (6, 3))
    probe = rng.normal(size=(6, 3))
    params = f.params()

    def loss():
        xc, w = f(Dual.const(x), c.z)
        return tape.vsum(xc.var[0] * probe) + tape.vsum(tape.square(w.var[0]))

    grads = gradients(loss(), params)
    for p, g in zip(params[::3], grads[::3]):
        idx = rng.choice(p.data.size, min(4, p.data.size), replace=False)
        fd = finite_diff_entries(lambda: float(loss().data), p.data, idx, 1e-6)
        assert rel_error(g.reshape(-1)[idx], fd, 1e-7).max() < 1e-4


def test_constant_half_turn_jacobian(rng):
    """A field whose output is a constant 180 degree rotation about z has J = diag(-1, -1, 1)."""
    f = DeformationField(rng, ambient_dim=0, z_dim=8, bands=2, width=8, depth=2)
    f.deform_net.layers[-1]["b"].data[:] = [0, 0, np.pi / 2, 0, 0, 0, 0, 0, 0]
    J = deform_jacobian(f, rng.normal(size=(3, 3)), codes(rng))
    assert np.abs(J - np.diag([-1.0, -1.0, 1.0])).max() < 1e-12


def test_unsupported_mode(rng):
    with pytest.raises(NotImplementedError):
        DeformationField(rng, mode="bijective")
