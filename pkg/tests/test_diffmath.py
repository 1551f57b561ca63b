import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynsurf.diffmath import (AdamState, Dual, Var, adam_step, finite_diff_grad, gradients, jacobian_fwd,
                              no_grad, rel_error)
from dynsurf.diffmath import tape


def grad_of(fn, *arrays):
    vs = [Var(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*vs)
    return [np.asarray(g) for g in gradients(out, vs)]


# --- backward -----------------------------------------------------------------

def test_square_derivative():
    (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == 6.0


def test_sum_derivative_is_one_each():
    gx, gy = grad_of(lambda x, y: x + y, 1.7, -0.4)
    assert gx == 1.0 and gy == 1.0


def test_unreachable_leaf_gets_zero():
    x = Var(np.array(2.0), requires_grad=True)
    y = Var(np.ones(3), requires_grad=True)
    gx, gy = gradients(x * 2.0, [x, y])
    assert gx == 2.0 and np.all(gy == 0)


def test_non_scalar_output_rejected():
    x = Var(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        gradients(x * 2.0, [x])


def test_nan_names_the_op():
    x = Var(np.array(-1.0), requires_grad=True)
    with np.errstate(all="ignore"):
        y = tape.sqrt(x)
        with pytest.raises(FloatingPointError, match="sqrt"):
            gradients(y, [x])


def test_backward_is_bit_deterministic(rng):
    w = Var(rng.normal(size=(5, 4)), requires_grad=True)
    x = rng.normal(size=(7, 5))
    h = tape.sigmoid(x @ w)
    out = tape.vsum(h * h) + tape.vsum(tape.exp(h[:, 1:] * 0.3))
    g1 = gradients(out, [w])[0]
    g2 = gradients(out, [w])[0]
    assert np.array_equal(g1, g2)


def test_backward_accumulates_into_grad():
    x = Var(np.array(1.5), requires_grad=True)
    tape.backward(x * x)
    tape.backward(x * 3.0)
    assert float(x.grad) == pytest.approx(6.0)


UNARY = {
    "exp": (tape.exp, np.exp, (-2, 2)),
    "log": (tape.log, np.log, (0.2, 3)),
    "sqrt": (tape.sqrt, np.sqrt, (0.2, 3)),
    "sigmoid": (tape.sigmoid, lambda x: 1 / (1 + np.exp(-x)), (-4, 4)),
    "softplus": (tape.softplus, lambda x: np.log1p(np.exp(x)), (-4, 4)),
    "square": (tape.square, np.square, (-2, 2)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    op, ref, (lo, hi) = UNARY[name]
    x = rng.uniform(lo, hi, 100)
    (g,) = grad_of(lambda v: tape.vsum(op(v)), x)
    fd = np.array([finite_diff_grad(lambda a: float(ref(a[0])), [xi], 1e-6)[0] for xi in x])
    assert rel_error(g, fd).max() < 1e-4


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name, rng):
    fn = BINARY[name]
    a = rng.uniform(0.5, 2.0, 100)
    b = rng.uniform(0.5, 2.0, 100)
    ga, gb = grad_of(lambda x, y: tape.vsum(fn(x, y)), a, b)
    fda = np.array([finite_diff_grad(lambda v: float(fn(v[0], bi)), [ai], 1e-6)[0] for ai, bi in zip(a, b)])
    fdb = np.array([finite_diff_grad(lambda v: float(fn(ai, v[0])), [bi], 1e-6)[0] for ai, bi in zip(a, b)])
    assert rel_error(ga, fda).max() < 1e-4
    assert rel_error(gb, fdb).max() < 1e-4


def test_matmul_and_cumprod_match_finite_differences(rng):
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    c = rng.uniform(0.1, 0.9, (3, 6))
    weights = rng.normal(size=(3, 6))

    def f(x, y, z):
        return tape.vsum(tape.square(x @ y)) + tape.vsum(tape.exclusive_cumprod(z, axis=-1) * weights)

    ga, gb, gc = grad_of(f, a, b, c)

    def scalar(x, y, z):
        cp = np.ones_like(z)
        cp[:, 1:] = np.cumprod(z[:, :-1], axis=-1)
        return float(((x @ y) ** 2).sum() + (cp * weights).sum())

    assert rel_error(ga, finite_diff_grad(lambda v: scalar(v, b, c), a, 1e-6)).max() < 1e-4
    assert rel_error(gb, finite_diff_grad(lambda v: scalar(a, v, c), b, 1e-6)).max() < 1e-4
    assert rel_error(gc, finite_diff_grad(lambda v: scalar(a, b, v), c, 1e-6)).max() < 1e-4


def test_cumprod_gradient_with_zero_factor():
    z = np.array([[0.5, 0.0, 0.25, 0.8]])
    (g,) = grad_of(lambda v: tape.vsum(tape.exclusive_cumprod(v, axis=-1)), z)
    # d/dz of [1, z0, z0 z1, z0 z1 z2] summed
    expected = np.array([[1 + z[0, 1] + z[0, 1] * z[0, 2], z[0, 0] + z[0, 0] * z[0, 2], z[0, 0] * z[0, 1], 0.0]])
    assert np.allclose(g, expected)


def test_relu_kink_has_zero_subgradient():
    (g,) = grad_of(lambda v: tape.vsum(tape.relu(v)), np.array([0.0, 1.0, -1.0]))
    assert list(g) == [0.0, 1.0, 0.0]


def test_dtype_of_gradient_follows_leaf():
    w = Var(np.ones((3, 2), dtype=np.float32), requires_grad=True)
    x = np.ones((4, 3))          # float64 data flowing into a float32 weight
    (g,) = gradients(tape.vsum(Var(x) @ w), [w])
    assert g.dtype == np.float32


# --- finite differences -----------------------------------------------------------

def test_fd_quadratic():
    g = finite_diff_grad(lambda x: x[0] ** 2, [3.0], h=1e-4)
    assert abs(g[0] - 6.0) < 1e-7


def test_fd_constant_is_zero():
    assert np.all(finite_diff_grad(lambda x: 4.2, np.ones(5)) == 0)


def test_fd_rejects_bad_step_and_nonfinite():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, [1.0], h=0)
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda x: np.inf, [1.0])


def test_fd_free_space_exponential_branch():
    alpha = 5.0
    g = finite_diff_grad(lambda p: np.exp(-alpha * p[0]) - 1.0, [-0.1], h=1e-6)
    assert g[0] == pytest.approx(-alpha * np.exp(0.5), rel=1e-8)


# --- forward mode -------------------------------------------------------------------

def test_jacobian_identity_and_linear(rng):
    x = rng.normal(size=3)
    assert np.array_equal(jacobian_fwd(lambda d: d, x), np.eye(3))
    A = rng.normal(size=(3, 3))
    J = jacobian_fwd(lambda d: d @ A.T, x)
    assert np.allclose(J, A, atol=1e-14)


def _rot(axis, ang):
    c, s = np.cos(ang), np.sin(ang)
    i, j = [k for k in range(3) if k != axis]
    R = np.eye(3)
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


def test_jacobian_chain_rule(rng):
    A = rng.normal(size=(3, 3))
    R = _rot(1, 0.7) @ _rot(2, -0.3)
    x = rng.normal(size=(5, 3))
    J = jacobian_fwd(lambda d: (d @ A.T) @ R.T, x)
    assert np.abs(J - R @ A).max() < 1e-10


def test_jacobian_nonlinear_matches_fd(rng):
    def f_np(v):
        return np.array([np.sin(v[0]) * v[1], np.exp(v[2]) + v[0] ** 2, v[1] * v[2]])

    def f_dual(d):
        x0, x1, x2 = d[..., 0:1], d[..., 1:2], d[..., 2:3]
        from dynsurf.diffmath.dual import concat
        return concat([x0.sin() * x1, x2.exp() + x0 * x0, x1 * x2], axis=-1)

    x = rng.normal(size=3)
    J = jacobian_fwd(f_dual, x)
    fd = np.stack([finite_diff_grad(lambda v: f_np(v)[i], x, 1e-6) for i in range(3)])
    assert np.abs(J - fd).max() < 1e-5 * (1 + np.abs(fd).max())


def test_jacobian_rejects_wrong_output():
    with pytest.raises(TypeError):
        jacobian_fwd(lambda d: d[..., 0:2], np.zeros(3))


def test_dual_second_order_through_reverse(rng):
    """d/dw of |grad_x (w . x)^2| via forward-over-reverse matches finite differences."""
    x = rng.normal(size=(4, 3))
    w0 = rng.normal(size=3)

    def loss_np(w):
        g = 2 * (x @ w)[:, None] * w[None, :]
        return float((g ** 2).sum())

    w = Var(w0.copy(), requires_grad=True)
    xd = Dual.seed(x)
    s = (xd * Dual.lift(tape.reshape(w, (1, 3)), 4)).sum(-1, keepdims=True)
    f = s * s
    gx = f.var[1:, :, 0]
    out = tape.vsum(tape.square(gx))
    (g,) = gradients(out, [w])
    assert rel_error(g, finite_diff_grad(loss_np, w0, 1e-6)).max() < 1e-6


# --- Adam -------------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = np.array([1.0, -2.0])
    st_ = AdamState()
    adam_step([p], [np.zeros(2)], st_, 5e-4)
    assert np.array_equal(p, [1.0, -2.0]) and st_.t == 1


def test_adam_first_step():
    p = np.array([0.0])
    adam_step([p], [np.array([1.0])], AdamState(), 5e-4)
    # m_hat = 1, v_hat = 1: step lr / (1 + eps)
    assert p[0] == pytest.approx(-5e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_constant_gradient_bounded_steps():
    p = np.array([0.0])
    st_ = AdamState()
    prev = p.copy()
    for _ in range(2):
        adam_step([p], [np.array([0.37])], st_, 5e-4)
        assert abs(p[0] - prev[0]) <= 5e-4 * (1 + 1e-8)
        prev = p.copy()


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), 1e-3)
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [], AdamState(), 1e-3)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_adam_second_moment_nonnegative(gs):
    p = np.zeros(1)
    st_ = AdamState()
    for k, g in enumerate(gs):
        adam_step([p], [np.array([g])], st_, 1e-3)
        assert st_.v[0][0] >= 0 and st_.t == k + 1


def test_sparse_adam_matches_dense_on_touched_rows(rng):
    from dynsurf.diffmath.tape import SparseGrad
    p1 = rng.normal(size=(6, 2))
    p2 = p1.copy()
    rows = rng.normal(size=(3, 2))
    sg = SparseGrad(np.array([1, 4, 1]), rows, p1.shape)
    dense = sg.to_dense()
    adam_step([p1], [sg], AdamState(), 1e-2)
    adam_step([p2], [dense], AdamState(), 1e-2)
    assert np.allclose(p1[[1, 4]], p2[[1, 4]], atol=1e-15)


def test_no_grad_builds_no_graph():
    x = Var(np.array(2.0), requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad
