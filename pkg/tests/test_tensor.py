from __future__ import annotations

import numpy as np
import pytest

from feddistill.errors import GraphError, NumericError, ShapeError
from feddistill.tensor import (
    GradSet,
    ParamSet,
    Tensor,
    add,
    asum,
    col2im,
    concat,
    cos,
    div,
    exp,
    expand,
    finite_diff_check,
    grad,
    hypergrad,
    im2col,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sin,
    sqrt,
    take_slice,
    transpose,
)


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# ---- basic grad behaviour ------------------------------------------------


def test_quadratic_gradient():
    w = _leaf([1.0, 2.0])
    loss = asum(mul(w, w))
    g = grad(loss, [w])[0]
    np.testing.assert_allclose(g.data, [2.0, 4.0])


def test_disconnected_parameter_gets_zero_gradient():
    w = _leaf([3.0, 4.0])
    loss = Tensor(np.array(7.0), requires_grad=True) * 1.0
    g = grad(loss, [w])[0]
    np.testing.assert_array_equal(g.data, np.zeros(2))


def test_constant_loss_gradient_is_zero():
    w = _leaf([1.0, 2.0])
    loss = Tensor(np.array(5.0))
    # loss has no graph at all; gradient w.r.t. w is zero, not an error
    g = grad(loss, [w])[0]
    np.testing.assert_array_equal(g.data, np.zeros(2))


def test_non_scalar_loss_rejected():
    w = _leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        grad(mul(w, w), [w])


def test_gradient_accumulates_over_reused_node():
    x = _leaf([2.0])
    y = add(x, x)  # dy/dx = 2
    g = grad(asum(y), [x])[0]
    np.testing.assert_allclose(g.data, [2.0])


def test_strict_shapes_and_dtypes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        add(a, b)
    c = Tensor(np.zeros((2, 3), dtype=np.float64))
    d = Tensor(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        mul(c, d)


def test_default_dtype_is_float32_and_arrays_keep_precision():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.array([1.0])).dtype == np.float64
    assert Tensor(np.array([1], dtype=np.int64)).dtype == np.float32


# ---- finite-difference oracle ---------------------------------------------


def test_fd_check_square():
    # f = x^2 at x=3: derivative 6 recovered to 1e-6
    err = finite_diff_check(lambda t: mul(t, t).sum(), Tensor(np.array([3.0])), eps=1e-4)
    assert err < 1e-6


def test_fd_check_sin_matches_analytic_cos():
    x = _rng(7).normal(size=11)
    t = Tensor(x, requires_grad=True)
    loss = asum(sin(t))
    g = grad(loss, [t])[0]
    np.testing.assert_allclose(g.data, np.cos(x), atol=1e-12)
    assert finite_diff_check(lambda u: asum(sin(u)), Tensor(x), eps=1e-5) < 1e-6


def test_fd_check_branch_away_from_kink():
    x = np.array([0.5, -1.5, 2.0])
    err = finite_diff_check(lambda t: asum(relu(t)), Tensor(x), eps=1e-5)
    assert np.isfinite(err)


def test_fd_check_rejects_nonfinite():
    with pytest.raises(NumericError):
        finite_diff_check(lambda t: log(t).sum(), Tensor(np.array([-1.0])), eps=1e-5)


def _mlp_loss(params_flat, x, y_onehot, widths):
    """Tiny MLP cross-entropy written directly against the ops (test-local)."""
    offset = 0
    h = x
    for i in range(len(widths) - 1):
        w_size = widths[i] * widths[i + 1]
        w = reshape(take_slice(params_flat, 0, offset, offset + w_size), (widths[i], widths[i + 1]))
        offset += w_size
        b = take_slice(params_flat, 0, offset, offset + widths[i + 1])
        offset += widths[i + 1]
        h = matmul(h, w) + expand(reshape(b, (1, widths[i + 1])), (h.shape[0], widths[i + 1]))
        if i < len(widths) - 2:
            h = relu(h)
    z = h - expand(Tensor(h.data.max(axis=1, keepdims=True)), h.shape)
    lse = log(asum(exp(z), axes=(1,), keepdims=True))
    logp = z - expand(lse, z.shape)
    return mul_scalar_neg_mean(mul(logp, y_onehot))


def mul_scalar_neg_mean(t):
    return asum(t) * (-1.0 / t.shape[0])


def test_mlp_gradient_matches_finite_differences():
    rng = _rng(123)
    widths = [4, 6, 3]
    n_params = sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))
    theta = rng.normal(scale=0.5, size=n_params)
    x = Tensor(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 3, size=5)
    onehot = Tensor(np.eye(3)[labels])

    err = finite_diff_check(lambda p: _mlp_loss(p, x, onehot, widths), Tensor(theta), eps=1e-3)
    assert err < 1e-4


# ---- hypergrad -------------------------------------------------------------


def test_hypergrad_matches_closed_form_1d():
    # model f(theta, s) = theta*s, synthetic loss 0.5*(theta*s)^2,
    # match loss (dL/dtheta - g)^2 with constant g:
    # d(match)/ds = 4*theta*s*(theta*s^2 - g)
    theta_v, s_v, g_v = 1.5, 0.8, 0.3
    theta = Tensor(np.array(theta_v), requires_grad=True)
    s = Tensor(np.array(s_v), requires_grad=True)
    syn_loss = 0.5 * (theta * s) ** 2
    (g_theta,) = grad(syn_loss, [theta], create_graph=True)
    match = (g_theta - Tensor(np.array(g_v))) ** 2
    (hyp,) = hypergrad(match, [s])
    expected = 4.0 * theta_v * s_v * (theta_v * s_v**2 - g_v)
    np.testing.assert_allclose(hyp.data, expected, rtol=1e-12)


def test_hypergrad_independent_loss_is_zero():
    s = _leaf([1.0, 2.0])
    theta = _leaf([3.0])
    loss = asum(mul(theta, theta))
    (g_theta,) = grad(loss, [theta], create_graph=True)
    match = asum(mul(g_theta, g_theta))
    (hyp,) = hypergrad(match, [s])
    np.testing.assert_array_equal(hyp.data, np.zeros(2))


def test_hypergrad_without_retention_raises():
    theta = _leaf([2.0])
    s = _leaf([0.5])
    loss = asum(mul(mul(theta, s), mul(theta, s)))
    (g_theta,) = grad(loss, [theta])  # no create_graph
    match = asum(mul(g_theta, g_theta))
    with pytest.raises(GraphError, match="create_graph"):
        hypergrad(match, [s])


def test_hypergrad_requires_grad_inputs():
    s = Tensor(np.array([0.5]))
    with pytest.raises(GraphError):
        hypergrad(Tensor(np.array(1.0)), [s])


def test_hypergrad_matches_finite_differences():
    # pipeline: inner grad of a tiny model loss, cosine-style distance to a
    # fixed gradient, differentiated w.r.t. the synthetic batch
    rng = _rng(5)
    w0 = rng.normal(size=(3, 2))
    target = rng.normal(size=(3, 2))

    def match_loss(s_leaf):
        w = Tensor(w0, requires_grad=True)
        logits = matmul(s_leaf, w)
        loss = asum(mul(logits, logits))
        (gw,) = grad(loss, [w], create_graph=True)
        diff = gw - Tensor(target)
        return asum(mul(diff, diff))

    err = finite_diff_check(match_loss, Tensor(rng.normal(size=(4, 3))), eps=1e-4)
    assert err < 1e-6


def test_second_order_mixed_partials_symmetric():
    # f(x, y) = x^2*y + sin(x)*y^2: d2f/dxdy == d2f/dydx
    for seed in range(10):
        rng = _rng(seed)
        xv, yv = rng.normal(size=2)
        x = Tensor(np.array(xv), requires_grad=True)
        y = Tensor(np.array(yv), requires_grad=True)
        f = mul(mul(x, x), y) + mul(sin(x), mul(y, y))
        (gx,) = grad(f, [x], create_graph=True)
        (gxy,) = grad(gx, [y])
        f2 = mul(mul(x, x), y) + mul(sin(x), mul(y, y))
        (gy,) = grad(f2, [y], create_graph=True)
        (gyx,) = grad(gy, [x])
        assert abs(gxy.item() - gyx.item()) < 1e-5


def test_gradient_linearity():
    rng = _rng(11)
    for seed in range(20):
        w = Tensor(rng.normal(size=6), requires_grad=True)
        a, b = rng.normal(size=2)
        l1 = asum(mul(w, w))
        l2 = asum(sin(w))
        combined = l1 * float(a) + l2 * float(b)
        gc = grad(combined, [w])[0].data
        g1 = grad(l1, [w])[0].data
        g2 = grad(l2, [w])[0].data
        np.testing.assert_allclose(gc, a * g1 + b * g2, atol=1e-6)


def test_randomized_fd_property_many_seeds():
    # smaller cousin of the acceptance sweep: grad for random op chains
    for seed in range(30):
        rng = _rng(1000 + seed)
        x = rng.normal(size=7)

        def f(t):
            return asum(mul(sin(t), exp(t * 0.3))) + asum(sqrt(mul(t, t) + 1.0))

        assert finite_diff_check(f, Tensor(x), eps=1e-5) < 1e-6


# ---- structural ops ---------------------------------------------------------


def test_matmul_transpose_grads():
    rng = _rng(3)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    out = matmul(a, b)
    g = grad(asum(out), [a, b])
    np.testing.assert_allclose(g[0].data, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(g[1].data, a.data.T @ np.ones((3, 2)), rtol=1e-12)


def test_slice_concat_roundtrip_gradient():
    x = _leaf(np.arange(12.0).reshape(4, 3))
    parts = [take_slice(x, 0, 0, 2), take_slice(x, 0, 2, 4)]
    y = concat(parts, axis=0)
    g = grad(asum(mul(y, y)), [x])[0]
    np.testing.assert_allclose(g.data, 2 * x.data)


def test_expand_sum_duality():
    x = _leaf(np.array([[1.0], [2.0]]))
    y = expand(x, (2, 3))
    g = grad(asum(mul(y, y)), [x])[0]
    np.testing.assert_allclose(g.data, 2 * x.data * 3)


def test_im2col_col2im_adjoint_pair():
    # <im2col(x), c> == <x, col2im(c)> for random x, c: the defining property
    rng = _rng(9)
    x = rng.normal(size=(2, 3, 4, 4))
    cols_shape = im2col(Tensor(x), 3, 1, 1).shape
    c = rng.normal(size=cols_shape)
    lhs = float((im2col(Tensor(x), 3, 1, 1).data * c).sum())
    rhs = float((x * col2im(Tensor(c), x.shape, 3, 1, 1).data).sum())
    assert abs(lhs - rhs) < 1e-9


def test_im2col_gradient_matches_fd():
    rng = _rng(21)
    w = rng.normal(size=(9 * 2, 3))

    def f(t):
        cols = im2col(t, 3, 1, 1)
        return asum(mul(matmul(cols, Tensor(w)), matmul(cols, Tensor(w))))

    err = finite_diff_check(f, Tensor(rng.normal(size=(1, 2, 4, 4))), eps=1e-4)
    assert err < 1e-6


def test_no_grad_blocks_recording():
    x = _leaf([1.0, 2.0])
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad
    g = grad(asum(mul(x, x)), [x])[0]
    np.testing.assert_allclose(g.data, [2.0, 4.0])


def test_division_gradients():
    a = _leaf([3.0, 8.0])
    b = _leaf([2.0, 4.0])
    out = asum(div(a, b))
    ga, gb = (g.data for g in grad(out, [a, b]))
    np.testing.assert_allclose(ga, 1.0 / b.data)
    np.testing.assert_allclose(gb, -a.data / b.data**2)


def test_check_finite_raises():
    t = Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NumericError):
        t.check_finite("unit test")


# ---- ParamSet / GradSet ------------------------------------------------------


def test_paramset_rejects_duplicate_names():
    t = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ShapeError):
        ParamSet([("w", t, "linear"), ("w", t, "linear")])


def test_paramset_grad_returns_gradset():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([0.5]), requires_grad=True)
    params = ParamSet([("w", w, "linear"), ("b", b, "linear")])
    loss = asum(mul(w, w)) + asum(b)
    gs = grad(loss, params)
    assert isinstance(gs, GradSet)
    gs.check_congruent(params)
    np.testing.assert_allclose(gs.grads[0].data, [2.0, 4.0])
    np.testing.assert_allclose(gs.grads[1].data, [1.0])


def test_paramset_clone_is_deep():
    w = Tensor(np.array([1.0]), requires_grad=True)
    params = ParamSet([("w", w, "linear")])
    cloned = params.clone()
    cloned.get("w").data[0] = 99.0
    assert params.get("w").data[0] == 1.0


def test_mean_and_transpose():
    x = _leaf(np.arange(6.0).reshape(2, 3))
    m = mean(x, axes=(1,))
    np.testing.assert_allclose(m.data, [1.0, 4.0])
    t = transpose(x)
    assert t.shape == (3, 2)
    g = grad(asum(mul(t, t)), [x])[0]
    np.testing.assert_allclose(g.data, 2 * x.data)
