import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, ce64, forward64, max_rel_error, xi64
from seatlab.engine import (DTYPE, GraphError, NonFiniteError, Program, constant, evaluate,
                            gradient, leaf, ops, second_order_gradient)
from seatlab.engine import kernels
from seatlab.models import Model, ModelSpec, cross_entropy, one_hot


def grad_values(root, leaves, bindings):
    g = gradient(root, leaves)
    return evaluate([g[l] for l in leaves], bindings)


# -- evaluation -----------------------------------------------------------------------

def test_constant_graph():
    assert evaluate(constant(3.0)) == 3.0


def test_square_and_its_derivative():
    x = leaf("x", ())
    assert evaluate(x * x, {"x": 3.0}) == 9.0
    (g,) = grad_values(x * x, [x], {"x": 3.0})
    assert g == 6.0


def test_unbound_leaf_and_shape_mismatch():
    x = leaf("x", (2,))
    with pytest.raises(GraphError, match="unbound"):
        evaluate(x + 1.0, {})
    with pytest.raises(GraphError, match="shape"):
        evaluate(x + 1.0, {"x": np.zeros(3)})


def test_only_scalar_broadcasting():
    with pytest.raises(GraphError):
        leaf("a", (2, 3)) + leaf("b", (3,))


def test_gradient_errors():
    x = leaf("x", (3,))
    with pytest.raises(GraphError, match="scalar"):
        gradient(x * 2.0, [x])
    with pytest.raises(GraphError, match="leaves"):
        gradient(ops.reduce_sum(x), [x * 2.0])


def test_gradient_of_constant_is_zero():
    x = leaf("x", (2, 2))
    (g,) = grad_values(constant(5.0) + 0.0, [x], {"x": np.ones((2, 2))})
    assert g.shape == (2, 2) and not g.any()


def test_overflow_raises():
    x = leaf("x", ())
    with pytest.raises(NonFiniteError):
        evaluate(ops.exp(x), {"x": 1000.0})


def test_reevaluation_is_bit_identical():
    rng = np.random.default_rng(0)
    m = Model.init(ModelSpec(channels=(4,), hidden=(8,), input_shape=(1, 8, 8)), 0)
    x = rng.random((5, 1, 8, 8)).astype(DTYPE)
    a, b = m.forward(x), m.forward(x)
    assert a.tobytes() == b.tobytes()


def test_reduce_max_and_mask_use_first_maximum():
    a = leaf("a", (1, 3))
    mask = evaluate(ops.max_mask(a, 1), {"a": np.array([[2.0, 2.0, 1.0]])})
    np.testing.assert_array_equal(mask, [[1, 0, 0]])
    (g,) = grad_values(ops.reduce_sum(ops.reduce_max(a, 1)), [a], {"a": [[2.0, 2.0, 1.0]]})
    np.testing.assert_array_equal(g, [[1, 0, 0]])


def test_sign_and_relu_conventions():
    x = leaf("x", (3,))
    vals = {"x": np.array([-1.0, 0.0, 2.0])}
    np.testing.assert_array_equal(grad_values(ops.reduce_sum(ops.sign(x)), [x], vals)[0], 0)
    np.testing.assert_array_equal(grad_values(ops.reduce_sum(ops.relu(x)), [x], vals)[0],
                                  [0, 0, 1])
    np.testing.assert_array_equal(
        grad_values(ops.reduce_sum(ops.clamp(x, -0.5, 1.0)), [x], vals)[0], [0, 1, 0])


# -- kernels against a naive oracle ---------------------------------------------------

@pytest.mark.parametrize("pad", [0, 1, 2])
def test_conv_kernels_are_adjoint(pad):
    rng = np.random.default_rng(pad)
    x = rng.standard_normal((2, 3, 6, 6)).astype(DTYPE)
    w = rng.standard_normal((4, 3, 3, 3)).astype(DTYPE)
    y = kernels.conv2d(x, w, pad)
    from oracles import conv64
    np.testing.assert_allclose(y, conv64(x, w, np.zeros(4), pad), atol=1e-5)
    g = rng.standard_normal(y.shape).astype(DTYPE)
    lhs = float((y.astype(np.float64) * g).sum())
    dx = kernels.conv2d_input_grad(g, w, pad)
    dw = kernels.conv2d_weight_grad(x, g, pad, 3)
    assert np.isclose(lhs, (x.astype(np.float64) * dx).sum(), rtol=1e-5)
    assert np.isclose(lhs, (w.astype(np.float64) * dw).sum(), rtol=1e-5)


def test_pool_and_upsample_are_adjoint():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 4, 6)).astype(DTYPE)
    g = rng.standard_normal((2, 3, 2, 3)).astype(DTYPE)
    assert np.isclose((kernels.avgpool2(a) * g).sum(), (a * kernels.upsample2(g)).sum(),
                      rtol=1e-5)


# -- first-order gradients --------------------------------------------------------------

def test_mlp_forward_matches_straight_line_oracle():
    spec = ModelSpec(arch="mlp", input_shape=(6,), hidden=(5, 4), num_classes=3)
    m = Model.init(spec, 1)
    x = np.random.default_rng(2).random((7, 6)).astype(DTYPE)
    np.testing.assert_allclose(m.forward(x), forward64(spec, m.params, x), atol=1e-6)


def _with_random_biases(model, seed=5, scale=0.05):
    """Nonzero biases keep pre-activations off the ReLU kink, where central
    differences and the one-sided derivative disagree."""
    rng = np.random.default_rng(seed)
    return model.with_params({k: v + DTYPE(scale) * rng.standard_normal(v.shape).astype(DTYPE)
                              if k.endswith("bias") else v for k, v in model.params.items()})


def _param_grads(model, x, y):
    n = len(x)
    xl, yl = model.input_leaf("x", n), model.label_leaf("y", n)
    loss = ops.mean(cross_entropy(model.logits_node(xl), yl))
    leaves = list(model.param_leaves().values())
    out = model.run(Program(list(gradient(loss, leaves).values())), x=x,
                    y=one_hot(y, model.num_classes))
    return dict(zip(model.params, out))


def test_two_layer_mlp_ce_gradient_vs_finite_differences():
    spec = ModelSpec(arch="mlp", input_shape=(8,), hidden=(6,), num_classes=4)
    m = _with_random_biases(Model.init(spec, 0))
    rng = np.random.default_rng(1)
    x = rng.random((5, 8)).astype(DTYPE)
    y = rng.integers(0, 4, 5)
    got = _param_grads(m, x, y)
    fd = central_diff(lambda p: ce64(forward64(spec, p, x), y).mean(), m.params, 1e-3)
    assert max_rel_error(got, fd) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(2, 4), st.integers(0, 10_000))
def test_matmul_lse_gradient_vs_fd_random_shapes(n, d, c, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, d)).astype(DTYPE)
    w = rng.standard_normal((d, c)).astype(DTYPE)
    al, wl = leaf("a", (n, d)), leaf("w", (d, c))
    f = ops.reduce_sum(ops.logsumexp(al @ wl) * ops.reduce_sum(ops.exp(al * 0.3), axes=(1,)))
    ga, gw = grad_values(f, [al, wl], {"a": a, "w": w})

    def ref(p):
        z = p["a"] @ p["w"]
        m = z.max(axis=1)
        lse = np.log(np.exp(z - m[:, None]).sum(axis=1)) + m
        return float((lse * np.exp(0.3 * p["a"]).sum(axis=1)).sum())

    fd = central_diff(ref, {"a": a, "w": w}, 1e-6)
    for got, want in ((ga, fd["a"]), (gw, fd["w"])):
        np.testing.assert_allclose(got, want, rtol=2e-4, atol=2e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_gradient_is_linear(size, a, b, seed):
    rng = np.random.default_rng(seed)
    xv = rng.standard_normal(size).astype(DTYPE)
    x = leaf("x", (size,))
    f = ops.reduce_sum(ops.exp(x * 0.5))
    g = ops.reduce_sum(x * x) + ops.reduce_sum(ops.relu(x))
    (combo,) = grad_values(a * f + b * g, [x], {"x": xv})
    gf, = grad_values(f, [x], {"x": xv})
    gg, = grad_values(g, [x], {"x": xv})
    np.testing.assert_allclose(combo, a * gf + b * gg, rtol=1e-5, atol=1e-5)


# -- second order ----------------------------------------------------------------------

def test_second_order_analytic_example():
    theta, x, delta = leaf("theta", ()), leaf("x", ()), leaf("delta", ())
    loss = theta * x * x
    g = delta * gradient(loss, [x])[x]  # 2 theta x delta
    (dtheta,) = evaluate([second_order_gradient(g, [theta])[theta]],
                         {"theta": 0.7, "x": 1.0, "delta": 0.5})
    assert dtheta == pytest.approx(1.0)


def test_theta_independent_slope_gives_zero_second_order():
    theta, x, delta = leaf("theta", ()), leaf("x", (3,)), leaf("delta", (3,))
    loss = ops.reduce_sum(x * 2.0) + theta * theta
    inner = ops.reduce_sum(delta * gradient(loss, [x])[x])
    (d,) = evaluate([gradient(inner, [theta])[theta]],
                    {"theta": 1.5, "x": np.ones(3), "delta": np.full(3, 0.2)})
    assert d == 0.0


def test_one_hidden_unit_xi_gradient_vs_fd():
    spec = ModelSpec(arch="mlp", input_shape=(3,), hidden=(1,), num_classes=2)
    m = _with_random_biases(Model.init(spec, 4), scale=0.3)
    rng = np.random.default_rng(0)
    x = rng.random((4, 3)).astype(DTYPE)
    y = np.array([0, 1, 1, 0])
    d = (0.2 * rng.standard_normal((4, 3))).astype(DTYPE)
    from seatlab.training import linearity_regularizer
    _, got = linearity_regularizer(m, x, y, d, lam=1.0, with_grad=True)
    fd = central_diff(lambda p: xi64(spec, p, x, y, d).mean(), m.params, 1e-6)
    assert max_rel_error(got, fd, floor=1e-5) < 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4), st.integers(0, 10_000))
def test_hessian_vector_product_vs_fd_of_gradient(d, c, seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((c, d))
    xv, v = rng.standard_normal(d), rng.standard_normal(d)
    x, vl = leaf("x", (1, d)), leaf("v", (1, d))
    f = ops.reduce_sum(ops.logsumexp(x @ constant(W.T)))
    gx = gradient(f, [x])[x]
    hv = gradient(ops.reduce_sum(vl * gx), [x])[x]
    (got,) = evaluate([hv], {"x": xv[None], "v": v[None]})

    def grad64(z):
        s = W @ z
        p = np.exp(s - s.max())
        p /= p.sum()
        return W.T @ p

    h = 1e-5
    want = (grad64(xv + h * v) - grad64(xv - h * v)) / (2 * h)
    np.testing.assert_allclose(got[0], want, rtol=1e-3, atol=1e-5)
