import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcgm.diffcore import (
    GradientError,
    GraphValue,
    NumericError,
    ShapeError,
    constant,
    detach,
    differentiate,
    eval_primitive,
    is_acyclic,
    ops,
    replay,
    variable,
)

from fdcheck import fd_grad, rel_err


def f64(x):
    return variable(x, dtype=np.float64)


def scalar_of(build, x):
    return build(GraphValue(np.asarray(x, np.float64))).item()


# -- forward examples --------------------------------------------------------

def test_matmul_identity_padded():
    a = constant([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = constant([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(ops.matmul(a, b).data, [[1.0, 2.0], [4.0, 5.0]])


def test_conv_all_ones_center_is_nine():
    y = ops.conv2d(constant(np.ones((1, 1, 4, 4))), constant(np.ones((1, 1, 3, 3))))
    assert y.data[0, 0, 1, 1] == 9.0
    assert y.data[0, 0, 0, 0] == 4.0


def test_sigmoid_zero():
    assert ops.sigmoid(constant([0.0])).item() == 0.5


def test_eval_primitive_by_tag():
    out = eval_primitive("add", constant([1.0]), constant([2.0]))
    assert out.item() == 3.0
    with pytest.raises(ValueError, match="unknown primitive"):
        eval_primitive("fft", constant([1.0]))


def test_shape_mismatch_is_descriptive():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="broadcast"):
        ops.add(constant(np.ones(3)), constant(np.ones(4)))
    with pytest.raises(ShapeError):
        ops.conv2d(constant(np.ones((1, 2, 4, 4))), constant(np.ones((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        ops.avgpool2(constant(np.ones((1, 1, 3, 4))))


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        ops.log(constant([0.0]))
    with pytest.raises(NumericError):
        ops.div(constant([1.0]), constant([0.0]))
    with pytest.raises(NumericError):
        variable([np.nan])


def test_sigmoid_is_stable_for_large_inputs():
    y = ops.sigmoid(constant([-1000.0, 1000.0], dtype=np.float64)).data
    np.testing.assert_array_equal(y, [0.0, 1.0])


# -- first and second derivatives ----------------------------------------------

def test_gradient_of_sum_of_squares():
    x = f64([1.0, 2.0, 3.0])
    (g,) = differentiate(ops.sum(x * x), [x])
    np.testing.assert_array_equal(g.data, [2.0, 4.0, 6.0])


def test_double_backward_closed_form():
    x = f64([1.0, -1.0])
    (g,) = differentiate(ops.sum(x * x), [x], create_graph=True)
    assert g.parents, "gradient must itself be a graph value"
    (gg,) = differentiate(ops.sum(g * g), [x])
    np.testing.assert_allclose(gg.data, [8.0, -8.0])


def test_non_scalar_and_unreachable_errors():
    x, y = f64([1.0, 2.0]), f64([3.0])
    with pytest.raises(GradientError, match="single-element"):
        differentiate(x * 2.0, [x])
    with pytest.raises(GradientError, match="not reachable"):
        differentiate(ops.sum(x), [x, y])
    g = differentiate(ops.sum(x), [x, y], allow_unused=True)
    np.testing.assert_array_equal(g[1].data, [0.0])


def test_detach_keeps_values_and_blocks_gradient():
    x = f64([0.5, -2.0])
    d = detach(x)
    assert np.array_equal(d.data, x.data) and not d.parents and not d.requires_grad
    (g,) = differentiate(ops.sum(x * detach(x * 3.0)), [x])
    np.testing.assert_allclose(g.data, 3.0 * x.data)


rng0 = np.random.default_rng(7)


def _rand(*shape, positive=False):
    x = rng0.standard_normal(shape)
    return np.abs(x) + 0.5 if positive else x


# name -> (function of graph values, list of input arrays)
UNARY_CASES = {
    "exp": (lambda a: ops.exp(a), [_rand(3, 4)]),
    "log": (lambda a: ops.log(a), [_rand(3, 4, positive=True)]),
    "sqrt": (lambda a: ops.sqrt(a), [_rand(3, 4, positive=True)]),
    "safe_sqrt": (lambda a: ops.safe_sqrt(a), [_rand(3, 4, positive=True)]),
    "sigmoid": (lambda a: ops.sigmoid(a), [_rand(3, 4)]),
    "relu": (lambda a: ops.relu(a), [_rand(3, 4)]),
    "leaky_relu": (lambda a: ops.leaky_relu(a), [_rand(3, 4)]),
    "scale": (lambda a: ops.scale(a, -1.7), [_rand(5)]),
    "sum_axis": (lambda a: ops.sum(a, axis=1, keepdims=True), [_rand(3, 4)]),
    "mean": (lambda a: ops.mean(a, axis=(0, 2)), [_rand(2, 3, 4)]),
    "var": (lambda a: ops.var(a, axis=1), [_rand(3, 5)]),
    "max": (lambda a: ops.max(a, axis=1), [_rand(4, 6)]),
    "reshape": (lambda a: ops.reshape(a, (2, -1)), [_rand(3, 4)]),
    "transpose": (lambda a: ops.transpose(a, (1, 0, 2)), [_rand(2, 3, 4)]),
    "broadcast_to": (lambda a: ops.broadcast_to(a, (3, 4)), [_rand(1, 4)]),
    "sum_to": (lambda a: ops.sum_to(a, (1, 4)), [_rand(3, 4)]),
    "avgpool2": (lambda a: ops.avgpool2(a), [_rand(2, 2, 4, 6)]),
    "upsample2": (lambda a: ops.upsample2(a), [_rand(2, 2, 2, 3)]),
    "maxpool2": (lambda a: ops.maxpool2(a), [_rand(2, 2, 4, 4)]),
    "pad_br": (lambda a: ops.pad_br(a, 1, 1), [_rand(1, 2, 3, 3)]),
    "crop": (lambda a: ops.crop(a, 2, 3), [_rand(1, 2, 4, 4)]),
    "flip_kernel": (lambda a: ops.flip_kernel(a), [_rand(2, 3, 3, 3)]),
}
BINARY_CASES = {
    "add": (ops.add, [_rand(3, 4), _rand(1, 4)]),
    "sub": (ops.sub, [_rand(3, 1), _rand(3, 4)]),
    "mul": (ops.mul, [_rand(3, 4), _rand(4)]),
    "div": (ops.div, [_rand(3, 4), _rand(3, 4, positive=True)]),
    "matmul": (ops.matmul, [_rand(3, 4), _rand(4, 2)]),
    "conv2d": (ops.conv2d, [_rand(2, 2, 5, 4), _rand(3, 2, 3, 3)]),
    "conv2d_wgrad": (ops.conv2d_wgrad, [_rand(2, 2, 4, 4), _rand(2, 3, 4, 4)]),
    "add_bias": (ops.add_bias, [_rand(2, 3, 2, 2), _rand(3)]),
}
CASES = {**UNARY_CASES, **BINARY_CASES}


def _weighted(fn, n_inputs, weights_seed=3):
    """Scalar test function sum(w * fn(inputs)) with fixed random weights."""
    cache = {}

    def build(*xs):
        out = fn(*xs)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(weights_seed).standard_normal(out.shape)
        return ops.sum(ops.mul(out, GraphValue(cache["w"])))

    return build


@pytest.mark.parametrize("name", sorted(CASES))
def test_first_order_matches_finite_differences(name):
    fn, inputs = CASES[name]
    build = _weighted(fn, len(inputs))
    leaves = [f64(x) for x in inputs]
    grads = differentiate(build(*leaves), leaves)
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [GraphValue(np.asarray(v, np.float64)) for v in inputs]
            args[i] = GraphValue(xi)
            return build(*args).item()
        assert rel_err(grads[i].data, fd_grad(f, x)) < 1e-5, name


def _second_order_check(build, x, tol=1e-3):
    """Double backprop of ||grad f||^2 against finite differences of the first gradient."""
    def half_sq_grad(xv: GraphValue, create_graph):
        (g,) = differentiate(build(xv), [xv], create_graph=create_graph)
        return g

    xv = f64(x)
    g = half_sq_grad(xv, True)
    (hv,) = differentiate(ops.sum(ops.mul(g, g)), [xv])

    def objective(xa):
        g = half_sq_grad(variable(xa, np.float64), False).data
        return float(np.sum(g * g))

    assert rel_err(hv.data, fd_grad(objective, x)) < tol


SECOND_ORDER = {
    "mlp_sigmoid": lambda x: ops.sum(ops.sigmoid(ops.matmul(ops.sigmoid(ops.matmul(x, GraphValue(_W1))),
                                                            GraphValue(_W2)))),
    "conv_relu_avg": lambda x: ops.sum(ops.mul(ops.avgpool2(ops.relu(ops.conv2d(x, GraphValue(_K)))),
                                               ops.avgpool2(ops.conv2d(x, GraphValue(_K))))),
    "conv_maxpool_exp": lambda x: ops.sum(ops.exp(ops.scale(ops.maxpool2(ops.conv2d(x, GraphValue(_K))), 0.3))),
    "norm": lambda x: ops.sum(ops.mul(ops.div(ops.sub(x, ops.mean(x, (2, 3), keepdims=True)),
                                               ops.sqrt(ops.add(ops.var(x, (2, 3), keepdims=True), 1e-5))),
                                      GraphValue(_NW))),
    "log_softmax": lambda x: ops.sum(ops.log(ops.sum(ops.exp(ops.sub(ops.reshape(x, (2, -1)),
                                                                     ops.max(ops.reshape(x, (2, -1)), 1))), 1))),
    "leaky_cosine": lambda x: ops.div(ops.sum(ops.mul(ops.leaky_relu(x), GraphValue(_NW))),
                                      ops.add(ops.safe_sqrt(ops.sum(ops.mul(x, x))), 1e-6)),
}
_W1 = _rand(8, 5)
_W2 = _rand(5, 3)
_K = _rand(2, 2, 3, 3)
_NW = _rand(2, 2, 4, 4)


@pytest.mark.parametrize("name", sorted(SECOND_ORDER))
def test_second_order_matches_finite_differences(name):
    shape = (4, 8) if name == "mlp_sigmoid" else (2, 2, 4, 4)
    x = np.random.default_rng(11).standard_normal(shape)
    _second_order_check(SECOND_ORDER[name], x)


def test_mlp_input_gradient_matches_fd():
    from dcgm.lossgrad import cross_entropy

    r = np.random.default_rng(5)
    W1, W2 = r.standard_normal((10, 12)) * 0.5, r.standard_normal((12, 4)) * 0.5
    labels = np.array([0, 3, 1])
    x0 = r.standard_normal((3, 10))

    def loss(x):
        h = ops.relu(ops.matmul(x, GraphValue(W1)))
        return cross_entropy(ops.matmul(h, GraphValue(W2)), labels)

    x = f64(x0)
    (g,) = differentiate(loss(x), [x])
    assert rel_err(g.data, fd_grad(lambda a: loss(GraphValue(a)).item(), x0)) < 1e-5


def test_maxpool_routing_frozen_for_second_order():
    x = f64([[[[1.0, 3.0], [2.0, 0.0]]]])
    y = ops.maxpool2(x)
    (g,) = differentiate(ops.sum(ops.mul(y, y)), [x], create_graph=True)
    np.testing.assert_array_equal(g.data[0, 0], [[0.0, 6.0], [0.0, 0.0]])
    (gg,) = differentiate(ops.sum(g), [x])
    np.testing.assert_array_equal(gg.data[0, 0], [[0.0, 2.0], [0.0, 0.0]])


def test_safe_sqrt_zero_has_zero_derivative():
    x = f64([0.0, 4.0])
    (g,) = differentiate(ops.sum(ops.safe_sqrt(x)), [x])
    np.testing.assert_array_equal(g.data, [0.0, 0.25])


# -- determinism and structure -----------------------------------------------------

def test_replay_is_bitwise_deterministic():
    r = np.random.default_rng(0)
    x = variable(r.standard_normal((2, 3, 6, 6)))
    w = variable(r.standard_normal((4, 3, 3, 3)))
    y = ops.sum(ops.maxpool2(ops.relu(ops.conv2d(x, w))))
    again = ops.sum(ops.maxpool2(ops.relu(ops.conv2d(GraphValue(x.data.copy()), GraphValue(w.data.copy())))))
    assert y.data.tobytes() == again.data.tobytes()
    assert replay(y).tobytes() == y.data.tobytes()
    shifted = replay(y, {id(x): x.data + 1.0})
    assert shifted.tobytes() != y.data.tobytes()


_OPS = st.sampled_from(["add", "mul", "sub", "sigmoid", "relu", "scale", "reuse"])


@given(st.lists(st.tuples(_OPS, st.integers(0, 100)), min_size=1, max_size=25))
def test_graph_stays_acyclic(program):
    r = np.random.default_rng(0)
    pool = [variable(r.standard_normal(3), np.float64)]
    for op, pick in program:
        a = pool[pick % len(pool)]
        b = pool[(pick * 7 + 1) % len(pool)]
        if op in ("add", "mul", "sub"):
            out = getattr(ops, op)(a, b)
        elif op == "scale":
            out = ops.scale(a, 0.5)
        elif op == "reuse":
            out = ops.add(a, a)
        else:
            out = getattr(ops, op)(a)
        pool.append(out)
    root = ops.sum(pool[-1])
    assert is_acyclic(root)
    (g,) = differentiate(root, [pool[0]], create_graph=True, allow_unused=True)
    assert is_acyclic(g)


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4))
def test_depth_counter_is_longest_path(n1, n2, n3):
    x = variable(np.ones(2))
    y = x
    for _ in range(n1):
        y = ops.scale(y, 2.0)
    z = x
    for _ in range(n2 + n3):
        z = ops.relu(z)
    out = ops.add(y, z)
    assert out.depth == 1 + max(n1, n2 + n3)
