import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from orthotask import autodiff as ad

from gradcheck import assert_close_fd, check_double_backward, check_gradient

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=finite)


# -- forward examples ------------------------------------------------------


def test_matmul_shape():
    out = ad.forward_primitive("matmul", [ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((3, 4)))])
    assert out.shape == (2, 4)


def test_relu_values():
    out = ad.forward_primitive("relu", [ad.tensor([-1.0, 0.0, 2.0])])
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_against_scalar_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[17.0], [39.0]])
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    loop = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                loop[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(a, b).data, loop, rtol=0, atol=1e-12)


def test_all_primitives_are_tagged():
    expected = {
        "add", "mul", "matmul", "reshape", "slice", "concat", "sum", "mean", "relu",
        "exp", "log", "sqrt", "divide", "negate", "transpose", "broadcast",
    }
    assert expected <= set(ad.PRIMITIVES)
    x = ad.tensor(np.ones((2, 2)), requires_grad=True)
    assert ad.forward_primitive("exp", [x]).op == "exp"


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.forward_primitive("conv9", [])


# -- errors ----------------------------------------------------------------


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(np.ones(2), np.ones(3))
    with pytest.raises(ad.ShapeError, match="reshape"):
        ad.reshape(np.ones(6), (4,))
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([np.ones((2, 2)), np.ones((3, 3))], axis=0)
    with pytest.raises(ad.ShapeError, match="broadcast"):
        ad.broadcast_to(np.ones(3), (2, 2))


def test_domain_errors():
    with pytest.raises(ad.DomainError, match="log"):
        ad.log(np.array([1.0, -1.0]))
    with pytest.raises(ad.DomainError, match="log"):
        ad.log(np.array([0.0]))
    with pytest.raises(ad.DomainError, match="sqrt"):
        ad.sqrt(np.array([-0.5]))
    with pytest.raises(ad.DomainError, match="division by zero"):
        ad.divide(1.0, np.array([0.0]))


def test_backward_rejects_nonscalar_root():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.GradientError, match="scalar"):
        ad.backward(x * 2.0, [x])


def test_backward_rejects_unreachable():
    x = ad.tensor([1.0, 2.0], requires_grad=True, name="x")
    y = ad.tensor([3.0], requires_grad=True, name="y")
    with pytest.raises(ad.GradientError, match="does not depend on y"):
        ad.backward(ad.sum_(x * x), [x, y])


def test_backward_rejects_constant_wrt():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    c = ad.constant([1.0, 1.0])
    with pytest.raises(ad.GradientError, match="does not require grad"):
        ad.backward(ad.sum_(x * c), [c])


# -- backward examples -----------------------------------------------------


def test_square_gradient():
    x = ad.tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = ad.backward(ad.sum_(x * x), [x])
    np.testing.assert_array_equal(g.data, [2.0, 4.0, 6.0])
    assert not g.requires_grad


def test_second_derivative_of_square():
    x = ad.tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = ad.backward(ad.sum_(x * x), [x], create_graph=True)
    assert g.requires_grad
    (h,) = ad.backward(ad.sum_(g), [x])
    np.testing.assert_array_equal(h.data, [2.0, 2.0, 2.0])


def test_third_order():
    x = ad.tensor([0.5, -1.0], requires_grad=True)
    f = ad.sum_(ad.exp(x * 2.0))
    (g1,) = ad.backward(f, [x], create_graph=True)
    (g2,) = ad.backward(ad.sum_(g1), [x], create_graph=True)
    (g3,) = ad.backward(ad.sum_(g2), [x])
    np.testing.assert_allclose(g3.data, 8.0 * np.exp(2.0 * x.data), rtol=1e-12)


def test_gradient_of_shared_subexpression_accumulates():
    x = ad.tensor([2.0], requires_grad=True)
    y = x * x
    (g,) = ad.backward(ad.sum_(y * y + y), [x])
    np.testing.assert_allclose(g.data, [4 * 8.0 + 4.0])


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    shapes = [(4, 6), (6,), (6, 5), (5,), (5, 1)]
    weights = [rng.normal(size=s) for s in shapes]
    target = rng.normal(size=(5, 1))

    def loss(ws):
        w1, b1, w2, b2, w3 = ws
        h = ad.relu(ad.matmul(ad._lift(x), w1) + b1)
        h = ad.relu(ad.matmul(h, w2) + b2)
        d = ad.matmul(h, w3) - target
        return ad.mean(d * d)

    leaves = [ad.tensor(w, requires_grad=True) for w in weights]
    grads = ad.backward(loss(leaves), leaves)
    for k in range(len(weights)):
        def f(v, k=k):
            ws = [ad.tensor(w) for w in weights]
            ws[k] = ad.tensor(v)
            return float(loss(ws).data)

        assert_close_fd(grads[k].data, ad.finite_difference_gradient(f, weights[k]))


# -- finite differences ------------------------------------------------------


def test_finite_difference_examples():
    g = ad.finite_difference_gradient(lambda v: float(np.sum(v * v)), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-6
    np.testing.assert_array_equal(ad.finite_difference_gradient(lambda v: 4.0, np.ones(3)), np.zeros(3))
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(lambda v: 0.0, np.ones(2), h=0.0)


def test_finite_difference_softmax_cross_entropy():
    logits = np.array([0.3, -1.2, 2.0, 0.1])

    def ce(z):
        z = ad._lift(z)
        lse = ad.log(ad.sum_(ad.exp(z - float(np.max(z.data)))))
        return lse - (z[2] - float(np.max(z.data)))

    x = ad.tensor(logits, requires_grad=True)
    (g,) = ad.backward(ce(x), [x])
    fd = ad.finite_difference_gradient(lambda v: float(ce(v).data), logits)
    np.testing.assert_allclose(g.data, fd, rtol=1e-4, atol=1e-9)


# -- per-primitive gradient and double-backward checks ---------------------

rng0 = np.random.default_rng(42)
A23 = rng0.normal(size=(2, 3))
B3 = rng0.normal(size=(3,))
C34 = rng0.normal(size=(3, 4))
POS = rng0.uniform(0.5, 2.0, size=(2, 3))
IMG = rng0.normal(size=(2, 2, 5, 6))

UNARY = {
    "negate": (ad.negate, A23),
    "exp": (ad.exp, A23),
    "log": (ad.log, POS),
    "sqrt": (ad.sqrt, POS),
    "relu": (ad.relu, A23 + 0.05 * np.sign(A23)),
    "reshape": (lambda a: ad.reshape(a, (3, 2)), A23),
    "transpose": (lambda a: ad.transpose(a), A23),
    "transpose_axes": (lambda a: ad.transpose(a, (2, 0, 3, 1)), IMG),
    "broadcast": (lambda a: ad.broadcast_to(a, (4, 2, 3)), A23),
    "sum_all": (ad.sum_, A23),
    "sum_axis": (lambda a: ad.sum_(a, axis=1, keepdims=True), A23),
    "mean_axis": (lambda a: ad.mean(a, axis=0), A23),
    "slice": (lambda a: a[:, 1:], A23),
    "fancy_slice": (lambda a: a[np.array([0, 1, 1]), np.array([2, 0, 2])], A23),
    "clamp": (lambda a: ad.clamp(a, -0.5, 0.5), np.array([-1.0, -0.2, 0.3, 0.9])),
    "im2col": (lambda a: ad.im2col(a, 3, 2, 2), IMG),
    "col2im": (lambda a: ad.col2im(a, (2, 2, 5, 6), 3, 2, 2), rng0.normal(size=(2 * 2 * 3, 2 * 3 * 2))),
    "softplus_like": (lambda a: ad.log(ad.exp(a) + 1.0), A23),
}

BINARY = {
    "add_broadcast": (ad.add, A23, B3),
    "mul_broadcast": (ad.mul, A23, B3),
    "divide": (ad.divide, A23, POS),
    "divide_broadcast": (ad.divide, A23, POS[0]),
    "matmul": (ad.matmul, A23, C34),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), A23, A23[:1] * 2.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradient(name):
    fn, x = UNARY[name]
    check_gradient(fn, x)


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradient(name):
    fn, a, b = BINARY[name]
    check_gradient(fn, a, b)


# primitives along the penalty path: their adjoints must themselves differentiate
DOUBLE = {
    "exp": (lambda a: ad.exp(a), A23),
    "log": (lambda a: ad.log(a), POS),
    "sqrt": (lambda a: ad.sqrt(a), POS),
    "square_sum": (lambda a: ad.sum_(a * a, axis=1), A23),
    "relu_times": (lambda a: ad.relu(a) * a, A23 + 0.05 * np.sign(A23)),
    "mean_square": (lambda a: ad.mean(a * a, axis=0, keepdims=True), A23),
    "slice_square": (lambda a: a[:, :2] * a[:, 1:], A23),
    "broadcast_square": (lambda a: ad.broadcast_to(a, (2, 2, 3)) * a, A23),
    "reshape_transpose": (lambda a: ad.transpose(ad.reshape(a * a, (3, 2))), A23),
    "im2col_square": (lambda a: ad.im2col(a * a, 3, 3, 2), IMG),
    "col2im_square": (lambda a: ad.col2im(a * a, (2, 2, 5, 6), 3, 2, 2), rng0.normal(size=(12, 12))),
    "clamp_square": (lambda a: ad.clamp(a * a, hi=0.5), np.array([0.1, 0.6, -0.3, 0.9])),
}
DOUBLE_BINARY = {
    "matmul": (ad.matmul, A23, C34),
    "divide": (ad.divide, A23, POS),
    "mul_broadcast": (ad.mul, A23, B3),
    "add_square": (lambda a, b: (a + b) * (a + b), A23, B3),
    "concat_mul": (lambda a, b: ad.concat([a * b, b * b], axis=1), A23[:, :1], A23[:, 1:2]),
    "normalize": (lambda a, b: a / ad.sqrt(ad.sum_(a * a) + ad.sum_(b * b)), A23, B3),
}


@pytest.mark.parametrize("name", sorted(DOUBLE))
def test_unary_double_backward(name):
    fn, x = DOUBLE[name]
    check_double_backward(fn, x)


@pytest.mark.parametrize("name", sorted(DOUBLE_BINARY))
def test_binary_double_backward(name):
    fn, a, b = DOUBLE_BINARY[name]
    check_double_backward(fn, a, b)


def test_im2col_col2im_are_adjoint():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 7, 6))
    cols = ad.im2col(x, 3, 2, 2)
    y = rng.normal(size=cols.shape)
    lhs = float(np.sum(cols.data * y))
    rhs = float(np.sum(x * ad.col2im(y, x.shape, 3, 2, 2).data))
    assert abs(lhs - rhs) < 1e-10


# -- properties ----------------------------------------------------------


@given(arrays((3, 4)), arrays((4,)), st.floats(-2, 2), st.floats(-2, 2))
def test_linearity_of_backward(x, w, a, b):
    def f(t):
        return ad.sum_(ad.exp(t * 0.3) * w)

    def g(t):
        return ad.sum_(t * t)

    t = ad.tensor(x, requires_grad=True)
    (combined,) = ad.backward(f(t) * a + g(t) * b, [t])
    (gf,) = ad.backward(f(t), [t])
    (gg,) = ad.backward(g(t), [t])
    np.testing.assert_allclose(combined.data, a * gf.data + b * gg.data, rtol=0, atol=1e-10)


@given(arrays((2, 3)), arrays((3,)))
def test_broadcast_add_gradient_sums_over_broadcast_axes(a, b):
    ta, tb = ad.tensor(a, requires_grad=True), ad.tensor(b, requires_grad=True)
    ga, gb = ad.backward(ad.sum_((ta + tb) * 2.0), [ta, tb])
    np.testing.assert_array_equal(ga.data, np.full((2, 3), 2.0))
    np.testing.assert_array_equal(gb.data, np.full(3, 4.0))


@given(arrays((3, 3)))
def test_outputs_finite_on_finite_inputs(x):
    t = ad.tensor(x, requires_grad=True)
    out = ad.sum_(ad.exp(ad.relu(t)) / (ad.sqrt(t * t + 1.0)))
    (g,) = ad.backward(out, [t])
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(g.data))


def _mlp_grads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 5))
    w = ad.tensor(rng.normal(size=(5, 3)), requires_grad=True)
    out = ad.sum_(ad.relu(ad.matmul(ad._lift(x), w)))
    (g,) = ad.backward(out * out, [w], create_graph=True)
    (h,) = ad.backward(ad.sum_(g * g), [w])
    return g.data.copy(), h.data.copy()


def test_determinism_bit_identical():
    g1, h1 = _mlp_grads(9)
    g2, h2 = _mlp_grads(9)
    assert g1.tobytes() == g2.tobytes() and h1.tobytes() == h2.tobytes()


def test_graph_records_in_topological_order():
    with ad.Graph() as graph:
        x = ad.tensor(np.ones(3), requires_grad=True)
        y = ad.sum_(ad.exp(x) * x)
        ad.backward(y, [x], create_graph=True)
    position = {n.id: i for i, n in enumerate(graph.nodes)}
    assert len(graph.nodes) > 3
    for node in graph.nodes:
        for parent in node.parents:
            if parent.id in position:
                assert position[parent.id] < position[node.id]
        assert node.data.size == int(np.prod(node.shape))


def test_no_grad_builds_constants():
    x = ad.tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_independent_graphs_in_threads():
    results = {}

    def work(k):
        with ad.Graph() as g:
            x = ad.tensor(np.arange(3.0) + k, requires_grad=True)
            (gx,) = ad.backward(ad.sum_(x * x * x), [x])
        results[k] = (gx.data, len(g.nodes))

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_allclose(results[k][0], 3 * (np.arange(3.0) + k) ** 2)
    assert len({n for _, n in results.values()}) == 1


def test_graph_release_keeps_values_and_cuts_edges():
    x = ad.tensor([0.5, -1.0], requires_grad=True)
    with ad.Graph() as graph:
        y = ad.sum_(ad.exp(x) * x)
    value = float(y.data)
    assert len(graph) > 0
    graph.release()
    assert len(graph) == 0 and float(y.data) == value
    assert y.parents == () and y._vjp is None
    with pytest.raises(ad.GradientError):
        ad.backward(y, [x])
