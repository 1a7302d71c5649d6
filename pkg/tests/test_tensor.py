import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvlab.errors import ShapeError
from mvlab import tensor as T
from mvlab.gradcheck import finite_difference_check
from mvlab.tensor import Tensor, backward, forward_primitive, no_grad, zero_grads


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestForwardPrimitive:
    def test_matmul_identity(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        out = forward_primitive("matmul", [a, t64(np.eye(2))])
        assert np.array_equal(out.data, a.data)

    def test_softmax_single_element(self):
        out = forward_primitive("softmax", [t64([3.7])], {"axis": -1})
        assert out.data.tolist() == [1.0]

    def test_concat_channel_axis_shape(self):
        a = t64(np.zeros((1, 2, 4, 4)))
        b = t64(np.zeros((1, 3, 4, 4)))
        out = forward_primitive("concat", [a, b], {"axis": 1})
        assert out.shape == (1, 5, 4, 4)

    def test_concat_shape_mismatch_names_dims(self):
        a = t64(np.zeros((1, 2, 4, 4)))
        b = t64(np.zeros((1, 3, 5, 4)))
        with pytest.raises(ShapeError, match="dim 2"):
            forward_primitive("concat", [a, b], {"axis": 1})

    def test_matmul_shape_mismatch_names_dims(self):
        with pytest.raises(ShapeError, match="3"):
            forward_primitive("matmul", [t64(np.zeros((2, 3))), t64(np.zeros((4, 2)))])

    def test_records_graph_only_when_needed(self):
        a = t64([1.0, 2.0])
        assert forward_primitive("relu", [a])._backward is None
        b = t64([1.0, 2.0], requires_grad=True)
        assert forward_primitive("relu", [b])._backward is not None

    def test_unknown_primitive(self):
        with pytest.raises(KeyError):
            forward_primitive("fma", [t64([1.0])])


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.arange(12).reshape(3, 4), requires_grad=True)
        backward(T.sum_(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_square_gives_2x(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.sum_(T.mul(x, x)))
        assert np.array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_three_op_chain_matches_finite_differences(self, rng):
        w = t64(rng.normal(size=(3, 3)))
        m = t64(rng.normal(size=(2, 3)))

        def f(t):
            return T.sum_(T.mul(T.softmax(T.matmul(t, w), axis=-1), m))

        x = t64(rng.normal(size=(2, 3)), requires_grad=True)
        assert finite_difference_check(f, x, h=1e-5) < 1e-6

    def test_non_scalar_root_raises(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            backward(T.mul(x, x))

    def test_fanout_accumulates_exactly(self):
        x = t64([5.0, -1.0], requires_grad=True)
        backward(T.sum_(T.add(x, x)))
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_diamond_graph_matches_hand_derivation(self):
        # y = x*x, z = x + y, loss = sum(z*y)
        # dloss/dx = y*(1+2x) + z*2x, elementwise
        val = np.array([1.5, -0.5, 2.0])
        x = t64(val, requires_grad=True)
        y = T.mul(x, x)
        z = T.add(x, y)
        backward(T.sum_(T.mul(z, y)))
        hand = val * val * (1 + 2 * val) + (val + val * val) * 2 * val
        assert np.allclose(x.grad, hand, rtol=0, atol=1e-12)

    def test_grads_accumulate_across_backward_calls(self):
        x = t64([2.0], requires_grad=True)
        backward(T.sum_(T.mul(x, x)))
        first = x.grad.copy()
        backward(T.sum_(T.mul(x, x)))
        assert np.array_equal(x.grad, 2 * first)
        zero_grads([x])
        assert x.grad is None

    def test_no_grad_suppresses_graph(self):
        x = t64([1.0], requires_grad=True)
        with no_grad():
            y = T.mul(x, x)
        assert y._backward is None and not y.requires_grad


class TestFiniteDifferenceCheck:
    def test_sum_is_exact(self, rng):
        # analytic and numeric are both exactly ones when the arithmetic
        # stays exact; random values only round at the 1e-12 level
        x0 = t64(np.zeros((3, 3)), requires_grad=True)
        assert finite_difference_check(T.sum_, x0) == 0.0
        x = t64(rng.normal(size=(3, 3)), requires_grad=True)
        assert finite_difference_check(T.sum_, x) < 1e-10

    def test_relu_sum_away_from_kinks(self, rng):
        vals = rng.normal(size=(4, 4))
        vals[np.abs(vals) < 1e-3] = 0.5  # keep clear of the kink
        x = t64(vals, requires_grad=True)
        assert finite_difference_check(lambda t: T.sum_(T.relu(t)), x) < 1e-6

    def test_softmax_matmul_small(self, rng):
        w = t64(rng.normal(size=(4, 2)))
        x = t64(rng.normal(size=(1, 4)), requires_grad=True)
        err = finite_difference_check(
            lambda t: T.sum_(T.mul(T.softmax(T.matmul(t, w), axis=-1), t64([[1.0, 2.0]]))), x)
        assert err < 1e-5

    def test_non_finite_value_raises(self):
        from mvlab.errors import NumericError

        x = t64([1.0], requires_grad=True)
        with pytest.raises(NumericError):
            finite_difference_check(lambda t: T.log(T.sub(t, t64([2.0]))), x)


PRIMITIVE_CASES = [
    ("add", lambda a, b: T.add(a, b), 2),
    ("sub", lambda a, b: T.sub(a, b), 2),
    ("mul", lambda a, b: T.mul(a, b), 2),
    ("div", lambda a, b: T.div(a, T.add(T.mul(b, b), t64(np.full(b.shape, 0.5)))), 2),
    ("matmul", lambda a, b: T.matmul(a, T.transpose(b, (1, 0))), 2),
    ("softmax", lambda a: T.softmax(a, axis=-1), 1),
    ("log_softmax", lambda a: T.log_softmax(a, axis=-1), 1),
    ("exp", lambda a: T.exp(a), 1),
    ("sqrt", lambda a: T.sqrt(T.add(T.mul(a, a), t64(np.full(a.shape, 0.3)))), 1),
    ("softplus", lambda a: T.softplus(a), 1),
    ("mean", lambda a: T.mean_(a, axis=0, keepdims=True), 1),
    ("variance", lambda a: T.variance(a, axis=1, keepdims=True), 1),
    ("transpose", lambda a: T.transpose(a, (1, 0)), 1),
    ("reshape", lambda a: T.reshape(a, (a.size,)), 1),
    ("broadcast", lambda a: T.broadcast_to(T.mean_(a, axis=0, keepdims=True), a.shape), 1),
    ("concat", lambda a, b: T.concat([a, b], axis=1), 2),
    ("index_select", lambda a: T.index_select(a, [1, 0, 1], axis=0), 1),
]


@pytest.mark.parametrize("name,fn,arity", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(name, fn, arity, rng):
    shape = (3, 4)
    other = t64(rng.normal(size=shape))
    m = None

    def scalarize(out):
        nonlocal m
        if m is None:
            m = t64(rng.normal(size=out.shape))
        return T.sum_(T.mul(out, m))

    x = t64(rng.normal(size=shape), requires_grad=True)
    f = (lambda t: scalarize(fn(t, other))) if arity == 2 else (lambda t: scalarize(fn(t)))
    assert finite_difference_check(f, x, h=1e-6) < 1e-5


def test_relu_gradient_is_zero_at_zero():
    x = t64([-1.0, 0.0, 2.0], requires_grad=True)
    backward(T.sum_(T.relu(x)))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_forward_is_deterministic(rng):
    a = rng.normal(size=(5, 5))
    b = rng.normal(size=(5, 5))
    r1 = T.matmul(t64(a), t64(b)).data
    r2 = T.matmul(t64(a), t64(b)).data
    assert np.array_equal(r1, r2)


def test_mixed_precision_rejected():
    a = Tensor(np.zeros(3, dtype=np.float32))
    b = Tensor(np.zeros(3, dtype=np.float64))
    with pytest.raises(TypeError, match="precision"):
        T.add(a, b)


class TestBroadcasting:
    @given(st.sampled_from([(3, 1), (1, 4), (3, 4), (1, 1), (4,)]))
    def test_add_broadcast_gradient_sums_correctly(self, shape):
        rng = np.random.default_rng(0)
        a = t64(rng.normal(size=(3, 4)), requires_grad=True)
        b = t64(rng.normal(size=shape), requires_grad=True)
        backward(T.sum_(T.add(a, b)))
        assert a.grad.shape == a.shape and np.array_equal(a.grad, np.ones((3, 4)))
        assert b.grad.shape == b.shape
        assert b.grad.sum() == 12.0  # every broadcast path contributes

    @given(st.integers(2, 5), st.integers(2, 5))
    def test_softmax_rows_sum_to_one(self, n, k):
        rng = np.random.default_rng(n * 10 + k)
        out = T.softmax(t64(rng.normal(size=(n, k)) * 5), axis=-1)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_reshape_is_view_when_contiguous(self):
        x = t64(np.arange(6.0))
        y = T.reshape(x, (2, 3))
        assert y.data.base is x.data or y.data.base is x.data.base
