import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promuse import tensor as T
from promuse.gradcheck import check_gradients, relative_error
from promuse.tensor import ShapeError, Tensor

TOL = 1e-6


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def scalarize(t, rng_seed=0):
    # fixed random projection so every output element matters
    w = Tensor(np.random.default_rng(rng_seed).normal(size=t.shape))
    return T.sum(T.mul(t, w))


OPS = {
    "add": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 3, 4)), lambda: scalarize(T.add(a, b))),
    "sub": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 3, 4)), lambda: scalarize(T.sub(a, b))),
    "mul": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 3, 4)), lambda: scalarize(T.mul(a, b))),
    "scale": lambda r: ((a := leaf(r, 5)), None, lambda: scalarize(T.scale(a, -2.5))),
    "add_const": lambda r: ((a := leaf(r, 2, 3)), None, lambda: scalarize(T.add_const(a, 1.5))),
    "matmul": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 4, 5)), lambda: scalarize(T.matmul(a, b))),
    "matmul_vec": lambda r: ((a := leaf(r, 4)), (b := leaf(r, 4, 3)), lambda: scalarize(T.matmul(a, b))),
    "matmul_batched": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 2, 4, 2)),
                                 lambda: scalarize(T.matmul(a, b))),
    "linear": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 4, 5)),
                         lambda: scalarize(T.linear(a, b, Tensor(np.arange(5.0))))),
    "reshape": lambda r: ((a := leaf(r, 2, 6)), None, lambda: scalarize(T.reshape(a, (3, 4)))),
    "transpose": lambda r: ((a := leaf(r, 2, 3, 4)), None, lambda: scalarize(T.transpose(a, (2, 0, 1)))),
    "expand": lambda r: ((a := leaf(r, 3, 4)), None, lambda: scalarize(T.expand(a, (2, 3, 4)))),
    "concat": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 2)), lambda: scalarize(T.concat([a, b], 1))),
    "getitem": lambda r: ((a := leaf(r, 4, 5)), None, lambda: scalarize(T.getitem(a, (slice(1, 3), 2)))),
    "embedding": lambda r: ((a := leaf(r, 6, 3)), None, lambda: scalarize(T.embedding(a, np.array([[0, 2], [2, 5]])))),
    "relu": lambda r: ((a := Tensor(r.normal(size=(4, 3)) + 0.05, requires_grad=True)), None,
                       lambda: scalarize(T.relu(a))),
    "gelu": lambda r: ((a := leaf(r, 4, 3)), None, lambda: scalarize(T.gelu(a))),
    "tanh": lambda r: ((a := leaf(r, 4, 3)), None, lambda: scalarize(T.tanh(a))),
    "sigmoid": lambda r: ((a := leaf(r, 4, 3)), None, lambda: scalarize(T.sigmoid(a))),
    "exp": lambda r: ((a := leaf(r, 4, 3)), None, lambda: scalarize(T.exp(a))),
    "log": lambda r: ((a := Tensor(r.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)), None,
                      lambda: scalarize(T.log(a))),
    "sum_axis": lambda r: ((a := leaf(r, 3, 4)), None, lambda: scalarize(T.sum(a, axis=1))),
    "mean": lambda r: ((a := leaf(r, 3, 4)), None, lambda: T.mean(T.mul(a, a))),
    "layer_norm": lambda r: ((a := leaf(r, 3, 6)), (b := leaf(r, 6)),
                             lambda: scalarize(T.layer_norm(a, b, Tensor(np.ones(6))))),
    "softmax": lambda r: ((a := leaf(r, 3, 4)), None, lambda: scalarize(T.softmax(a, axis=1))),
    "softmax_axis0": lambda r: ((a := leaf(r, 3, 4)), None, lambda: scalarize(T.softmax(a, axis=0))),
    "masked_softmax": lambda r: ((a := leaf(r, 2, 2, 3, 4)), None,
                                 lambda: scalarize(T.masked_softmax(a, np.array([[0, 0, -1e30, 0], [0.5, 0, 0, 0]]), 0.7))),
    "add_key_bias": lambda r: ((a := leaf(r, 2, 1, 3, 4)), None,
                               lambda: scalarize(T.add_key_bias(a, np.ones((2, 4))))),
    "log_softmax": lambda r: ((a := leaf(r, 3, 4)), None, lambda: scalarize(T.log_softmax(a, axis=1))),
    "cross_entropy": lambda r: ((a := leaf(r, 5, 3)), None, lambda: T.cross_entropy(a, np.array([0, 2, 1, 1, 0]))),
    "cross_entropy_1d": lambda r: ((a := leaf(r, 3)), None, lambda: T.cross_entropy(a, 2)),
    "mse": lambda r: ((a := leaf(r, 6)), None, lambda: T.mse(a, np.arange(6.0))),
    # a fresh generator per call keeps the dropout mask fixed across evaluations
    "dropout": lambda r: ((a := leaf(r, 4, 5)), None,
                          lambda: scalarize(T.dropout(a, 0.3, np.random.default_rng(7), training=True))),
    "stack_scalars": lambda r: ((a := leaf(r, 2)), None,
                                lambda: scalarize(T.stack_scalars([T.sum(a), T.mean(a)]))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_on_random_instances(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        a, b, f = OPS[name](rng)
        inputs = [x for x in (a, b) if x is not None]
        assert check_gradients(f, inputs) < 1e-6, name


def test_dropout_gradient_uses_same_mask():
    rng = np.random.default_rng(0)
    a = leaf(rng, 10, 10)
    out = T.dropout(a, 0.3, np.random.default_rng(1), training=True)
    T.backward(T.sum(out))
    kept = out.data != 0
    assert np.allclose(a.grad[kept], 1 / 0.7)
    assert np.all(a.grad[~kept] == 0)
    assert T.dropout(a, 0.3, rng, training=False) is a


def test_shape_errors_are_typed():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError) as e:
        T.add(a, b)
    assert e.value.op == "add"
    with pytest.raises(ShapeError):
        T.matmul(a, a)
    with pytest.raises(ShapeError):
        T.expand(a, (4, 3, 2))
    with pytest.raises(ShapeError):
        T.backward(T.mul(a, a))  # non-scalar loss


def test_no_graph_without_grad_and_under_no_grad():
    a = Tensor(np.ones(3))
    assert T.add(a, a).node is None
    b = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        assert T.mul(b, b).node is None
    assert T.mul(b, b).node is not None


def test_cross_entropy_of_uniform_logits_is_ln2():
    assert abs(T.cross_entropy(Tensor([0.0, 0.0]), 1).item() - math.log(2)) < 1e-12
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor([0.0, 0.0]), 2)


def test_softmax_stable_for_huge_logits():
    p = T.softmax(Tensor([[1000.0, 0.0, -1000.0]])).data
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-12
    with pytest.raises(FloatingPointError):
        T.softmax(Tensor([[np.nan, 0.0]]))


def test_gradient_accumulates_over_shared_leaf():
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    T.backward(T.sum(T.add(T.mul(a, a), a)))
    assert np.allclose(a.grad, 2 * a.data + 1)


def test_relative_error_floor_handles_zero_gradients():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(rows, cols, shift):
    x = np.random.default_rng(rows * 7 + cols).normal(size=(rows, cols)) * 5
    p = T.softmax(Tensor(x)).data
    q = T.softmax(Tensor(x + shift)).data
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(p, q, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.floats(0.1, 10.0))
def test_layer_norm_output_standardized(d, scale):
    x = np.random.default_rng(d).normal(size=(3, d)) * scale
    y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=0.0).data
    assert np.allclose(y.mean(axis=1), 0, atol=1e-10)
    assert np.allclose(y.std(axis=1), 1, atol=1e-8)
