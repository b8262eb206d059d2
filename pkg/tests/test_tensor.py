import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitsink import tensor as T
from vitsink.errors import ArgumentError, DimensionError, NumericError
from vitsink.tensor import Tape, Tensor, grad_check


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, np.float64)).dtype == np.float64


def test_item_requires_single_element():
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(DimensionError):
        Tensor([1.0, 2.0]).item()


@pytest.mark.parametrize("name,fn,shape", [
    ("add", lambda x, c: T.sum_all(T.mul(T.add(x, c), c)), (3, 4)),
    ("mul", lambda x, c: T.sum_all(T.mul(T.mul(x, x), c)), (3, 4)),
    ("gelu", lambda x, c: T.sum_all(T.mul(T.gelu(x), c)), (3, 4)),
    ("softplus", lambda x, c: T.sum_all(T.mul(T.softplus(x), c)), (3, 4)),
    ("softmax", lambda x, c: T.sum_all(T.mul(T.softmax(x), c)), (3, 4)),
    ("transpose", lambda x, c: T.sum_all(T.mul(T.transpose(x), T.transpose(c))), (3, 4)),
    ("reshape", lambda x, c: T.sum_all(T.mul(T.reshape(x, (4, 3)), T.reshape(c, (4, 3)))), (3, 4)),
    ("take", lambda x, c: T.sum_all(T.mul(T.take(x, [2, 0, 2, 1], 1), T.take(c, [0, 1, 2, 3], 1))), (3, 4)),
    ("concat", lambda x, c: T.sum_all(T.mul(T.concat([x, x], 0), T.concat([c, c * 2.0], 0))), (3, 4)),
])
def test_elementwise_and_layout_grads(name, fn, shape):
    rng = np.random.default_rng(0)
    x = f64(rng.normal(size=shape))
    c = f64(rng.normal(size=shape))
    assert grad_check(lambda t: fn(t, c), x) < 1e-6, name


def test_rmsnorm_grads_both_inputs():
    rng = np.random.default_rng(1)
    x = f64(rng.normal(size=(2, 3, 5)))
    g = f64(rng.uniform(0.5, 2, 5))
    c = f64(rng.normal(size=(2, 3, 5)))
    assert grad_check(lambda t: T.sum_all(T.mul(T.rmsnorm(t, g), c)), x) < 1e-6
    assert grad_check(lambda t: T.sum_all(T.mul(T.rmsnorm(x, t), c)), g) < 1e-6


def test_matmul_broadcast_grads():
    rng = np.random.default_rng(2)
    a = f64(rng.normal(size=(2, 3, 4)))
    b = f64(rng.normal(size=(4, 5)))
    assert grad_check(lambda t: T.sum_all(T.gelu(T.matmul(t, b))), a) < 1e-6
    assert grad_check(lambda t: T.sum_all(T.gelu(T.matmul(a, t))), b) < 1e-6


def test_embedding_and_cross_entropy_grads():
    rng = np.random.default_rng(3)
    table = f64(rng.normal(size=(7, 4)))
    ids = np.array([[1, 3, 3], [0, 6, 1]])
    w = f64(rng.normal(size=(4, 7)))
    targets = np.array([[2, 2, 5], [1, 0, 3]])
    mask = np.array([[True, False, True], [True, True, False]])

    def f(t):
        return T.cross_entropy(T.matmul(T.embedding(t, ids), w), targets, mask)

    assert grad_check(f, table) < 1e-6


def test_composite_graph_under_tolerance():
    from vitsink.gradcheck import composite_probe

    assert composite_probe(seed=5) <= 1e-4


def test_grad_check_step_bounds():
    x = f64([1.0])
    with pytest.raises(ArgumentError):
        grad_check(lambda t: T.sum_all(t), x, h=1e-7)
    with pytest.raises(ArgumentError):
        grad_check(lambda t: T.sum_all(t), x, h=0.1)


def test_grad_check_restores_input():
    x = f64([[0.3, -1.2], [2.0, 0.5]])
    before = x.data.copy()
    grad_check(lambda t: T.sum_all(T.gelu(t)), x)
    assert np.array_equal(x.data, before)
    assert x.grad is None


def test_tape_only_tracks_trainable():
    w = Tensor(np.ones((2, 2)))
    frozen = Tensor(np.full((2, 2), 3.0))
    with Tape([w]) as tape:
        loss = T.sum_all(T.matmul(w, frozen))
    tape.backward(loss)
    assert w.grad is not None and np.all(w.grad == 6.0)
    assert frozen.grad is None


def test_unreached_trainable_gets_zero_grad():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0])
    with Tape([a, b]) as tape:
        loss = T.sum_all(T.mul(a, a))
    tape.backward(loss)
    assert np.array_equal(b.grad, np.zeros(1, np.float32))


def test_no_tape_records_nothing():
    x = Tensor([1.0])
    y = T.add(x, x)
    assert y.tape_id is None


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0])
    with Tape([x]) as tape:
        y = T.mul(x, x)
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_check_finite_raises():
    x = Tensor([1e30], dtype=np.float32)
    with Tape([x], check_finite=True), np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            T.mul(x, Tensor([1e30], dtype=np.float32))


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.rmsnorm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.ones((2, 0))))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 64)))
    assert T.cross_entropy(logits, [3, 9]).item() == pytest.approx(math.log(64), abs=1e-6)


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5)).astype(np.float64)
    t = np.array([4, 0, 2])
    got = T.cross_entropy(Tensor(x, dtype=np.float64), t).item()
    ref = np.mean([-(x[i, t[i]] - math.log(sum(math.exp(v) for v in x[i]))) for i in range(3)])
    assert got == pytest.approx(ref, abs=1e-9)


def test_cross_entropy_empty_mask():
    with pytest.raises(ArgumentError):
        T.cross_entropy(Tensor(np.zeros((2, 4))), [0, 1], [False, False])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 10, size=(rows, cols))
    y = T.softmax(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_rmsnorm_unit_rms(d, seed):
    x = np.random.default_rng(seed).normal(0, 5, size=(3, d))
    y = T.rmsnorm(Tensor(x, dtype=np.float64), Tensor(np.ones(d), dtype=np.float64), eps=0.0).data
    assert np.allclose(np.sqrt((y ** 2).mean(-1)), 1.0, atol=1e-9)


def test_rmsnorm_zero_row_is_finite():
    y = T.rmsnorm(Tensor(np.zeros((1, 4))), Tensor(np.ones(4)), eps=0.0).data
    assert np.all(y == 0)
