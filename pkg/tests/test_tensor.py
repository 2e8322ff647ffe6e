import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mnmt import tensor as T
from mnmt.tensor import DomainError, NumericError, ShapeError, Tensor, VocabError

from conftest import numeric_grad, rel_err


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for kk in range(k):
                s += a[i, kk] * b[kk, j]
            out[i, j] = s
    return out


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    assert np.array_equal((eye @ eye).data, np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ eye).data, [[1, 2], [3, 4]])


def test_matmul_matches_triple_loop_exactly(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.array_equal(T.raw_matmul(a, b), triple_loop(a, b))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_matmul_fixed_order_property(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
    assert np.array_equal(T.raw_matmul(a, b), triple_loop(a, b))


def test_matmul_rows_independent_of_batch(rng):
    # a row's result must not depend on which other rows share the call
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    full = T.raw_matmul(a, b)
    for i in range(7):
        assert np.array_equal(T.raw_matmul(a[i : i + 1], b)[0], full[i])


def test_matmul_batched_broadcast(rng):
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 5, 2))
    out = T.raw_matmul(a, b)
    for i in range(2):
        for j in range(3):
            assert np.array_equal(out[i, j], triple_loop(a[i, j], b[j]))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradients(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    (a @ b).backward(g)
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


# -- softmax -------------------------------------------------------------------


def test_softmax_examples():
    assert np.array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.array_equal(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    assert np.allclose(T.softmax(Tensor([math.log(1), math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_all_neg_inf_is_domain_error():
    with pytest.raises(DomainError):
        T.softmax(Tensor([-np.inf, -np.inf]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=st.floats(-700, 700)))
def test_softmax_sums_to_one(x):
    s = T.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)


# -- backward ------------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_backward_non_scalar_is_contract_error(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with pytest.raises(DomainError):
        (x * 2.0).backward()


def test_shared_subgraph_visited_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    z = y + y  # y reached along two edges
    z.backward()
    assert x.grad == 8.0


def _check_op(fn, *shapes, rng, positive=False):
    arrays_ = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays_ = [np.abs(a) + 0.5 for a in arrays_]
    weights = None

    def loss_value():
        out = fn(*[Tensor(a) for a in arrays_])
        return float((out.data * weights).sum())

    ts = [Tensor(a, requires_grad=True) for a in arrays_]
    out = fn(*ts)
    weights = rng.normal(size=out.shape)
    (out * Tensor(weights)).sum().backward()
    for t, a in zip(ts, arrays_):
        num = numeric_grad(loss_value, a)
        assert rel_err(t.grad, num) < 1e-3 or np.max(np.abs(t.grad - num)) < 1e-7


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "relu": (lambda a: T.relu(a), [(3, 5)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    "log_softmax": (lambda a: T.log_softmax(a, axis=-1), [(3, 5)]),
    "mean": (lambda a: T.mean(a, axis=1), [(3, 5)]),
    "reshape": (lambda a: T.reshape(a, (5, 3)), [(3, 5)]),
    "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "index_last": (lambda a: T.index_last(a, axis=1), [(2, 4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    fn, shapes = OPS[name]
    _check_op(fn, *shapes, rng=rng)


def test_div_gradient(rng):
    _check_op(lambda a, b: a / b, (3, 3), (3, 3), rng=rng, positive=True)


def test_layer_norm_gradient(rng):
    _check_op(lambda x, g, b: T.layer_norm(x, g, b), (2, 3, 6), (6,), (6,), rng=rng)


def test_embedding_gradient_accumulates_repeats(rng):
    w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    out = T.embedding(w, [[1, 1, 4]])
    out.sum().backward()
    expected = np.zeros((5, 3))
    expected[1] = 2
    expected[4] = 1
    assert np.array_equal(w.grad, expected)


def test_embedding_rejects_out_of_range():
    with pytest.raises(VocabError):
        T.embedding(Tensor(np.zeros((3, 2))), [0, 3])


def test_cross_entropy_gradient_and_ignore(rng):
    logits = rng.normal(size=(2, 4, 6))
    targets = np.array([[1, 2, 0, 5], [0, 0, 3, 4]])

    def value():
        return float(T.cross_entropy(Tensor(logits), targets, ignore_index=0).data)

    t = Tensor(logits, requires_grad=True)
    T.cross_entropy(t, targets, ignore_index=0).backward()
    assert rel_err(t.grad, numeric_grad(value, logits)) < 1e-3
    # ignored positions get no gradient
    assert np.all(t.grad[targets == 0] == 0)


def test_cross_entropy_value():
    # uniform logits over 4 classes: loss ln 4
    loss = T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
    assert abs(float(loss.data) - math.log(4)) < 1e-15


# -- dropout -------------------------------------------------------------------


def test_dropout_zero_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert T.dropout(x, 0.0) is x


def test_dropout_mask_reproducible(rng):
    x = Tensor(np.ones((50, 50)))
    a = T.dropout(x, 0.3, T.dropout_rng(7, 2, 11)).data
    b = T.dropout(x, 0.3, T.dropout_rng(7, 2, 11)).data
    c = T.dropout(x, 0.3, T.dropout_rng(7, 2, 12)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert abs(np.mean(a == 0) - 0.3) < 0.03
    assert np.allclose(a[a != 0], 1 / 0.7)


def test_dropout_bad_probability():
    with pytest.raises(DomainError):
        T.dropout(Tensor([1.0]), 1.0, T.dropout_rng(0, 0, 0))


# -- debug checks and no_grad ----------------------------------------------------


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_debug_flag_reports_offending_op():
    T.set_debug(True)
    try:
        with pytest.raises(NumericError, match="div"):
            Tensor([1.0]) / Tensor([0.0])
    finally:
        T.set_debug(False)


def test_no_grad_builds_no_graph(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
