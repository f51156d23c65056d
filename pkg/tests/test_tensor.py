import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmam import tensor as tn
from cmam.tensor import Tape, Tensor, backward, concat, gradcheck, matmul, softmax_rows, tsum

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def probe_weights(rng, shape):
    # magnitudes bounded away from 0 keep central-difference roundoff small relative to each coordinate
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def test_matmul_identity_and_projector():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), m).data, m.data)
    out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [0.0]])


def test_matmul_shape_mismatch_names_extents():
    with pytest.raises(ValueError, match=r"3 != 2"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_backward_matches_central_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), name="a")
    b = Tensor(rng.normal(size=(4, 2)), name="b")
    w = rng.normal(size=(3, 2))
    assert gradcheck(lambda: tsum(matmul(a, b) * w), [a, b]) <= 1e-6


def test_unary_values():
    assert tn.sigmoid(Tensor(0.0)).item() == 0.5
    assert tn.oneplus(Tensor(0.0)).item() == pytest.approx(1 + math.log(2), abs=1e-12)
    assert tn.oneplus(Tensor(-30.0)).item() >= 1.0


def test_log_domain_error():
    with pytest.raises(ValueError, match="non-positive"):
        tn.log(Tensor([1.0, 0.0]))


def test_unknown_unary():
    with pytest.raises(ValueError, match="unknown unary"):
        tn.map_unary(Tensor(1.0), "gelu")


@pytest.mark.parametrize("f", sorted(tn.UNARY))
def test_unary_gradients_at_20_points(f):
    rng = np.random.default_rng(sorted(tn.UNARY).index(f))
    if f in ("log", "sqrt"):
        x = rng.uniform(0.2, 3.0, 20)
    elif f == "relu":
        x = np.sign(rng.normal(size=20)) * rng.uniform(0.1, 2.0, 20)
    else:
        x = rng.uniform(-3.0, 3.0, 20)
    t = Tensor(x, name="x")
    w = probe_weights(rng, 20)
    assert gradcheck(lambda: tsum(tn.map_unary(t, f) * w), [t]) <= 1e-6


def test_softmax_examples():
    assert np.allclose(softmax_rows(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    sat = softmax_rows(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(sat))
    assert np.allclose(sat, [1.0, 0.0, 0.0], atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=finite))
def test_softmax_rows_on_simplex(x):
    y = softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(-1), 1.0, atol=1e-12)


def test_concat_examples():
    a = Tensor([1.0, 2.0])
    assert concat([a], axis=0) is a
    assert np.array_equal(concat([a, Tensor([3.0])], 0).data, [1.0, 2.0, 3.0])
    p, q = Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.zeros((2, 1)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(concat([p, q], axis=1))
    backward(loss, tape)
    assert np.array_equal(p.grad, np.ones((2, 3))) and np.array_equal(q.grad, np.ones((2, 1)))


def test_concat_extent_mismatch():
    with pytest.raises(ValueError, match="extent mismatch"):
        concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_backward_sum_and_quadratic():
    x = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    backward(loss, tape)
    assert np.array_equal(x.grad, np.ones(3))
    with Tape() as tape:
        loss = tsum(x * x) * 0.5
    backward(loss, tape)
    assert np.array_equal(x.grad, x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)


def test_unreachable_parameter_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    backward(loss, tape, [x, unused])
    assert np.array_equal(unused.grad, np.zeros((2, 2)))


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = tn.sigmoid(x) * x + x
        tsum(y)
    seen = set()
    for node in tape.nodes:
        for p in node.parents:
            assert p._node is None or id(p._node) in seen
        seen.add(id(node))


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert y._node is None and not y.requires_grad


def test_gradcheck_constant_function_is_exact():
    x = Tensor(np.ones(4), name="x")
    assert gradcheck(lambda: tsum(x * 0.0) + 3.0, [x]) == 0.0


def test_gradcheck_sigmoid_sum():
    x = Tensor(np.random.default_rng(3).normal(size=6), name="x")
    assert gradcheck(lambda: tsum(tn.sigmoid(x)), [x], step=1e-5) <= 1e-7


def test_cosine_zero_rows_are_finite():
    M = Tensor(np.zeros((3, 4)), requires_grad=True)
    k = Tensor(np.ones((1, 4)), requires_grad=True)
    with Tape() as tape:
        s = tn.cosine_similarity(k, M)
        loss = tsum(s)
    assert np.array_equal(s.data, np.zeros((1, 3)))
    backward(loss, tape)
    assert np.all(np.isfinite(M.grad)) and np.all(np.isfinite(k.grad))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(softmax_rows(tn.tanh(a @ b)) * rng.normal(size=(4, 3)))
        backward(loss, tape)
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_broadcast_gradients_reduce_to_input_shape():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x + b)
    backward(loss, tape)
    assert b.grad.shape == (3,) and np.array_equal(b.grad, [2.0, 2.0, 2.0])
