import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from medtune import tensor as tc
from medtune.tensor import Tape, Tensor

from conftest import check_op_grad


def test_matmul_identity_and_zero():
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(tc.matmul(Tensor(np.eye(2)), b).data, b.data)
    z = tc.matmul(Tensor(np.zeros((2, 2))), Tensor(np.arange(6.0).reshape(2, 3)))
    np.testing.assert_array_equal(z.data, np.zeros((2, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.usefixtures("f64")
def test_matmul_gradient_fd():
    check_op_grad(tc.matmul, (3, 4), (4, 2))


@pytest.mark.usefixtures("f64")
@pytest.mark.parametrize(
    "build,shapes",
    [
        (tc.add, [(3, 4), (3, 4)]),
        (tc.add, [(3, 4), (4,)]),
        (tc.sub, [(3, 4), (3, 4)]),
        (tc.mul, [(3, 4), (3, 4)]),
        (lambda a: tc.scale(a, -1.7), [(2, 5)]),
        (tc.silu, [(3, 4)]),
        (tc.softmax_rows, [(3, 5)]),
        (lambda a: tc.softmax_rows(a, causal=True), [(4, 4)]),
        (tc.rms_norm, [(3, 6), (6,)]),
        (tc.transpose, [(2, 5)]),
        (lambda a: a[1:3, 2:5], [(4, 6)]),
        (lambda a, b: tc.concat([a, b], axis=0), [(2, 3), (4, 3)]),
        (lambda a, b: tc.concat([a, b], axis=1), [(2, 3), (2, 1)]),
        (tc.sum_all, [(3, 3)]),
    ],
)
def test_op_gradients_fd(build, shapes):
    check_op_grad(build, *shapes)


@pytest.mark.usefixtures("f64")
def test_rotary_gradient_fd():
    rng = np.random.default_rng(3)
    ang = rng.normal(size=(5, 4))
    cos, sin = np.cos(ang), np.sin(ang)
    check_op_grad(lambda x: tc.rotary(x, cos, sin), (5, 4))


@pytest.mark.usefixtures("f64")
def test_embedding_gradient_fd():
    ids = np.array([2, 0, 2, 1])
    check_op_grad(lambda t: tc.embedding(t, ids), (3, 4))


@pytest.mark.usefixtures("f64")
def test_cross_entropy_gradient_fd():
    targets = np.array([1, 3, 0, 2])
    mask = np.array([1, 0, 1, 1])
    check_op_grad(lambda x: tc.cross_entropy_masked(x, targets, mask), (4, 5))


def test_cross_entropy_uniform_is_log_v():
    loss = tc.cross_entropy_masked(Tensor(np.zeros((1, 4))), [2], [1])
    assert loss.item() == pytest.approx(np.log(4), abs=1e-6)
    assert loss.item() == pytest.approx(1.3863, abs=1e-4)


@pytest.mark.usefixtures("f64")
def test_cross_entropy_mask_drops_position():
    logits = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 0.0], [-1.0, 3.0, 1.0]])
    targets = [0, 2, 1]

    def nll(row, t):
        return -(logits[row, t] - np.log(np.exp(logits[row]).sum()))

    by_hand = [nll(0, 0), nll(1, 2), nll(2, 1)]
    full = tc.cross_entropy_masked(Tensor(logits), targets, [1, 1, 1]).item()
    partial = tc.cross_entropy_masked(Tensor(logits), targets, [1, 0, 1]).item()
    assert full == pytest.approx(np.mean(by_hand), rel=1e-12)
    assert partial == pytest.approx((by_hand[0] + by_hand[2]) / 2, rel=1e-12)


def test_cross_entropy_masked_target_independence():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(5, 7)).astype(np.float32), requires_grad=True)
    mask = np.array([0, 1, 1, 0, 1])
    t1 = np.array([3, 1, 4, 1, 5])
    t2 = t1.copy()
    t2[[0, 3]] = [6, 0]
    a = tc.cross_entropy_masked(logits, t1, mask)
    tc.backward(a)
    g1 = logits.grad.copy()
    logits.zero_grad()
    b = tc.cross_entropy_masked(logits, t2, mask)
    tc.backward(b)
    assert a.data.tobytes() == b.data.tobytes()
    assert g1.tobytes() == logits.grad.tobytes()
    assert not logits.grad[[0, 3]].any()


def test_cross_entropy_empty_support():
    with pytest.raises(tc.EmptyLossSupportError, match="empty loss support"):
        tc.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 1], [0, 0])


def test_backward_sum_and_product():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tc.backward(tc.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    a = Tensor(3.0, requires_grad=True)
    b = Tensor(-2.0, requires_grad=True)
    tc.backward(tc.mul(a, b))
    assert a.grad == -2.0 and b.grad == 3.0


def test_backward_accumulates_and_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = tc.sum_all(tc.mul(x, x))
    tc.backward(loss)
    tc.backward(loss)
    np.testing.assert_array_equal(x.grad, 4 * np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        tc.backward(tc.mul(x, x))


def test_untouched_tensor_gets_no_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    tc.sum_all(y)  # separate graph
    tc.backward(tc.sum_all(tc.mul(x, x)))
    assert y.grad is None


def test_tape_is_topological_and_unique():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    h = tc.mul(x, x)
    loss = tc.sum_all(tc.add(h, tc.matmul(h, x)))
    tape = Tape.build(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is loss


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = tc.softmax_rows(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    q = tc.softmax_rows(Tensor(np.zeros((4, 4)), dtype=np.float64), causal=True).data
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(np.triu(q, 1) == 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(1, 16))
def test_rms_norm_constant_row_identity(c, width):
    gain = np.linspace(0.5, 2.0, width)
    out = tc.rms_norm(Tensor(np.full((2, width), c), dtype=np.float64), Tensor(gain, dtype=np.float64), eps=1e-5).data
    np.testing.assert_allclose(out, np.tile(gain * c / np.sqrt(c * c + 1e-5), (2, 1)), rtol=1e-12)


def test_no_broadcasting_beyond_row_bias():
    with pytest.raises(tc.ShapeError):
        tc.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))
    with pytest.raises(tc.ShapeError):
        tc.mul(Tensor(np.ones((3, 4))), Tensor(np.ones((4,))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with tc.no_grad():
        y = tc.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_default_dtype_switch():
    assert Tensor([1.0]).data.dtype == np.float32
    with tc.default_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert tc.get_dtype() is np.float32
