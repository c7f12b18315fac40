import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modalshift import tensor as T
from modalshift.errors import ContractError, DegenerateInputError, DimensionError
from oracles import central_difference, log_softmax_sum_loss, max_relative_error

PRIMITIVE_TOL = 1e-6


def _check(build, *inputs, tol=PRIMITIVE_TOL):
    """Autodiff vs central differences for ``sum(build(*tensors) * weights)``."""
    leaves = [T.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*leaves)
    w = np.random.default_rng(0).normal(size=out.shape)
    T.backward((out * w).sum())
    for leaf, x in zip(leaves, inputs):
        def f():
            return float((build(*[T.Tensor(v) for v in inputs]).data * w).sum())

        num = central_difference(f, x)
        assert max_relative_error(leaf.grad, num) <= tol


def test_matmul_identity():
    out = T.matmul(T.Tensor([[1, 0], [0, 1]]), T.Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_hand_case():
    np.testing.assert_array_equal(T.matmul(T.Tensor([[1, 2]]), T.Tensor([[3], [4]])).data, [[11]])


def test_matmul_grad_fd(rng):
    _check(T.matmul, rng.normal(size=(4, 5)), rng.normal(size=(5, 3)))


def test_matmul_batched_grad_fd(rng):
    _check(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))
    _check(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))


def test_linear_grad_fd(rng):
    _check(T.linear, rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4)))


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_broadcast_grad_fd(rng, op):
    _check(lambda a, b: T.elementwise(op, a, b), rng.normal(size=(3, 4)), rng.normal(size=(4,)))
    _check(lambda a, b: T.elementwise(op, a, b), rng.normal(size=(2, 1, 4)), rng.normal(size=(3, 1)))


def test_binary_incompatible_shapes():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4,))))


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_silu_zero():
    assert T.silu(T.Tensor([0.0])).data[0] == 0.0


@pytest.mark.parametrize("name", ["silu", "softmax-lastdim", "rmsnorm-lastdim"])
def test_unary_grad_fd(rng, name):
    _check(lambda x: T.elementwise(name, x), rng.normal(size=(2, 8)))


def test_scale_grad_fd(rng):
    _check(lambda x: T.elementwise("scale", x, -2.5), rng.normal(size=(3, 2)))


def test_masked_softmax_grad_fd(rng):
    mask = np.tril(np.ones((4, 4), dtype=bool))
    _check(lambda x: T.softmax(x, mask=mask), rng.normal(size=(2, 4, 4)))
    p = T.softmax(T.Tensor(rng.normal(size=(4, 4))), mask=mask).data
    assert np.all(p[~mask] == 0.0)


def test_fully_masked_row_rejected():
    with pytest.raises(DegenerateInputError):
        T.softmax(T.Tensor(np.zeros((2, 2))), mask=np.array([[True, False], [False, False]]))


@pytest.mark.parametrize(
    "build,shape",
    [
        (lambda x: x.reshape(3, 4), (2, 6)),
        (lambda x: x.transpose(1, 0, 2), (2, 3, 4)),
        (lambda x: x[:, 1:3], (3, 5)),
        (lambda x: x.sum(axis=1), (3, 5)),
        (lambda x: x.mean(), (3, 5)),
    ],
)
def test_shape_ops_grad_fd(rng, build, shape):
    _check(build, rng.normal(size=shape))


def test_concat_grad_fd(rng):
    _check(lambda a, b: T.concat([a, b], axis=1), rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 1, 2)))


def test_embedding_grad_with_repeats(rng):
    ids = np.array([[0, 2, 2], [1, 0, 2]])
    _check(lambda w: T.embedding(w, ids), rng.normal(size=(4, 3)))


def test_cross_entropy_uniform_logits_is_log_v():
    V = 11
    loss = T.cross_entropy(T.Tensor(np.zeros((2, 3, V))), np.array([[0, 4, 10], [3, 3, 1]]))
    assert abs(loss.item() - np.log(V)) < 1e-14


def test_cross_entropy_confident_correct_tends_to_zero():
    logits = np.full((1, 2, 5), -50.0)
    logits[0, 0, 3] = 50.0
    logits[0, 1, 1] = 50.0
    assert T.cross_entropy(T.Tensor(logits), np.array([[3, 1]])).item() < 1e-40


def test_cross_entropy_matches_summation_oracle(rng):
    logits = rng.normal(size=(2, 3, 11)) * 3
    targets = rng.integers(0, 11, size=(2, 3))
    mask = np.array([[True, False, True], [True, True, False]])
    got = T.cross_entropy(T.Tensor(logits), targets, mask).item()
    assert abs(got - log_softmax_sum_loss(logits, targets, mask)) <= 1e-10


def test_cross_entropy_grad_fd(rng):
    targets = rng.integers(0, 7, size=(2, 3))
    mask = rng.random((2, 3)) < 0.7
    mask[0, 0] = True
    _check(lambda x: T.cross_entropy(x, targets, mask), rng.normal(size=(2, 3, 7)))


def test_cross_entropy_empty_mask():
    with pytest.raises(DegenerateInputError):
        T.cross_entropy(T.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


def test_backward_sum_gives_ones():
    w = T.Tensor(np.zeros((3, 2, 2)), requires_grad=True)
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, np.ones((3, 2, 2)))


def test_backward_hand_derivative():
    w = T.Tensor(np.array([1.0]), requires_grad=True)
    r = w * 1.0 - 0.0
    loss = T.scale((r * r).sum(), 0.5)
    loss.backward()
    assert w.grad[0] == 1.0


def test_backward_accumulates_on_repeat():
    w = T.Tensor(np.array([2.0, -1.0]), requires_grad=True)
    loss = (w * w).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2 * 2 * w.data)


def test_backward_rejects_non_scalar():
    w = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (w * 2.0).backward()


def test_shared_subexpression_gradient():
    # x used along two paths; both contributions must land
    x = T.Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    assert x.grad[0] == pytest.approx(2 * 3 + 3 * 9)


def test_no_grad_records_nothing():
    w = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        out = w * 2.0
    assert not out.requires_grad and out.is_leaf


def test_topological_order_is_acyclic_and_ordered(rng):
    a = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    loss = T.softmax(a @ b + a).sum()
    order = T.topological_order(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax(T.Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 16)), elements=st.floats(-10, 10)))
def test_rmsnorm_unit_rms(x):
    x = x + np.where(np.abs(x).max(axis=-1, keepdims=True) < 1e-3, 1.0, 0.0)
    y = T.rmsnorm(T.Tensor(x), eps=1e-12).data
    ms = (x * x).mean(axis=-1)
    np.testing.assert_allclose(np.sqrt((y * y).mean(axis=-1)), np.sqrt(ms / (ms + 1e-12)), rtol=0, atol=1e-12)


def test_determinism_bit_identical(rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    runs = []
    for _ in range(2):
        wt = T.Tensor(w.copy(), requires_grad=True)
        out = T.softmax(T.linear(T.Tensor(x), wt))
        T.cross_entropy(out, np.array([0, 1, 2])).backward()
        runs.append((out.data.tobytes(), wt.grad.tobytes()))
    assert runs[0] == runs[1]
