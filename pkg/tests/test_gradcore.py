import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointpst import gradcore as gc
from conftest import check_grad, rel_err


def test_matmul_identity_and_hand_case():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(gc.matmul(gc.Tensor(np.eye(3)), gc.Tensor(a)).data, a)
    out = gc.matmul(gc.Tensor([[1.0, 2.0], [3.0, 4.0]]), gc.Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(gc.ShapeError):
        gc.matmul(gc.Tensor(np.ones((2, 3))), gc.Tensor(np.ones((2, 3))))


def test_matmul_gradients_both_sides(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    w = rng.standard_normal((4, 3))
    check_grad(lambda t: gc.mul(gc.matmul(t, gc.Tensor(b)), gc.Tensor(w)), a)
    check_grad(lambda t: gc.mul(gc.matmul(gc.Tensor(a), t), gc.Tensor(w)), b)


def test_relu_values():
    assert np.array_equal(gc.relu(gc.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_log_exp_inverse():
    x = np.linspace(-10, 10, 201)
    assert np.max(np.abs(gc.log(gc.exp(gc.Tensor(x))).data - x)) < 1e-12


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_log_domain(bad):
    with pytest.raises(gc.DomainError):
        gc.log(gc.Tensor([1.0, bad]))


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_adjoints(rng, op):
    fn = getattr(gc, op)
    x, y = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    check_grad(lambda t: gc.mul(fn(t, gc.Tensor(y)), gc.Tensor(y)), x)
    check_grad(lambda t: gc.mul(fn(gc.Tensor(x), t), gc.Tensor(x)), y)


def test_trailing_broadcast_bias(rng):
    x, b = rng.standard_normal((5, 3)), rng.standard_normal(3)
    w = rng.standard_normal((5, 3))
    check_grad(lambda t: gc.mul(gc.add(gc.Tensor(x), t), gc.Tensor(w)), b)
    with pytest.raises(gc.ShapeError):
        gc.add(gc.Tensor(x), gc.Tensor(np.ones(5)))


@pytest.mark.parametrize("name", ["relu", "exp", "log"])
def test_unary_adjoints(rng, name):
    x = rng.uniform(0.2, 2.0, (4, 3)) * rng.choice([-1, 1], (4, 3))
    if name == "log":
        x = np.abs(x)
    w = rng.standard_normal((4, 3))
    check_grad(lambda t: gc.mul(getattr(gc, name)(t), gc.Tensor(w)), x)


def test_scale_adjoint(rng):
    check_grad(lambda t: gc.mul(gc.scale(t, -2.5), t), rng.standard_normal(6))


def test_max_over_points_values():
    out = gc.max_over_points(gc.Tensor([[1.0, 5.0], [3.0, 2.0]]))
    assert np.array_equal(out.data, [3.0, 5.0])
    row = np.array([[4.0, -1.0, 7.0]])
    assert np.array_equal(gc.max_over_points(gc.Tensor(row)).data, row[0])


def test_max_over_points_empty():
    with pytest.raises(gc.EmptyInputError):
        gc.max_over_points(gc.Tensor(np.zeros((0, 3))))


def test_max_over_points_gradient_sparsity(rng):
    x = rng.standard_normal((20, 6))
    t = gc.Tensor(x, requires_grad=True)
    with gc.Tape() as tape:
        tape.backward(gc.sum(gc.max_over_points(t)))
    assert np.count_nonzero(t.grad) == 6
    assert np.array_equal(np.argmax(t.grad, axis=0), np.argmax(x, axis=0))


def test_max_ties_route_to_lowest_row():
    t = gc.Tensor(np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 2.0]]), requires_grad=True)
    with gc.Tape() as tape:
        tape.backward(gc.sum(gc.max_over_points(t)))
    assert np.array_equal(t.grad, [[1, 1], [0, 0], [0, 0]])


def test_segment_max_matches_per_segment(rng):
    x = rng.standard_normal((13, 4))
    offsets = np.array([0, 3, 4, 13])
    out = gc.segment_max(gc.Tensor(x), offsets).data
    for i in range(3):
        assert np.array_equal(out[i], x[offsets[i]:offsets[i + 1]].max(axis=0))


def test_softmax_examples():
    assert np.allclose(gc.softmax_logits(gc.Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    big = gc.softmax_logits(gc.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300


def test_softmax_gradient(rng):
    w = rng.standard_normal(5)
    check_grad(lambda t: gc.mul(gc.softmax_logits(t), gc.Tensor(w)), rng.standard_normal(5))


def test_log_softmax_gradient(rng):
    w = rng.standard_normal((3, 4))
    check_grad(lambda t: gc.mul(gc.log_softmax(t), gc.Tensor(w)), rng.standard_normal((3, 4)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(z):
    p = gc.softmax_logits(gc.Tensor(z)).data
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p > 0)


def test_softmax_rejects_nonfinite():
    with pytest.raises(gc.DomainError):
        gc.softmax_logits(gc.Tensor([np.inf, 0.0]))


def test_accumulation_shared_subgraph():
    x = gc.Tensor(3.0, requires_grad=True)
    with gc.Tape() as tape:
        tape.backward(gc.add(x, x))
    assert x.grad == 2.0
    with gc.Tape() as tape:
        y = gc.mul(x, x)
        tape.backward(gc.add(y, y))
    assert x.grad == 2.0 + 12.0


def test_tape_cleared_after_backward():
    x = gc.Tensor([1.0, 2.0], requires_grad=True)
    with gc.Tape() as tape:
        tape.backward(gc.sum(gc.mul(x, x)))
        assert tape.nodes == []


def test_no_recording_without_tape():
    x = gc.Tensor([1.0], requires_grad=True)
    assert gc.exp(x)._node is None
    assert not gc.is_recording()


def test_nonscalar_backward_needs_seed():
    x = gc.Tensor([1.0, 2.0], requires_grad=True)
    with gc.Tape() as tape:
        with pytest.raises(gc.ShapeError):
            tape.backward(gc.exp(x))


def test_tapes_are_thread_local():
    seen = {}

    def worker():
        seen["inner"] = gc.is_recording()

    with gc.Tape():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert gc.is_recording()
    assert seen["inner"] is False


def test_cholesky_identity_and_diagonal():
    inv, logdet = gc.cholesky_inverse_logdet(np.eye(4))
    assert np.array_equal(inv, np.eye(4)) and logdet == 0.0
    inv, logdet = gc.cholesky_inverse_logdet(np.diag([2.0, 3.0]))
    assert np.allclose(inv, np.diag([0.5, 1 / 3]), atol=1e-15)
    assert logdet == pytest.approx(np.log(6.0), abs=1e-14)


def test_cholesky_residual_random_spd(rng):
    for _ in range(20):
        a = rng.standard_normal((8, 8))
        s = a @ a.T + 0.5 * np.eye(8)
        inv, logdet = gc.cholesky_inverse_logdet(s)
        assert np.max(np.abs(s @ inv - np.eye(8))) < 1e-8
        assert logdet == pytest.approx(np.linalg.slogdet(s)[1], abs=1e-9)


def test_cholesky_rejects_indefinite():
    with pytest.raises(gc.NotPositiveDefiniteError):
        gc.cholesky_inverse_logdet(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(np.linalg.LinAlgError):
        gc.cholesky_inverse_logdet(np.zeros((3, 3)))


def test_spd_inverse_and_logdet_gradients(rng):
    a = rng.standard_normal((4, 4))
    s = a @ a.T + np.eye(4)
    w = rng.standard_normal((4, 4))

    # cholesky reads one triangle only, so differentiate through a symmetric parametrisation
    def sym(t):
        return gc.scale(gc.add(t, gc.transpose(t)), 0.5)

    check_grad(lambda t: gc.mul(gc.spd_inverse(sym(t)), gc.Tensor(w)), s)
    check_grad(lambda t: gc.spd_logdet(sym(t)), s)


def test_reductions_and_trace(rng):
    x = rng.standard_normal((4, 4))
    check_grad(lambda t: gc.mul(gc.mean(t, axis=0), gc.Tensor(np.arange(4.0))), x)
    check_grad(gc.trace, x)
    check_grad(lambda t: gc.mul(gc.transpose(t), gc.Tensor(x)), x)
    check_grad(lambda t: gc.mul(gc.row_max(t), gc.Tensor(np.arange(4.0))), x)


def test_sgd_hand_cases():
    p = gc.Tensor(1.0, requires_grad=True)
    p.grad = np.asarray(2.0)
    gc.sgd_step([p], 0.5)
    assert p.data == 0.0 and p.grad is None
    q = gc.Tensor([1.0, 2.0], requires_grad=True)
    q.grad = np.array([5.0, 5.0])
    gc.sgd_step([q], 0.0)
    assert np.array_equal(q.data, [1.0, 2.0])


def test_sgd_missing_gradient():
    with pytest.raises(gc.GradientContractError):
        gc.sgd_step([gc.Tensor([1.0], requires_grad=True)], 0.1)


def test_sgd_decreases_smooth_loss(rng):
    a, target = rng.standard_normal((6, 3)), rng.standard_normal(6)
    w = gc.Tensor(np.zeros(3), requires_grad=True)

    def loss():
        r = gc.sub(gc.matmul(gc.Tensor(a), gc.reshape(w, (3, 1))), gc.Tensor(target[:, None]))
        return gc.sum(gc.mul(r, r))

    before = loss().item()
    with gc.Tape() as tape:
        tape.backward(loss())
    gc.sgd_step([w], 1e-3)
    assert loss().item() < before


def test_random_compositions_match_finite_differences():
    for seed in range(20):
        r = np.random.default_rng(seed)
        m, k, n = r.integers(1, 5, 3)
        x, w, b = r.standard_normal((m, k)), r.standard_normal((k, n)), r.standard_normal(n)
        y = r.integers(0, n, m)

        def build(t, w=w, b=b, y=y, m=m):
            z = gc.add(gc.matmul(gc.relu(t), gc.Tensor(w)), gc.Tensor(b))
            return gc.take(gc.log_softmax(z), np.arange(m), y)

        check_grad(build, x)
