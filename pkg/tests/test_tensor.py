"""Engine-level tests: tape mechanics, gradients, finite-difference oracle."""

import numpy as np
import pytest

from carunet.errors import NumericError, ShapeError, TapeError
from carunet.layers import sigmoid
from carunet.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    enable_nan_checks,
    grad_check,
    mean_all,
    mul,
    record,
    scale,
    sub,
    sum_all,
)


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def test_tensor_shape_data_invariant():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.data.size == 2 * 3 * 4
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0, 3)))


def test_add_forward_and_grad():
    a, b = t64([1.0, 2.0]), t64([3.0, 4.0])
    with Tape() as tape:
        out = add(a, b)
        loss = sum_all(out)
    assert np.array_equal(out.data, [4.0, 6.0])
    backward(tape, loss)
    assert np.array_equal(a.grad, [1.0, 1.0])
    assert np.array_equal(b.grad, [1.0, 1.0])


def test_mul_square_grad():
    x = t64([3.0])
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    assert np.array_equal(loss.data, 9.0)
    backward(tape, loss)
    assert np.array_equal(x.grad, [6.0])


def test_chain_sigmoid_of_square_matches_finite_differences():
    err = grad_check(lambda x: sum_all(sigmoid(mul(x, x))), [t64([0.5])], epsilon=1e-3)
    assert err < 1e-4


def test_add_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        add(t64([1.0, 2.0]), t64([1.0, 2.0, 3.0]))


def test_sum_loss_gives_all_ones_grad():
    w = t64(np.random.default_rng(0).normal(size=(3, 4, 2)))
    with Tape() as tape:
        loss = sum_all(w)
    backward(tape, loss)
    assert np.array_equal(w.grad, np.ones((3, 4, 2)))


def test_zero_times_weight_gives_zero_grad():
    w = t64(np.random.default_rng(1).normal(size=(5,)))
    with Tape() as tape:
        loss = sum_all(scale(w, 0.0))
    backward(tape, loss)
    assert np.array_equal(w.grad, np.zeros(5))


def test_non_scalar_loss_rejected():
    w = t64([1.0, 2.0])
    with Tape() as tape:
        out = mul(w, w)
    with pytest.raises(ShapeError):
        backward(tape, out)


def test_double_backward_rejected():
    w = t64([1.0, 2.0])
    with Tape() as tape:
        loss = sum_all(w)
    backward(tape, loss)
    with pytest.raises(TapeError):
        backward(tape, loss)


def test_requires_grad_false_never_receives_gradient():
    const = t64([2.0, 2.0], requires_grad=False)
    x = t64([1.0, 3.0])
    with Tape() as tape:
        loss = sum_all(mul(x, const))
    backward(tape, loss)
    assert const.grad is None
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_unreachable_tensor_has_absent_gradient():
    x, orphan = t64([1.0]), t64([5.0])
    with Tape() as tape:
        loss = sum_all(mul(x, x))
        _ = sum_all(orphan)  # recorded but not feeding loss
    backward(tape, loss)
    assert orphan.grad is None


def test_fanout_accumulates_against_hand_expansion():
    # f(x) = sum(x*x + 3*x): one input feeds two consumers, df/dx = 2x + 3
    rng = np.random.default_rng(7)
    x = t64(rng.normal(size=(4,)))
    with Tape() as tape:
        loss = sum_all(add(mul(x, x), scale(x, 3.0)))
    backward(tape, loss)
    assert np.allclose(x.grad, 2.0 * x.data + 3.0, rtol=0, atol=1e-12)


def test_tape_append_order_is_forward_order():
    x = t64([1.0])
    with Tape() as tape:
        y = mul(x, x)
        z = add(y, y)
        _ = sum_all(z)
    ops = [n.op for n in tape.nodes]
    assert ops == ["leaf", "mul", "add", "sum"]


def test_cross_tape_intermediate_rejected():
    x = t64([1.0])
    with Tape():
        y = mul(x, x)
    with Tape():
        with pytest.raises(TapeError):
            add(y, y)


def test_parameter_reusable_across_tapes():
    x = t64([2.0])
    for _ in range(2):
        x.grad = None
        with Tape() as tape:
            loss = sum_all(mul(x, x))
        backward(tape, loss)
        assert np.array_equal(x.grad, [4.0])


@pytest.mark.parametrize("seed", range(20))
def test_random_three_op_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)

    def fn(a, b):
        return mean_all(sigmoid(add(mul(a, b), sub(a, b))))

    a = t64(rng.normal(size=(3, 2)))
    b = t64(rng.normal(size=(3, 2)))
    assert grad_check(fn, [a, b], epsilon=1e-3) < 1e-4


def test_grad_check_identity_is_exact():
    x = t64(np.random.default_rng(3).normal(size=(6,)))
    assert grad_check(lambda t: sum_all(t), [x], epsilon=1e-3) < 1e-10


def test_grad_check_rejects_non_finite_fn():
    def exploding(t):
        out = sum_all(t)
        out.data = np.asarray(np.inf)
        return out

    x = t64([1.0])
    enable_nan_checks(False)
    try:
        with pytest.raises(NumericError):
            grad_check(exploding, [x])
    finally:
        enable_nan_checks(True)


def test_grad_check_rejects_float32():
    x = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda t: sum_all(t), [x])


def test_forward_bit_identical_across_runs():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
    a = sigmoid(mul(x, x)).data
    b = sigmoid(mul(x, x)).data
    assert a.tobytes() == b.tobytes()


def test_nan_check_reports_offending_op():
    enable_nan_checks(True)
    big = t64([1e308])
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="mul"):
        mul(big, big)  # overflows to inf


def test_record_custom_op_roundtrip():
    x = t64([1.0, -2.0, 3.0])

    def fwd(xa):
        return xa * 2.0, lambda g: (g * 2.0,)

    with Tape() as tape:
        out = record("double", (x,), fwd)
        loss = sum_all(out)
    assert np.array_equal(out.data, [2.0, -4.0, 6.0])
    backward(tape, loss)
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])


def test_gradient_map_keyed_by_node_id():
    x = t64([1.0, 2.0])
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    grads = backward(tape, loss)
    assert np.array_equal(grads[x.node_id], [2.0, 4.0])
