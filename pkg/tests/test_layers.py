"""Layer tests: naive-loop oracles (bit-for-bit in float64) plus grad checks."""

import numpy as np
import pytest

from carunet.errors import ShapeError
from carunet.layers import (
    BatchNormState,
    Conv2dParams,
    DropBlockConfig,
    batchnorm2d,
    concat_channels,
    conv1d_shared,
    conv2d,
    conv_transpose2d,
    dropblock,
    maxpool2d_2x2,
    pointwise_activation,
    relu,
    sigmoid,
)
from carunet.tensor import Tape, Tensor, backward, grad_check, mean_all, mul, sum_all

from oracles import conv1d_naive, conv2d_naive, conv_transpose2d_naive, maxpool2x2_naive


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def conv_params(w, b, stride=1, padding=0):
    return Conv2dParams(weight=t64(w), bias=t64(b), stride=stride, padding=padding)


def spaced_random(rng, shape, gap=0.05):
    """Values with pairwise gaps well above 2*epsilon so max/relu kinks stay away."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) * gap + rng.uniform(0, gap / 10)).astype(np.float64)
    return (vals - vals.mean()).reshape(shape)


# conv2d


def test_conv2d_ones_kernel_counts_neighbors():
    x = t64(np.ones((1, 1, 3, 3)))
    p = conv_params(np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)
    out = conv2d(x, p).data[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4


def test_conv2d_identity_1x1():
    rng = np.random.default_rng(0)
    x = t64(rng.normal(size=(2, 1, 4, 5)))
    p = conv_params(np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(conv2d(x, p).data, x.data)


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_matches_naive_loop_bitwise(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(t64(x), conv_params(w, b, padding=1)).data
    assert out.tobytes() == conv2d_naive(x, w, b, padding=1).tobytes()


def test_conv2d_stride2_matches_naive_loop_bitwise():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 2, 7, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(t64(x), conv_params(w, b, stride=2)).data
    assert out.tobytes() == conv2d_naive(x, w, b, stride=2).tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_float32_fast_path_matches_reference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.3
    b = rng.normal(size=4)
    ref = conv2d(t64(x), conv_params(w, b, padding=1)).data
    p32 = Conv2dParams(
        weight=Tensor(w.astype(np.float32), requires_grad=True),
        bias=Tensor(b.astype(np.float32), requires_grad=True),
        padding=1,
    )
    fast = conv2d(Tensor(x.astype(np.float32)), p32).data
    assert fast.dtype == np.float32
    np.testing.assert_allclose(fast, ref.astype(np.float32), rtol=2e-5, atol=2e-5)


def test_conv2d_channel_mismatch_error():
    x = t64(np.zeros((1, 2, 4, 4)))
    p = conv_params(np.zeros((1, 3, 3, 3)), np.zeros(1), padding=1)
    with pytest.raises(ShapeError, match="channels"):
        conv2d(x, p)


def test_conv2d_nonintegral_output_error():
    x = t64(np.zeros((1, 1, 5, 5)))
    p = conv_params(np.zeros((1, 1, 2, 2)), np.zeros(1), stride=2)
    with pytest.raises(ShapeError, match="not integral"):
        conv2d(x, p)


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(2, 2, 4, 4)))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    b = t64(rng.normal(size=3))

    def fn(xi, wi, bi):
        return mean_all(conv2d(xi, Conv2dParams(weight=wi, bias=bi, padding=1)))

    assert grad_check(fn, [x, w, b], epsilon=1e-3) < 1e-4


# conv_transpose2d


def test_conv_transpose_broadcasts_single_pixel():
    x = t64(np.full((1, 1, 1, 1), 3.5))
    p = conv_params(np.ones((1, 1, 2, 2)), np.zeros(1), stride=2)
    assert np.array_equal(conv_transpose2d(x, p).data, np.full((1, 1, 2, 2), 3.5))


def test_conv_transpose_input_grad_is_forward_conv_of_upstream():
    # adjoint identity: the input gradient of the scatter op equals a
    # forward conv2d of the upstream gradient with the transposed kernel
    rng = np.random.default_rng(4)
    x = t64(rng.normal(size=(1, 2, 3, 3)))
    w = rng.normal(size=(3, 2, 2, 2))
    p = conv_params(w, np.zeros(3), stride=2)
    with Tape() as tape:
        loss = sum_all(conv_transpose2d(x, p))
    backward(tape, loss)
    expected = conv2d_naive(np.ones((1, 3, 6, 6)), w.transpose(1, 0, 2, 3), np.zeros(2), stride=2)
    assert np.allclose(x.grad, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conv_transpose_matches_scatter_add_oracle_bitwise(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 3, 4))
    w = rng.normal(size=(2, 3, 2, 2))
    b = rng.normal(size=2)
    out = conv_transpose2d(t64(x), conv_params(w, b, stride=2)).data
    assert out.tobytes() == conv_transpose2d_naive(x, w, b).tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_conv_transpose_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(1, 2, 3, 3)))
    w = t64(rng.normal(size=(2, 2, 2, 2)))
    b = t64(rng.normal(size=2))

    def fn(xi, wi, bi):
        return mean_all(conv_transpose2d(xi, Conv2dParams(weight=wi, bias=bi, stride=2)))

    assert grad_check(fn, [x, w, b], epsilon=1e-3) < 1e-4


def test_conv_transpose_channel_mismatch_error():
    x = t64(np.zeros((1, 3, 4, 4)))
    p = conv_params(np.zeros((2, 2, 2, 2)), np.zeros(2), stride=2)
    with pytest.raises(ShapeError, match="channels"):
        conv_transpose2d(x, p)


def test_conv_transpose_rejects_other_geometry():
    x = t64(np.zeros((1, 1, 4, 4)))
    p = conv_params(np.zeros((1, 1, 3, 3)), np.zeros(1), stride=2)
    with pytest.raises(ShapeError):
        conv_transpose2d(x, p)


# maxpool


def test_maxpool_routes_gradient_to_argmax():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    with Tape() as tape:
        out, idx = maxpool2d_2x2(x)
        loss = sum_all(out)
    assert out.data[0, 0, 0, 0] == 4.0
    assert idx[0, 0, 0, 0] == 3
    backward(tape, loss)
    assert np.array_equal(x.grad[0, 0], [[0, 0], [0, 1]])


def test_maxpool_tie_break_first_row_major():
    x = t64(np.ones((1, 1, 2, 2)) * 7.0)
    out, idx = maxpool2d_2x2(x)
    assert out.data[0, 0, 0, 0] == 7.0
    assert idx[0, 0, 0, 0] == 0  # first element of the window wins ties


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_matches_naive(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    out, _ = maxpool2d_2x2(t64(x))
    assert out.data.tobytes() == maxpool2x2_naive(x).tobytes()


def test_maxpool_odd_size_rejected():
    with pytest.raises(ShapeError, match="even"):
        maxpool2d_2x2(t64(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("seed", range(10))
def test_maxpool_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = t64(spaced_random(rng, (1, 2, 4, 4)))

    def fn(xi):
        out, _ = maxpool2d_2x2(xi)
        return mean_all(out)

    assert grad_check(fn, [x], epsilon=1e-3) < 1e-4


# conv1d_shared


def test_conv1d_identity_kernel():
    x = t64(np.random.default_rng(0).normal(size=7))
    k = t64([0.0, 1.0, 0.0])
    assert np.array_equal(conv1d_shared(x, k).data, x.data)


def test_conv1d_hand_sum_with_zero_padding():
    out = conv1d_shared(t64([1.0, 2.0, 3.0]), t64([1.0, 1.0, 1.0]))
    assert np.array_equal(out.data, [3.0, 6.0, 5.0])


@pytest.mark.parametrize("seed", range(5))
def test_conv1d_matches_naive_bitwise(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 9))
    k = rng.normal(size=3)
    out = conv1d_shared(t64(x), t64(k)).data
    assert out.tobytes() == conv1d_naive(x, k).tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_conv1d_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(2, 6)))
    k = t64(rng.normal(size=3))
    assert grad_check(lambda xi, ki: mean_all(conv1d_shared(xi, ki)), [x, k], epsilon=1e-3) < 1e-4


def test_conv1d_kernel_length_fixed_at_3():
    with pytest.raises(ShapeError, match="kernel length"):
        conv1d_shared(t64([1.0, 2.0]), t64([1.0, 1.0]))


def test_conv1d_has_exactly_three_trainable_scalars():
    k = t64(np.zeros(3))
    assert k.size == 3  # no bias term anywhere in the op


# batchnorm


def bn_state(c, **kw):
    s = BatchNormState.create(c, dtype=np.float64)
    for key, val in kw.items():
        setattr(s, key, val)
    return s


def test_batchnorm_standardized_input_passes_through():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = batchnorm2d(t64(x), bn_state(3)).data
    assert np.allclose(out, x, atol=1e-4)  # epsilon effect only


def test_batchnorm_beta_sets_channel_mean():
    rng = np.random.default_rng(1)
    state = bn_state(2)
    state.beta = t64([3.0, -1.0])
    out = batchnorm2d(t64(rng.normal(size=(2, 2, 4, 4))), state).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), [3.0, -1.0], atol=1e-10)


def test_batchnorm_eval_uses_running_stats_only():
    state = bn_state(1, mode="eval")
    state.running_mean = np.array([2.0])
    state.running_var = np.array([4.0])
    x = t64(np.full((1, 1, 2, 2), 4.0))
    out = batchnorm2d(x, state).data
    assert np.allclose(out, (4.0 - 2.0) / np.sqrt(4.0 + state.epsilon))


def test_batchnorm_single_element_train_rejected():
    with pytest.raises(ShapeError, match="at least 2"):
        batchnorm2d(t64(np.zeros((1, 3, 1, 1))), bn_state(3))


@pytest.mark.parametrize("seed", range(10))
def test_batchnorm_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(2, 2, 3, 3)))
    state = bn_state(2)
    state.gamma = t64(rng.normal(size=2) + 1.0)
    state.beta = t64(rng.normal(size=2))

    def fn(xi, g, b):
        st = bn_state(2)
        st.gamma, st.beta = g, b
        return mean_all(sigmoid(batchnorm2d(xi, st)))

    assert grad_check(fn, [x, state.gamma, state.beta], epsilon=1e-3) < 1e-4


# dropblock


def test_dropblock_rate_zero_is_identity():
    x = t64(np.random.default_rng(0).normal(size=(1, 2, 8, 8)))
    out = dropblock(x, DropBlockConfig(block_size=3, drop_rate=0.0, mode="train"), np.random.default_rng(0))
    assert out is x


def test_dropblock_eval_mode_is_identity():
    x = t64(np.random.default_rng(0).normal(size=(1, 2, 8, 8)))
    out = dropblock(x, DropBlockConfig(block_size=3, drop_rate=0.5, mode="eval"))
    assert out is x


def test_dropblock_block_larger_than_features_rejected():
    x = t64(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ShapeError, match="block_size"):
        dropblock(x, DropBlockConfig(block_size=7, drop_rate=0.1, mode="train"), np.random.default_rng(0))


def test_dropblock_statistics_at_reference_settings():
    # 32x32 features, block 7, rate 0.15: dropped fraction close to the target
    # rate and activation mass preserved by the rescale.
    rng = np.random.default_rng(123)
    x = Tensor(np.random.default_rng(5).uniform(0.0, 1.0, size=(1, 1, 32, 32)).astype(np.float64))
    cfg = DropBlockConfig(block_size=7, drop_rate=0.15, mode="train")
    dropped = []
    means = []
    for _ in range(2000):
        out = dropblock(x, cfg, rng).data
        dropped.append((out == 0.0).mean())
        means.append(out.mean())
    assert 0.12 <= np.mean(dropped) <= 0.18
    assert abs(np.mean(means) - x.data.mean()) / x.data.mean() < 0.05


def test_dropblock_gradient_masks_match_forward():
    x = t64(np.random.default_rng(2).normal(size=(1, 1, 10, 10)))
    cfg = DropBlockConfig(block_size=3, drop_rate=0.3, mode="train")
    with Tape() as tape:
        out = dropblock(x, cfg, np.random.default_rng(9))
        loss = sum_all(out)
    backward(tape, loss)
    scale = out.data[out.data != 0] / x.data[out.data != 0]
    assert np.allclose(x.grad[out.data != 0], scale)
    assert np.all(x.grad[out.data == 0] == 0)


# activations and concat


def test_sigmoid_at_zero():
    assert sigmoid(t64([0.0])).data[0] == 0.5


def test_relu_clamps_negatives():
    out = relu(t64([-3.0, -0.5, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 0.0, 2.0])


def test_pointwise_activation_dispatch_and_unknown():
    assert pointwise_activation("relu", t64([-1.0])).data[0] == 0.0
    assert pointwise_activation("sigmoid", t64([0.0])).data[0] == 0.5
    with pytest.raises(ValueError):
        pointwise_activation("tanh", t64([0.0]))


@pytest.mark.parametrize("seed", range(10))
def test_activation_grad_checks(seed):
    rng = np.random.default_rng(seed)
    x = t64(spaced_random(rng, (3, 4)))  # keep values away from relu's kink
    assert grad_check(lambda t: mean_all(relu(t)), [x], epsilon=1e-3) < 1e-4
    y = t64(rng.normal(size=(3, 4)))
    assert grad_check(lambda t: mean_all(sigmoid(t)), [y], epsilon=1e-3) < 1e-4


def test_concat_preserves_values_in_order():
    a = t64(np.full((1, 1, 2, 2), 1.0))
    b = t64(np.full((1, 1, 2, 2), 2.0))
    out = concat_channels(a, b)
    assert out.shape == (1, 2, 2, 2)
    assert np.array_equal(out.data[:, 0], a.data[:, 0])
    assert np.array_equal(out.data[:, 1], b.data[:, 0])


def test_concat_empty_operand_rejected():
    a = t64(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        concat_channels(a, Tensor(np.zeros((1, 0, 2, 2), dtype=np.float64)))


def test_concat_spatial_mismatch_rejected():
    with pytest.raises(ShapeError):
        concat_channels(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 4, 4))))


def test_concat_backward_splits_like_slicing():
    rng = np.random.default_rng(3)
    a, b = t64(rng.normal(size=(1, 2, 3, 3))), t64(rng.normal(size=(1, 1, 3, 3)))
    with Tape() as tape:
        out = concat_channels(a, b)
        loss = sum_all(mul(out, out))
    backward(tape, loss)
    assert np.allclose(a.grad, 2 * a.data)
    assert np.allclose(b.grad, 2 * b.data)
