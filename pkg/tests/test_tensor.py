import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drfuzzy import tensor as T
from drfuzzy.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_sum_backward_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_square_gradient_at_three():
    x = leaf([3.0])
    T.tsum(x * x).backward()
    assert x.grad[0] == 6.0


def test_fan_out_accumulates():
    x = leaf([2.0])
    y = x * x + x * 3.0 + x
    T.tsum(y).backward()
    assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0 + 1.0)


def test_non_scalar_root_rejected():
    x = leaf(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_second_backward_requires_reset():
    x = leaf([1.0, 2.0])
    T.tsum(x * x).backward()
    with pytest.raises(RuntimeError):
        T.tsum(x * x).backward()
    x.zero_grad()
    T.tsum(x * x).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_add_and_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.add(a, Tensor([10.0, 20.0])).data, [[11, 22], [13, 24]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_only_one_directional_broadcast():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 3))))


def test_relu_examples():
    assert np.array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_softmax_rows_sum_to_one_and_handle_large_logits():
    p = T.softmax(Tensor([[1000.0, 0.0, -1000.0], [1.0, 1.0, 1.0]])).data
    assert np.allclose(p.sum(axis=1), 1.0)
    assert p[0, 0] == 1.0
    assert np.allclose(p[1], 1 / 3)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(0).normal(size=(4, 5))
    assert np.allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data))


def test_non_finite_results_raise():
    with pytest.raises(FloatingPointError):
        T.log(Tensor([0.0]))


def test_log_floor_keeps_result_finite():
    assert np.isfinite(T.log(Tensor([0.0]), floor=1e-12).data).all()


def test_conv_output_sizes():
    assert T.conv_output_size(64, 3, 2, "same") == 32
    assert T.conv_output_size(7, 3, 1, "valid") == 5
    x = Tensor(np.zeros((1, 3, 9, 9)))
    assert T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), 2, "same").shape == (1, 4, 5, 5)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), 1, "valid").data
    ref = np.zeros((2, 4, 4, 3))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * k[o])
    assert np.allclose(out, ref)


def test_same_padding_is_centred_for_odd_kernels():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(k), 1, "same").data[0, 0]
    # cross-correlation: the impulse picks up the flipped kernel around it
    assert np.array_equal(out[1:4, 1:4], k[0, 0, ::-1, ::-1])


def test_global_max_pool_routes_gradient_to_first_maximum():
    x = leaf(np.array([[[[1.0, 3.0], [3.0, 0.0]]]]))
    T.tsum(T.global_max_pool(x)).backward()
    assert np.array_equal(x.grad[0, 0], [[0.0, 1.0], [0.0, 0.0]])


def test_channel_pool_stacks_mean_and_max():
    x = np.random.default_rng(2).normal(size=(2, 4, 3, 3))
    out = T.channel_pool(Tensor(x)).data
    assert np.allclose(out[:, 0], x.mean(axis=1))
    assert np.allclose(out[:, 1], x.max(axis=1))


def test_squared_distances():
    x = Tensor([[0.0, 0.0], [1.0, 1.0]])
    c = Tensor([[1.0, 0.0], [3.0, 4.0]])
    assert np.array_equal(T.squared_distances(x, c).data, [[1.0, 25.0], [1.0, 13.0]])


def test_finite_diff_check_detects_wrong_gradient():
    x = leaf(np.array([1.0, 2.0, 3.0]))

    def wrong(t):
        y = T.tsum(t * t)
        # sever the graph: value of t*t but gradient of 0.5*t*t
        half = T.tsum(t * t * 0.5)
        return half + Tensor(y.data - half.data)

    assert T.finite_diff_check(wrong, [x]) > 0.1


def test_finite_diff_elementwise_mode_is_stricter_or_equal():
    x = leaf(np.random.default_rng(3).normal(size=(3, 4)))
    f = lambda t: T.tsum(T.sigmoid(t) * t)  # noqa: E731
    a = T.finite_diff_check(f, [x])
    x.zero_grad()
    b = T.finite_diff_check(f, [x], elementwise=True)
    assert a < 1e-8 and b < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(-10, 10, allow_nan=False)),
       st.floats(-5, 5, allow_nan=False))
def test_mul_gradient_is_other_operand(x, c):
    t = leaf(x)
    T.tsum(t * c).backward()
    assert np.allclose(t.grad, c)


def test_dense_with_and_without_bias():
    x = Tensor([[1.0, 2.0]])
    w = Tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    assert np.array_equal(T.dense(x, w).data, [[1.0, 2.0, 3.0]])
    assert np.array_equal(T.dense(x, w, Tensor([1.0, 1.0, 1.0])).data, [[2.0, 3.0, 4.0]])
    with pytest.raises(ValueError):
        T.dense(x, Tensor(np.ones((3, 1))))


def test_float32_precision_is_preserved():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.0).dtype == np.float32
