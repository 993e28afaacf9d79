import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate2d

from rgbd_vsod import functional as F
from rgbd_vsod.gradcheck import finite_difference_check
from rgbd_vsod.tensor import NonFiniteError, Tensor, no_grad, precision


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(F.matmul(eye, m).data, m.data)
    out = F.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_grad_hand_value():
    a = t64([[1.0, 1.0]])
    b = t64([[2.0], [3.0]], grad=False)
    F.sum(F.matmul(a, b)).backward()
    np.testing.assert_array_equal(a.grad, [[2.0, 3.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv_identity_kernel():
    x = Tensor(np.arange(9.0).reshape(1, 3, 3))
    out = F.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_all_ones_center_nine():
    out = F.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 1, 1] == 9.0
    assert out.data[0, 0, 0] == 4.0


def test_depthwise_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 5, 5)))
    w = np.zeros((3, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    out = F.conv2d(x, Tensor(w), padding=1, groups=3)
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)


def test_conv_matches_scipy_correlation(rng):
    x = rng.normal(size=(1, 1, 7, 6))
    w = rng.normal(size=(1, 1, 3, 3))
    with precision(np.float64):
        ours = F.conv2d(Tensor(x), Tensor(w), padding=1).data[0, 0]
    np.testing.assert_allclose(ours, correlate2d(x[0, 0], w[0, 0], mode="same"), atol=1e-12)


def test_conv_group_mismatch_errors():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 4, 5, 5))), Tensor(np.zeros((3, 2, 3, 3))), groups=3)
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 4, 5, 5))), Tensor(np.zeros((2, 4, 2, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)
    with precision(np.float64):
        out = F.softmax(Tensor([0.0, np.log(2), np.log(4)])).data
    np.testing.assert_allclose(out, [1 / 7, 2 / 7, 4 / 7], atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_normalized(x):
    out = F.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(out > 0) and np.all(out <= 1)


def test_pooling_and_resize_of_constants():
    x = Tensor(np.full((1, 2, 5, 7), 3.5))
    np.testing.assert_allclose(F.global_avg_pool(x).data, 3.5)
    for size in [(1, 1), (3, 11), (10, 14)]:
        np.testing.assert_allclose(F.resize_bilinear(x, size).data, 3.5, rtol=1e-6)


def test_channel_mean_hand_value():
    x = np.stack([np.ones((3, 3)), 3 * np.ones((3, 3))])
    np.testing.assert_array_equal(F.channel_mean(Tensor(x)).data, np.full((1, 3, 3), 2.0))


def test_concat_shape_mismatch():
    with pytest.raises(ValueError):
        F.concat([Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 4)))], axis=1)


def test_backward_examples():
    x = t64(np.ones((2, 3, 4)))
    F.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
    y = t64([1.0, 2.0])
    F.sum(y * y).backward()
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = t64([1.0, 2.0])
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_gradient_accumulates():
    x = t64([1.0, -2.0, 3.0])
    F.sum(x * x).backward()
    F.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 4 * x.data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        F.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


def test_no_grad_records_nothing():
    x = t64([1.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_forward_determinism(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = F.gelu(F.conv2d(Tensor(x), Tensor(w), padding=1)).data
    b = F.gelu(F.conv2d(Tensor(x), Tensor(w), padding=1)).data
    assert a.tobytes() == b.tobytes()


def test_fd_check_of_sum_is_exact(rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(3, 4)))
        assert finite_difference_check(lambda: F.sum(x), x) < 1e-9


def _direction(shape, rng):
    return Tensor(rng.normal(size=shape))


UNARY = {
    "exp": F.exp, "sigmoid": F.sigmoid, "tanh": F.tanh, "gelu": F.gelu,
    "sqrt": lambda a: F.sqrt(a * a + 1.0), "log": lambda a: F.log(a * a + 1.0),
    "power": lambda a: F.power(a * a + 0.5, 1.5), "softmax": lambda a: F.softmax(a, axis=-1),
    "layer_norm": lambda a: F.layer_norm(a, axis=1),
    "mean": lambda a: F.mean(a, axis=(0, 2), keepdims=True),
    "getitem": lambda a: a[:, 1:, ::2],
    "transpose": lambda a: F.transpose(a, (2, 0, 1)),
    "global_avg_pool": lambda a: F.global_avg_pool(F.expand_dims(a, 0)),
    "channel_mean": F.channel_mean,
    "resize_bilinear": lambda a: F.resize_bilinear(a, (5, 2)),
    "resize_area": lambda a: F.resize_area(F.concat([a, a], axis=2), (2, 4)),
    "upsample2x": F.upsample2x,
    "clamp_probability": lambda a: F.clamp_probability(F.sigmoid(a)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(3, 4, 4)))
        d = _direction(UNARY[name](x).shape, rng)
        err = finite_difference_check(lambda: F.sum(UNARY[name](x) * d), x)
    assert err < 1e-4


@pytest.mark.parametrize("op", [F.add, F.sub, F.mul, F.div])
def test_broadcasting_binary_ops(op, rng):
    with precision(np.float64):
        a = Tensor(rng.normal(size=(2, 3, 1)))
        b = Tensor(rng.uniform(0.5, 2.0, size=(1, 4)))
        d = _direction((2, 3, 4), rng)
        assert finite_difference_check(lambda: F.sum(op(a, b) * d), [a, b]) < 1e-4


@pytest.mark.parametrize("stride,padding,dilation,groups", [
    (1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (1, 0, 1, 1), (2, 2, 1, 4)])
def test_conv_gradients(stride, padding, dilation, groups, rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(2, 4, 6, 5)))
        w = Tensor(rng.normal(size=(4, 4 // groups, 3, 3)))
        b = Tensor(rng.normal(size=(4,)))
        out = F.conv2d(x, w, b, stride, padding, dilation, groups)
        d = _direction(out.shape, rng)
        err = finite_difference_check(lambda: F.sum(F.conv2d(x, w, b, stride, padding, dilation, groups) * d),
                                      [x, w, b])
    assert err < 1e-4


def test_edge_shapes_single_channel_and_unit_dims(rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(1, 1, 1, 3)))
        w = Tensor(rng.normal(size=(1, 1, 3, 3)))
        assert finite_difference_check(lambda: F.sum(F.sigmoid(F.conv2d(x, w, padding=1))), [x, w]) < 1e-4
        y = Tensor(rng.normal(size=(1, 1)))
        assert finite_difference_check(lambda: F.sum(F.matmul(y, y) * 3.0), y) < 1e-4


def test_matmul_and_bce_gradients(rng):
    with precision(np.float64):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        b = Tensor(rng.normal(size=(4, 5)))
        assert finite_difference_check(lambda: F.sum(F.matmul(a, b) ** 2), [a, b]) < 1e-4
        z = Tensor(rng.normal(size=(2, 1, 3, 3)) * 3)
        tgt = (rng.uniform(size=(2, 1, 3, 3)) > 0.5).astype(np.float64)
        assert finite_difference_check(lambda: F.mean(F.bce_with_logits(z, tgt)), z) < 1e-4


def test_concat_stack_gradients(rng):
    with precision(np.float64):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(2, 1)))
        d = _direction((2, 4), rng)
        assert finite_difference_check(lambda: F.sum(F.concat([a, b], axis=1) * d), [a, b]) < 1e-4
        d2 = _direction((2, 2, 3), rng)
        assert finite_difference_check(lambda: F.sum(F.stack([a, a * 2.0], axis=1) * d2), a) < 1e-4


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 9), st.integers(1, 9))
def test_bilinear_resize_preserves_constants(h, w, oh, ow):
    x = Tensor(np.full((1, 1, h, w), -1.25), dtype=np.float64)
    np.testing.assert_allclose(F.resize_bilinear(x, (oh, ow)).data, -1.25, atol=1e-12)


def test_pad_edge_matches_numpy_edge_mode(rng):
    a = rng.normal(size=(2, 3, 4, 5))
    out = F.pad_edge(Tensor(a, dtype=np.float64), 2).data
    np.testing.assert_array_equal(out, np.pad(a, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="edge"))
    assert F.pad_edge(Tensor(a), 0).shape == a.shape


def test_pad_edge_gradient(rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        d = _direction((1, 2, 9, 9), rng)
        assert finite_difference_check(lambda: F.sum(F.pad_edge(x, 3) * d), x) < 1e-4
