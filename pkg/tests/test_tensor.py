import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from curlprune import kernels
from curlprune import tensor as T

from gradcheck import check, op_cases


def test_relu_example():
    out = T.forward_op("relu", [T.Tensor([-1.0, 0.0, 2.0])])
    np.testing.assert_array_equal(out.data, [0, 0, 2])


def test_add_zero_is_identity():
    x = T.Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    out = T.forward_op("add", [x, T.Tensor(np.zeros_like(x.data))])
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_output_shape():
    x = T.Tensor(np.zeros((1, 3, 8, 8)))
    k = T.Tensor(np.zeros((4, 3, 3, 3)))
    out = T.forward_op("conv2d", [x, k], stride=1, padding=1)
    assert out.shape == (1, 4, 8, 8)


def test_conv_shape_mismatch_names_op_and_dims():
    x = T.Tensor(np.zeros((1, 3, 8, 8)))
    k = T.Tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(T.ShapeError, match=r"conv2d: input channels 3 != weight in_channels 2"):
        T.conv2d(x, k)


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_unknown_op():
    with pytest.raises(ValueError, match="unknown op kind"):
        T.forward_op("gelu", [T.Tensor([1.0])])


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_depthwise_matches_grouped_conv():
    rng = np.random.default_rng(4)
    x = T.Tensor(rng.standard_normal((2, 5, 7, 7)))
    w = T.Tensor(rng.standard_normal((5, 1, 3, 3)))
    a = T.depthwise_conv2d(x, w, stride=2, padding=1).data
    b = T.conv2d(x, w, stride=2, padding=1, groups=5).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_backward_square():
    w = T.Parameter(np.array([1.0, 2.0]))
    T.backward(T.sum_(T.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_mean_relu():
    w = T.Parameter(np.array([-1.0, 3.0]))
    T.backward(T.mean(T.relu(w)))
    np.testing.assert_array_equal(w.grad, [0.0, 0.5])


def test_backward_rejects_non_scalar():
    w = T.Parameter(np.array([1.0, 2.0]))
    with pytest.raises(T.ShapeError, match="scalar"):
        T.backward(T.mul(w, w))
    T.clear_tape()


def test_backward_clears_tape():
    w = T.Parameter(np.array([1.0, 2.0]))
    loss = T.sum_(T.mul(w, w))
    assert T.tape_size() == 2
    T.backward(loss)
    assert T.tape_size() == 0
    with pytest.raises(RuntimeError, match="empty tape"):
        T.backward(loss)


def test_no_grad_records_nothing():
    w = T.Parameter(np.array([1.0, 2.0]))
    with T.no_grad():
        T.sum_(T.mul(w, w))
    assert T.tape_size() == 0


@pytest.mark.parametrize("name,build,arrays", op_cases(seed=11, per_op=2), ids=lambda v: v if isinstance(v, str) else "")
def test_finite_difference_agreement(name, build, arrays):
    assert check(build, arrays, h=1e-3) < 1e-5


def test_small_net_gradient():
    rng = np.random.default_rng(5)

    def net(x, w1, g, b, w2):
        h = T.conv2d(x, w1, padding=1)
        h = T.batchnorm(h, g, b, np.zeros(3), np.ones(3), training=True)
        h = T.mean(h, axis=(2, 3))
        return T.mean(T.log_softmax(T.matmul(h, w2)))

    arrays = [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)),
              rng.uniform(0.5, 1.5, 3), rng.standard_normal(3), rng.standard_normal((3, 4))]
    assert check(net, arrays) < 1e-5


def test_forward_and_gradient_determinism():
    def run():
        rng = np.random.default_rng(9)
        x = T.Tensor(rng.standard_normal((2, 3, 6, 6)).astype(np.float32))
        w = T.Parameter(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        out = T.conv2d(x, w, padding=1)
        loss = T.sum_(T.mul(out, out))
        T.backward(loss)
        return out.data.tobytes(), w.grad.tobytes()

    assert run() == run()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(T.Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_float32_rows():
    x = np.random.default_rng(2).standard_normal((64, 10)).astype(np.float32) * 8
    p = T.softmax(T.Tensor(x)).data
    assert p.dtype == np.float32
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_gradient_shape_and_dtype_match_value():
    w = T.Parameter(np.ones((2, 3), dtype=np.float32))
    T.backward(T.sum_(T.mul(w, w)))
    assert w.grad.shape == w.shape and w.grad.dtype == w.dtype


def test_pad_crop_roundtrip():
    x = T.Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
    y = T.crop(T.pad(x, 2), 2, 2, 3, 4)
    np.testing.assert_array_equal(x.data, y.data)
    with pytest.raises(T.ShapeError, match="crop"):
        T.crop(x, 1, 1, 3, 4)


class TestBatchnorm:
    def test_training_updates_running_stats(self):
        x = np.random.default_rng(0).standard_normal((8, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        T.batchnorm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, training=True, momentum=0.1)
        mu = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(rm, 0.1 * mu)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_empty_batch_rejected(self):
        with pytest.raises(T.ShapeError, match="empty batch"):
            T.batchnorm(T.Tensor(np.zeros((0, 2, 3, 3))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                        np.zeros(2), np.ones(2), training=True)

    def test_width_mismatch(self):
        with pytest.raises(T.ShapeError, match="channel dim 3"):
            T.batchnorm(T.Tensor(np.zeros((1, 3, 2, 2))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                        np.zeros(2), np.ones(2), training=False)


class TestSGD:
    def test_plain_step(self):
        w = T.Parameter(np.array([1.0]))
        w.grad[:] = 2.0
        assert T.sgd_step([w], lr=0.1)
        np.testing.assert_allclose(w.data, [0.8])
        assert w.grad[0] == 0.0

    def test_zero_lr_leaves_values(self):
        w = T.Parameter(np.array([1.0, -3.0]))
        w.grad[:] = [5.0, 7.0]
        T.sgd_step([w], lr=0.0, momentum=0.9, weight_decay=1e-4)
        np.testing.assert_array_equal(w.data, [1.0, -3.0])

    def test_unit_rate(self):
        u = T.Parameter(np.array([0.5, -0.25]))
        u.grad[:] = [0.125, -0.5]
        T.sgd_step([u], lr=1.0)
        np.testing.assert_array_equal(u.data, [0.375, 0.25])

    def test_momentum(self):
        w = T.Parameter(np.array([0.0]))
        for _ in range(2):
            w.grad[:] = 1.0
            T.sgd_step([w], lr=1.0, momentum=0.5)
        # v1 = 1, v2 = 1.5
        np.testing.assert_allclose(w.data, [-2.5])

    def test_non_finite_aborts(self, caplog):
        w = T.Parameter(np.array([1.0, 2.0]))
        w.grad[:] = [np.nan, 1.0]
        assert not T.sgd_step([w], lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0, 2.0])
        np.testing.assert_array_equal(w.grad, [0.0, 0.0])
        assert "non-finite" in caplog.text


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip_bitwise(self, dtype):
        arr = np.random.default_rng(1).standard_normal((3, 1, 4, 2)).astype(dtype)
        back = T.tensor_from_bytes(T.tensor_to_bytes(arr))
        assert back.dtype == arr.dtype and back.tobytes() == arr.tobytes()

    def test_header_layout(self):
        raw = T.tensor_to_bytes(np.zeros((2, 3), dtype=np.float64))
        assert raw[:2] == bytes([1, 2])
        assert raw[2:10] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(raw) == 10 + 6 * 8

    def test_truncated_payload(self):
        raw = T.tensor_to_bytes(np.zeros(4, dtype=np.float32))
        with pytest.raises(ValueError, match="truncated"):
            T.read_tensor(io.BytesIO(raw[:-1]))


@pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="extension not built")
@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (2, 2, 5), (3, 0, 3)])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bit_identical(stride, pad, k, dtype):
    x = np.random.default_rng(0).standard_normal((2, 3, 9, 8)).astype(dtype)
    py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["compiled"]
    cols = py.im2col(x, k, k, stride, pad)
    assert np.array_equal(cols, cy.im2col(x, k, k, stride, pad))
    assert np.array_equal(py.col2im(cols, x.shape, k, k, stride, pad), cy.col2im(cols, x.shape, k, k, stride, pad))


def test_use_backend_switch():
    prev = kernels.use_backend("python")
    try:
        assert kernels.BACKEND == "python"
        with pytest.raises(ValueError, match="not available"):
            kernels.use_backend("cuda")
    finally:
        kernels.use_backend(prev)
