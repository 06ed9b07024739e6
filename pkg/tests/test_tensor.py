import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtmtrack import tensor as T
from mtmtrack.gradcheck import grad_check


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def P(a):
    return T.parameter(np.asarray(a, dtype=np.float32))


class TestTensorBasics:
    def test_float32_storage(self):
        t = T.Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float32
        assert t.shape == (2, 2) and t.size == 4

    def test_grad_shape_matches_data(self, rng):
        x = P(rng.normal(size=(3, 4)))
        (x * x).sum().backward()
        assert x.grad.shape == x.shape

    def test_non_finite_forward_raises(self):
        with pytest.raises(T.NumericError):
            T.Tensor([1.0, np.inf]) + 1.0

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_overflowing_op_raises(self):
        x = T.Tensor([3e38])
        with pytest.raises(T.NumericError):
            x * 10.0

    def test_grads_accumulate_across_backward_calls(self, rng):
        x = P(rng.normal(size=3))
        (x * 2.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, 5.0)

    def test_shared_subexpression_accumulates(self):
        x = P([1.0, 2.0])
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_no_grad_records_nothing(self):
        x = P([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_backward_needs_scalar_or_seed(self):
        x = P([1.0, 2.0])
        with pytest.raises(T.ShapeError):
            (x * 2.0).backward()
        (x * 2.0).backward(np.ones(2))
        np.testing.assert_allclose(x.grad, 2.0)


class TestElementwise:
    def test_broadcast_add_gradient_reduces(self, rng):
        a, b = P(rng.normal(size=(4, 3))), P(rng.normal(size=(1, 3)))
        (a + b).sum().backward()
        np.testing.assert_allclose(b.grad, [[4, 4, 4]])

    def test_incompatible_broadcast(self):
        with pytest.raises(T.ShapeError):
            T.Tensor(np.ones((2, 3))) + T.Tensor(np.ones((4, 3)))

    def test_relu_and_sigmoid_values(self):
        x = T.Tensor([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.relu(x).data, [0, 0, 2])
        np.testing.assert_allclose(T.sigmoid(x).data, 1 / (1 + np.exp([1.0, 0.0, -2.0])), rtol=1e-6)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = T.sigmoid(T.Tensor([-200.0, 200.0])).data
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-30)

    def test_atan2_range(self, rng):
        y, x = T.Tensor(rng.normal(size=50)), T.Tensor(rng.normal(size=50))
        th = T.atan2(y, x).data
        assert np.all(th > -np.pi - 1e-6) and np.all(th <= np.pi + 1e-6)

    def test_concat_split_roundtrip(self, rng):
        a = T.Tensor(rng.normal(size=(2, 3, 5)))
        parts = T.split(a, [2, 3], axis=-1)
        np.testing.assert_array_equal(T.concat(parts, -1).data, a.data)

    def test_split_sizes_must_cover(self):
        with pytest.raises(T.ShapeError):
            T.split(T.Tensor(np.ones((2, 4))), [1, 2], -1)

    def test_transpose_reshape(self, rng):
        a = rng.normal(size=(2, 3, 4)).astype(np.float32)
        np.testing.assert_array_equal(T.Tensor(a).transpose(2, 0, 1).data, a.transpose(2, 0, 1))
        np.testing.assert_array_equal(T.Tensor(a).reshape(6, 4).data, a.reshape(6, 4))
        with pytest.raises(T.ShapeError):
            T.Tensor(a).reshape(5, 5)


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(2, 2)).astype(np.float32)
        np.testing.assert_array_equal((T.Tensor(np.eye(2)) @ T.Tensor(a)).data, a)

    def test_hand_product(self):
        out = T.Tensor([[1, 2], [3, 4]]) @ T.Tensor([[0], [1]])
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.Tensor(np.ones((2, 3))) @ T.Tensor(np.ones((2, 3)))

    def test_gradients_5x7_7x3(self, rng):
        a, b = P(rng.normal(size=(5, 7))), P(rng.normal(size=(7, 3)))
        r = grad_check(lambda a, b: (a @ b).sum(), [a, b], rel_tol=1e-3)
        assert r.passed, r

    def test_batched_broadcast_gradient(self, rng):
        a, b = P(rng.normal(size=(2, 3, 4))), P(rng.normal(size=(4, 5)))
        (a @ b).sum().backward()
        np.testing.assert_allclose(b.grad, a.data.sum(axis=(0, 1))[:, None].repeat(5, 1), rtol=1e-5)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_no_overflow(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        out = T.softmax(T.Tensor(rng.normal(size=(4, 6))), -1).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)

    def test_invalid_axis(self):
        with pytest.raises(T.ShapeError):
            T.softmax(T.Tensor(np.ones((2, 2))), axis=3)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-1e4, 1e4, width=32)))
    def test_normalised_for_large_inputs(self, x):
        out = T.softmax(T.Tensor(x), -1).data
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = T.layer_norm(T.Tensor([[5.0, 5.0, 5.0]]), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_values(self):
        out = T.layer_norm(T.Tensor([[1.0, 3.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-3)

    def test_gradients(self, rng):
        x, g, b = P(rng.normal(size=(3, 5))), P(1 + 0.1 * rng.normal(size=5)), P(rng.normal(size=5))
        proj = T.Tensor(rng.normal(size=(3, 5)))
        r = grad_check(lambda x, g, b: (T.layer_norm(x, g, b) * proj).sum(), [x, g, b])
        assert r.passed, r

    def test_gamma_shape_checked(self):
        with pytest.raises(T.ShapeError):
            T.layer_norm(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(3)))


class TestConv2d:
    def test_identity_kernel_bit_exact(self, rng):
        x = rng.normal(size=(5, 6, 3)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0] = np.eye(3)
        np.testing.assert_array_equal(T.conv2d(T.Tensor(x), T.Tensor(w)).data, x)

    def test_box_sum(self):
        out = T.conv2d(T.Tensor(np.ones((5, 5, 1))), T.Tensor(np.ones((3, 3, 1, 1))), pad=1)
        assert out.data[2, 2, 0] == 9.0
        assert out.data[0, 0, 0] == 4.0

    @pytest.mark.parametrize("H,k,s,p", [(7, 3, 1, 1), (7, 3, 2, 1), (8, 3, 2, 0), (6, 1, 1, 0)])
    def test_output_extent(self, H, k, s, p):
        out = T.conv2d(T.Tensor(np.ones((H, H, 2))), T.Tensor(np.ones((k, k, 2, 4))), stride=s, pad=p)
        n = (H + 2 * p - k) // s + 1
        assert out.shape == (n, n, 4)

    def test_invalid_geometry(self):
        x, w = T.Tensor(np.ones((4, 4, 1))), T.Tensor(np.ones((3, 3, 1, 1)))
        with pytest.raises(T.ShapeError):
            T.conv2d(x, w, stride=0)
        with pytest.raises(T.ShapeError):
            T.conv2d(x, w, pad=-1)
        with pytest.raises(T.ShapeError):
            T.conv2d(T.Tensor(np.ones((2, 2, 1))), T.Tensor(np.ones((5, 5, 1, 1))))
        with pytest.raises(T.ShapeError):
            T.conv2d(x, T.Tensor(np.ones((3, 3, 2, 1))))

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(5, 4, 2)).astype(np.float32)
        w = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)
        out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, pad=1).data
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                ref = np.einsum("abc,abcd->d", xp[2 * i:2 * i + 3, 2 * j:2 * j + 3], w)
                np.testing.assert_allclose(out[i, j], ref, rtol=1e-5, atol=1e-5)


class TestBilinear:
    def test_integer_coordinate_exact(self, rng):
        f = rng.normal(size=(5, 6, 2)).astype(np.float32)
        out = T.bilinear_sample(T.Tensor(f), T.Tensor([[2.0, 3.0]]))
        np.testing.assert_array_equal(out.data[0], f[2, 3])

    def test_midpoint_is_mean(self, rng):
        f = rng.normal(size=(4, 4, 3)).astype(np.float32)
        out = T.bilinear_sample(T.Tensor(f), T.Tensor([[1.5, 2.5]])).data[0]
        np.testing.assert_allclose(out, f[1:3, 2:4].mean(axis=(0, 1)), rtol=1e-6)

    def test_border_clamp(self, rng):
        f = rng.normal(size=(3, 3, 1)).astype(np.float32)
        out = T.bilinear_sample(T.Tensor(f), T.Tensor([[-4.0, 1.0], [9.0, 9.0]])).data
        np.testing.assert_array_equal(out[:, 0], [f[0, 1, 0], f[2, 2, 0]])

    def test_clamped_coordinate_gradient_is_zero(self, rng):
        f = T.Tensor(rng.normal(size=(3, 3, 1)))
        c = P([[-4.0, 1.3]])
        T.bilinear_sample(f, c).sum().backward()
        assert c.grad[0, 0] == 0.0 and c.grad[0, 1] != 0.0

    def test_coordinate_gradient_at_fractional_points(self, rng):
        f = P(rng.normal(size=(6, 5, 2)))
        c = P(rng.integers(0, 4, size=(8, 2)) + rng.uniform(0.1, 0.9, size=(8, 2)))
        proj = T.Tensor(rng.normal(size=(8, 2)))
        r = grad_check(lambda f, c: (T.bilinear_sample(f, c) * proj).sum(), [f, c])
        assert r.passed, r

    def test_sparse_and_dense_gradients_agree(self, rng):
        # a big single-channel map sampled a few times takes the sparse gradient path
        big = rng.normal(size=(3, 40, 40, 1)).astype(np.float32)
        coords = rng.uniform(0, 39, size=(3, 5, 2)).astype(np.float32)
        g = rng.normal(size=(3, 5, 1)).astype(np.float32)
        f1 = P(big)
        T.bilinear_sample(f1, T.Tensor(coords)).backward(g)
        f2 = P(big)
        y = T.bilinear_sample(f2 * 1.0, T.Tensor(coords))
        z = T.bilinear_sample(f2 * 1.0, T.Tensor(coords))
        (y + z).backward(g)
        np.testing.assert_allclose(f2.grad, 2 * f1.grad, rtol=1e-5, atol=1e-6)
        # dense reference via explicit weights
        ref = np.zeros_like(big)
        for b in range(3):
            for p in range(5):
                x, yv = coords[b, p]
                i, j = int(np.floor(x)), int(np.floor(yv))
                wx, wy = x - i, yv - j
                for di, dj, wt in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)),
                                   (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
                    ref[b, i + di, j + dj, 0] += wt * g[b, p, 0]
        np.testing.assert_allclose(f1.grad, ref, rtol=1e-4, atol=1e-6)

    def test_shape_errors(self):
        with pytest.raises(T.ShapeError):
            T.bilinear_sample(T.Tensor(np.ones((3, 3))), T.Tensor([[0.0, 0.0]]))
        with pytest.raises(T.ShapeError):
            T.bilinear_sample(T.Tensor(np.ones((3, 3, 1))), T.Tensor([[0.0, 0.0, 0.0]]))


class TestPool:
    def test_constant_grid(self):
        x = T.Tensor(np.full((4, 4, 2), 3.5))
        for kind in ("avg", "max"):
            np.testing.assert_array_equal(T.pool2d(x, kind).data, 3.5)

    def test_max_of_one_to_nine(self):
        x = T.Tensor(np.arange(1, 10, dtype=np.float32).reshape(3, 3, 1))
        assert T.pool2d(x, "max").data.item() == 9.0

    def test_avg_gradient_spreads_evenly(self):
        x = P(np.random.default_rng(1).normal(size=(3, 5, 2)))
        T.pool2d(x, "avg").sum().backward()
        np.testing.assert_allclose(x.grad, 1.0 / 15)

    def test_global_shape_keeps_channels(self):
        assert T.pool2d(T.Tensor(np.ones((6, 4, 7))), "max").shape == (1, 1, 7)

    def test_windowed_pool(self):
        x = T.Tensor(np.arange(16, dtype=np.float32).reshape(4, 4, 1))
        out = T.pool2d(x, "max", global_=False, size=2).data[..., 0]
        np.testing.assert_array_equal(out, [[5, 7], [13, 15]])
        with pytest.raises(T.ShapeError):
            T.pool2d(T.Tensor(np.ones((5, 4, 1))), "avg", global_=False, size=2)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.pool2d(T.Tensor(np.ones((2, 2, 1))), "median")


class TestDeterminism:
    def test_bit_identical_repeat(self, rng):
        x = rng.normal(size=(6, 6, 3)).astype(np.float32)
        w = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
        c = rng.uniform(0, 5, size=(10, 2)).astype(np.float32)

        def run():
            y = T.relu(T.conv2d(T.Tensor(x), T.Tensor(w), pad=1))
            return T.bilinear_sample(T.softmax(y, -1), T.Tensor(c)).data

        assert run().tobytes() == run().tobytes()
