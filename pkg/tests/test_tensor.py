import numpy as np
import pytest

from conftest import check_gradient
from quantkit import tensor as T
from quantkit.exceptions import ContractError, DimensionError, NumericalError
from quantkit.tensor import AdamState, Parameter, Tensor, adam_step


class TestForward(object):

    def test_matmul_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_matmul_hand_case(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        assert out.data.tolist() == [[11.0]]

    def test_matmul_against_loops(self, rng):
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, rtol=1e-12)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_conv_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 4, 4))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_conv_all_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.data.reshape(-1).tolist() == [9.0]

    def test_conv_against_im2col(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data

        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 4, 6, 6))
        for i in range(6):
            for j in range(6):
                patch = padded[:, :, i:i + 3, j:j + 3].reshape(2, -1)
                expected[:, :, i, j] = patch @ w.reshape(4, -1).T + b
        np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)

    def test_depthwise_groups(self, rng):
        x = rng.normal(size=(1, 3, 5, 5))
        w = rng.normal(size=(3, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), groups=3).data
        for c in range(3):
            single = T.conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1])).data
            np.testing.assert_allclose(out[:, c:c + 1], single, rtol=1e-12)

    def test_conv_stride_geometry(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)

    def test_non_finite_input(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan])

    def test_elementwise_needs_equal_shapes(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones(3)) + Tensor(np.ones(2))


    def test_accessors(self):
        leaf = Tensor([[2.5]], requires_grad=True)
        assert leaf.item() == 2.5
        with pytest.raises(DimensionError):
            Tensor([1.0, 2.0]).item()
        copy = leaf.numpy()
        copy[0, 0] = 0.0
        assert leaf.data[0, 0] == 2.5
        assert not leaf.detach().requires_grad


class TestBackward(object):

    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_shared_subexpression(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        (y + y * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2 * 3.0 + 3 * 9.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_matmul_gradient(self, rng):
        b = Tensor(rng.normal(size=(4, 3)))
        check_gradient(lambda a: (T.matmul(a, b) * T.matmul(a, b)).sum(), rng.normal(size=(2, 4)))

    def test_conv_gradient(self, rng):
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        bias = Tensor(rng.normal(size=2))
        check_gradient(
            lambda x: (T.conv2d(x, w, bias, stride=1, padding=1) ** 2).sum(),
            rng.normal(size=(1, 3, 4, 4)),
        )

    def test_conv_weight_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        check_gradient(lambda w: (T.conv2d(x, w, stride=2) ** 2).sum(), rng.normal(size=(3, 2, 3, 3)))

    def test_depthwise_gradient(self, rng):
        w = Tensor(rng.normal(size=(3, 1, 3, 3)))
        check_gradient(lambda x: (T.conv2d(x, w, padding=1, groups=3) ** 2).sum(), rng.normal(size=(1, 3, 4, 4)))

    def test_pooling_gradients(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        check_gradient(lambda v: (T.avg_pool2d(v, 2) ** 2).sum(), x)
        check_gradient(lambda v: (T.max_pool2d(v, 2) ** 2).sum(), x)

    def test_channel_ops_gradients(self, rng):
        s = Tensor(rng.normal(size=3))
        b = Tensor(rng.normal(size=3))
        check_gradient(lambda x: (T.add_bias(T.scale_channels(x, s), b) ** 2).sum(), rng.normal(size=(2, 3, 2, 2)))

    def test_cross_entropy_gradient(self, rng):
        labels = np.array([0, 2, 1])
        check_gradient(lambda z: T.cross_entropy(z, labels), rng.normal(size=(3, 4)))

    def test_sigmoid_and_concat(self, rng):
        other = Tensor(rng.normal(size=(2, 1)))
        check_gradient(lambda x: (T.concat([T.sigmoid(x), other], axis=1) ** 2).sum(), rng.normal(size=(2, 3)))

    def test_clip_is_inclusive(self):
        x = Tensor([0.0, 0.5, 1.0, 1.5], requires_grad=True)
        T.clip(x, 0.0, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0, 0.0])


class TestOptimizers(object):

    def test_adam_zero_gradient(self):
        params, state = adam_step([np.array([1.0, 2.0])], [np.zeros(2)], AdamState([(2,)]), lr=0.1)
        np.testing.assert_array_equal(params[0], [1.0, 2.0])
        np.testing.assert_array_equal(state.m[0], 0.0)
        np.testing.assert_array_equal(state.v[0], 0.0)

    def test_adam_first_step(self):
        params, _ = adam_step([np.array([0.0])], [np.array([1.0])], AdamState([(1,)]), lr=0.1)
        assert params[0][0] == pytest.approx(-0.1, rel=1e-6)

    def test_adam_converges(self):
        w = Parameter([0.0])
        optimizer = T.Adam([{'params': [w], 'lr': 0.1}])
        distances = []
        for _ in range(100):
            optimizer.zero_grad()
            ((w - 3.0) * (w - 3.0)).sum().backward()
            optimizer.step()
            distances.append(abs(float(w.data[0]) - 3.0))
        assert distances[-1] < distances[10]
        assert distances[29] < distances[0]

    def test_sgd_momentum(self):
        params, velocity = T.sgd_step([np.array([1.0])], [np.array([2.0])], [np.array([1.0])], lr=0.5, momentum=0.5)
        np.testing.assert_allclose(velocity[0], [2.5])
        np.testing.assert_allclose(params[0], [-0.25])
