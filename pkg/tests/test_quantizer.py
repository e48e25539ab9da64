import numpy as np
import pytest

from conftest import numerical_gradient
from quantkit.exceptions import ContractError, DimensionError
from quantkit.quantizer import (
    IntTensor, QuantizerSpec, dequantize, fake_quant, fake_quant_data, grid_limits, int_grid_limits,
    quantize_int, ste_grad_input, ste_grad_scale, ste_grad_zero_point,
)
from quantkit.tensor import Parameter, Tensor


def asymmetric(scale, zero_point=0, bitwidth=8):
    return QuantizerSpec('asymmetric-unsigned', bitwidth, scale=scale, zero_point=zero_point)


def symmetric(scale, bitwidth=8):
    return QuantizerSpec('symmetric-signed', bitwidth, scale=scale)


class TestSpec(object):

    def test_unfitted(self):
        spec = QuantizerSpec.unfitted('symmetric-signed', 8)
        assert not spec.fitted
        assert spec.groups is None

    @pytest.mark.parametrize('bitwidth', [1, 17, 4.5, True])
    def test_bitwidth_range(self, bitwidth):
        with pytest.raises(ContractError):
            QuantizerSpec('symmetric-signed', bitwidth)

    def test_symmetric_zero_point(self):
        with pytest.raises(ContractError):
            QuantizerSpec('symmetric-signed', 8, scale=0.1, zero_point=3)

    def test_positive_scale(self):
        with pytest.raises(ContractError):
            symmetric(0.0)

    def test_power_of_two_scale(self):
        QuantizerSpec('power-of-two-signed', 8, scale=0.125)
        with pytest.raises(ContractError):
            QuantizerSpec('power-of-two-signed', 8, scale=0.1)

    def test_per_channel_groups(self):
        spec = QuantizerSpec('symmetric-signed', 8, 'per-channel', 0, scale=[0.1, 0.2, 0.3])
        assert spec.groups == 3
        with pytest.raises(DimensionError):
            quantize_int(np.ones((2, 4)), spec)

    def test_integer_limits(self):
        for scheme in ('asymmetric-unsigned', 'symmetric-signed', 'symmetric-unsigned'):
            spec = QuantizerSpec(scheme, 6, scale=0.5)
            limits = int_grid_limits(spec)
            assert limits.n < limits.p
            assert float(limits.p - limits.n) == 2 ** 6 - 1

    def test_freeze_rounds_zero_point(self):
        spec = QuantizerSpec('asymmetric-unsigned', 8, scale=0.1, zero_point=12.4, frozen=False)
        frozen = spec.freeze()
        assert frozen.frozen
        assert frozen.zero_point.tolist() == [12.0]

    def test_dict_round_trip(self):
        spec = QuantizerSpec('symmetric-signed', 4, 'per-channel', 0, scale=[0.5, 0.25])
        assert QuantizerSpec.from_dict(spec.as_dict()) == spec


class TestQuantize(object):

    def test_zero(self):
        assert quantize_int(np.array([0.0]), asymmetric(0.1, 7)).values.tolist() == [7]

    def test_clamp(self):
        q = quantize_int(np.array([-0.05, 0.32, 1.57]), asymmetric(0.01))
        assert q.values.tolist() == [0, 32, 157]

    def test_half_to_even(self):
        # exact binary ties: 1.5 and 2.5 both go to 2
        assert quantize_int(np.array([0.75, 1.25]), symmetric(0.5)).values.tolist() == [2, 2]
        assert quantize_int(np.array([-0.75]), symmetric(0.5)).values.tolist() == [-2]

    def test_dequantize(self):
        spec = asymmetric(0.01, 9)
        assert dequantize(IntTensor([9], 8, False), spec).data.tolist() == [0.0]
        np.testing.assert_allclose(dequantize(IntTensor([157], 8, False), asymmetric(0.01)).data, [1.57])
        assert dequantize(IntTensor([-128], 8, True), symmetric(0.5)).data.tolist() == [-64.0]

    def test_dequantize_out_of_grid(self):
        with pytest.raises(ContractError):
            dequantize(np.array([300]), asymmetric(0.01))

    def test_fake_quant_idempotent(self):
        spec = asymmetric(0.05, 20)
        on_grid = 0.05 * (np.arange(0, 256, 17) - 20)
        np.testing.assert_allclose(fake_quant_data(on_grid, spec), on_grid, rtol=0, atol=1e-15)

    def test_fake_quant_clips(self):
        assert fake_quant_data(np.array([10.0]), asymmetric(0.01))[0] == pytest.approx(2.55)

    @pytest.mark.parametrize('spec', [
        asymmetric(0.013, 37), symmetric(0.2), QuantizerSpec('symmetric-unsigned', 4, scale=0.3),
        QuantizerSpec('power-of-two-signed', 8, scale=0.25),
    ])
    def test_zero_is_exact(self, spec):
        assert fake_quant_data(np.zeros(3), spec).tolist() == [0.0, 0.0, 0.0]

    def test_grid_limits(self):
        assert grid_limits(asymmetric(0.1)) == pytest.approx((0.0, 25.5))
        assert grid_limits(symmetric(1.0)) == (-128.0, 127.0)
        q_min, q_max = grid_limits(asymmetric(0.1, 255))
        assert q_max == 0.0
        assert q_min < 0.0

    def test_per_channel_quantize(self):
        spec = QuantizerSpec('symmetric-signed', 8, 'per-channel', 0, scale=[0.1, 1.0])
        q = quantize_int(np.array([[0.3, 0.5], [3.0, 5.0]]), spec)
        assert q.values.tolist() == [[3, 5], [3, 5]]


class TestStraightThrough(object):

    def test_input_gradient_inside(self, rng):
        spec = asymmetric(0.01, 128)
        upstream = rng.normal(size=5)
        x = rng.uniform(-1.0, 1.0, 5)
        np.testing.assert_array_equal(ste_grad_input(x, spec, upstream), upstream)

    def test_input_gradient_boundaries(self):
        spec = asymmetric(0.01)
        q_max = grid_limits(spec)[1]
        grads = ste_grad_input(np.array([q_max + 1.0, q_max]), spec, np.ones(2))
        assert grads.tolist() == [0.0, 1.0]

    def test_scale_gradient_terms(self):
        spec = symmetric(0.1)
        assert ste_grad_scale(np.array([0.3]), spec, np.ones(1))[0] == pytest.approx(0.0, abs=1e-12)
        assert ste_grad_scale(np.array([-1000.0]), spec, np.ones(1)).tolist() == [-128.0]

    def test_zero_point_gradient(self):
        spec = asymmetric(0.25)
        assert ste_grad_zero_point(np.array([0.5, 1.0]), spec, np.ones(2)).tolist() == [0.0]
        assert ste_grad_zero_point(np.array([100.0]), spec, np.ones(1)).tolist() == [-0.25]
        mixed = ste_grad_zero_point(np.array([-1.0, 0.5, 100.0, 200.0]), spec, np.array([1.0, 5.0, 2.0, 3.0]))
        assert mixed.tolist() == [-0.25 * (1.0 + 2.0 + 3.0)]

    def test_zero_point_gradient_symmetric(self):
        with pytest.raises(ContractError):
            ste_grad_zero_point(np.array([0.5]), symmetric(0.1), np.ones(1))

    def test_fake_quant_backward_matches_helpers(self, rng):
        spec = asymmetric(0.02, 40, bitwidth=6)
        values = rng.uniform(-1.5, 1.5, (3, 4))
        upstream = rng.normal(size=(3, 4))
        x = Tensor(values, requires_grad=True)
        scale = Parameter(spec.scale)
        zero_point = Parameter(spec.zero_point)
        (fake_quant(x, spec, scale, zero_point) * Tensor(upstream)).sum().backward()

        np.testing.assert_allclose(x.grad, ste_grad_input(values, spec, upstream))
        np.testing.assert_allclose(scale.grad, ste_grad_scale(values, spec, upstream))
        np.testing.assert_allclose(zero_point.grad, ste_grad_zero_point(values, spec, upstream))

    def test_scale_gradient_against_finite_differences(self, rng):
        # clipped points only: their dependence on s is smooth
        spec = symmetric(0.01, bitwidth=4)
        values = np.concatenate([rng.uniform(0.2, 1.0, 4), rng.uniform(-1.0, -0.2, 4)])
        upstream = rng.normal(size=8)

        def loss(scale):
            return float(np.sum(fake_quant_data(values, spec, scale=scale) * upstream))

        expected = numerical_gradient(loss, spec.scale)
        np.testing.assert_allclose(ste_grad_scale(values, spec, upstream), expected, rtol=1e-4)

    def test_per_channel_scale_gradient_shape(self, rng):
        spec = QuantizerSpec('symmetric-signed', 8, 'per-channel', 0, scale=[0.1, 0.2, 0.3])
        grads = ste_grad_scale(rng.normal(size=(3, 5)), spec, np.ones((3, 5)))
        assert grads.shape == (3,)
