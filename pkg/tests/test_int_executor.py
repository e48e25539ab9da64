import numpy as np
import pytest

from quantkit.configuration import Configuration, ConfigurationError
from quantkit.exceptions import ContractError, UnsupportedPatternError
from quantkit.graph import attach_quantizers, fold_bn, forward_sim_quant
from quantkit.int_executor import (
    Accumulator, AccumulatorOverflowError, RequantParams, asymmetric_expand, int_conv2d, int_linear,
    multiplier_exponent, requantize, requantize_shift, run_int_graph, worst_case_accumulator,
)
from quantkit.models import build
from quantkit.quantizer import QuantizerSpec
from quantkit.range_setting import fit_activation_ranges, fit_weight_ranges
from quantkit.transforms import apply_cle


def unit(scheme='symmetric-signed', zero_point=0, bitwidth=8):
    return QuantizerSpec(scheme, bitwidth, scale=1.0, zero_point=zero_point)


def quantized(graph, calibration, **settings):
    config = Configuration(**settings)
    graph = fit_weight_ranges(attach_quantizers(graph, config), config.weight_range)
    return fit_activation_ranges(graph, config.act_range, calibration).freeze()


class TestKernels(object):

    def test_linear_hand_case(self):
        acc = int_linear(np.array([5, 6]), np.array([[1, 2], [3, 4]]), None, (unit(), unit()))
        assert acc.values.tolist() == [17, 39]
        assert acc.axis == 0

    def test_zero_input_gives_bias(self):
        x_spec = unit('asymmetric-unsigned', zero_point=7)
        acc = int_linear(np.array([[7, 7, 7]]), np.array([[1, -2, 3], [4, 5, -6]]), [11, -3], (x_spec, unit()))
        assert acc.values.tolist() == [[11, -3]]

    def test_asymmetric_expansion(self, rng):
        x_spec = QuantizerSpec('asymmetric-unsigned', 8, scale=0.1, zero_point=37)
        w_spec = QuantizerSpec('asymmetric-unsigned', 8, scale=0.05, zero_point=120)
        x = rng.integers(0, 256, (4, 6))
        w = rng.integers(0, 256, (3, 6))
        bias = rng.integers(-1000, 1000, 3)
        direct = int_linear(x, w, bias, (x_spec, w_spec))
        expanded = asymmetric_expand(w, x, (x_spec, w_spec), bias)
        np.testing.assert_array_equal(expanded.values, direct.values)
        terms = expanded.terms
        np.testing.assert_array_equal(terms['product'] + terms['input_term'] + terms['folded_bias'], direct.values)

    def test_symmetric_weights_drop_input_term(self, rng):
        x_spec = QuantizerSpec('asymmetric-unsigned', 8, scale=0.1, zero_point=37)
        expanded = asymmetric_expand(rng.integers(-128, 128, (3, 5)), rng.integers(0, 256, (2, 5)),
                                     (x_spec, unit()))
        assert not np.any(expanded.terms['input_term'])

    def test_conv_matches_linear(self, rng):
        x = rng.integers(0, 256, (2, 3, 1, 1))
        w = rng.integers(-128, 128, (4, 3, 1, 1))
        x_spec = unit('asymmetric-unsigned', zero_point=128)
        conv = int_conv2d(x, w, np.zeros(4), (x_spec, unit()))
        dense = int_linear(x.reshape(2, 3), w.reshape(4, 3), None, (x_spec, unit()))
        np.testing.assert_array_equal(conv.values.reshape(2, 4), dense.values)

    def test_overflow(self):
        with pytest.raises(AccumulatorOverflowError) as error:
            int_linear(np.array([[2 ** 20, 2 ** 20]]), np.array([[2 ** 11, 0]]), None, (unit(), unit()))
        assert error.value.index == (0, 0, 0)

    def test_intermediate_overflow(self):
        # the total is 0 but the first partial sum is 2 ** 31
        with pytest.raises(AccumulatorOverflowError):
            int_linear(np.array([[2 ** 20, 2 ** 20]]), np.array([[2 ** 11, -2 ** 11]]), None, (unit(), unit()))

    def test_worst_case(self):
        assert worst_case_accumulator(8, 8, 100) == 100 * 255 * 255
        assert worst_case_accumulator(8, 8, 34000) > 2 ** 31


class TestRequantize(object):

    def test_hand_case(self):
        out = QuantizerSpec('symmetric-signed', 8, scale=0.01)
        assert requantize(Accumulator([157], 1e-4, axis=0), RequantParams(1e-4, out)).values.tolist() == [2]

    def test_zero_point_and_clamp(self):
        out = QuantizerSpec('asymmetric-unsigned', 8, scale=0.1, zero_point=10)
        q = requantize(Accumulator([0, 100000, -100000], 1e-3, axis=0), RequantParams(1e-3, out))
        assert q.values.tolist() == [10, 255, 0]

    def test_shift_matches_multiply(self):
        out = QuantizerSpec('symmetric-signed', 8, scale=1.0)
        acc = Accumulator([6, 10, -6, 40, -1000], 0.25, axis=0)
        shifted = requantize_shift(acc, out)
        assert shifted.values.tolist() == [2, 2, -2, 10, -128]
        assert shifted.values.tolist() == requantize(acc, RequantParams(0.25, out)).values.tolist()

    def test_per_channel_real_values(self):
        acc = Accumulator([[4, 4], [-2, 6]], [0.5, 0.25], axis=1)
        np.testing.assert_array_equal(acc.to_real(), [[2.0, 1.0], [-1.0, 1.5]])

    def test_multiplier_must_be_power_of_two(self):
        assert multiplier_exponent(0.25, 1.0).tolist() == -2
        with pytest.raises(ContractError):
            multiplier_exponent(0.3, 1.0)


class TestGraphExecution(object):

    def check_bit_exact(self, graph, x):
        np.testing.assert_array_equal(run_int_graph(graph, x).data, forward_sim_quant(graph, x).data)

    def test_mlp(self, mlp_graph, calibration, rng):
        graph = quantized(fold_bn(mlp_graph), calibration)
        self.check_bit_exact(graph, rng.normal(size=(50, 2)))

    def test_convnet(self, digits_data):
        inputs = digits_data[0]
        graph = quantized(fold_bn(build('dw_convnet', seed=0)), [inputs[:64]])
        self.check_bit_exact(graph, inputs[64:])

    def test_convnet_per_channel_after_cle(self, digits_data):
        inputs = digits_data[0]
        graph = apply_cle(fold_bn(build('dw_convnet', seed=0)))
        graph = quantized(graph, [inputs[:64]], environment='W8A8PerChannel')
        self.check_bit_exact(graph, inputs[64:])

    def test_concat_and_maxpool(self, digits_data):
        inputs = digits_data[0]
        graph = quantized(build('branch_net', seed=0), [inputs[:64]], environment='W4A8')
        self.check_bit_exact(graph, inputs[64:])

    @pytest.mark.parametrize('add_policy', ['requantize', 'tied'])
    def test_residual(self, moons, add_policy):
        inputs = moons[0]
        graph = quantized(build('residual_mlp', seed=0), [inputs[:128]], add_policy=add_policy)
        self.check_bit_exact(graph, inputs[128:])

    @pytest.mark.parametrize('seed', range(5))
    def test_random_mlps(self, seed):
        rng = np.random.default_rng(seed)
        hidden = tuple(int(h) for h in rng.integers(2, 12, rng.integers(1, 4)))
        environment = ['W8A8', 'W4A8', 'W4A4', 'W8A8PerChannel'][seed % 4]
        graph = fold_bn(build('mlp', hidden=hidden, seed=seed))
        inputs = rng.normal(0.0, 2.0, (96, 2))
        graph = quantized(graph, [inputs[:48]], environment=environment, act_range='minmax')
        self.check_bit_exact(graph, inputs)

    def test_unfolded_batch_norm(self, mlp_graph, calibration):
        graph = quantized(mlp_graph, calibration, environment='W8A8PerChannel')
        with pytest.raises(UnsupportedPatternError) as error:
            run_int_graph(graph, calibration[0])
        assert error.value.nodes == ['bn0', 'bn1']

    def test_unfitted(self, mlp_graph, calibration):
        graph = attach_quantizers(fold_bn(mlp_graph), Configuration())
        with pytest.raises(ConfigurationError):
            run_int_graph(graph, calibration[0])
