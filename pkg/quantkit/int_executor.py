""" Integer reference executor

Weights and activations are integers, accumulation is exact in 64-bit
integers with a checked 32-bit range, bias lives on the accumulator grid
and requantization multiplies by the combined scale in double precision
before rounding half-to-even: the same arithmetic the simulator uses, so
dequantized results agree bit for bit.
"""
import collections
import logging

import numpy as np

from . import tensor as T
from .configuration import ConfigurationError
from .exceptions import ContractError, DimensionError, NumericalError, UnsupportedPatternError
from .graph import (
    INPUT, INT32_MAX, INT32_MIN, LayerKind, PASS_THROUGH, WEIGHTED,
    accumulator_scale, act_site, bias_to_accumulator, pool_scale, weight_site,
)
from .quantizer import IntTensor, _dequantize_data, quantize_int
from .tensor import Tensor


__all__ = [
    'Accumulator', 'RequantParams', 'AccumulatorOverflowError', 'int_linear', 'int_conv2d',
    'asymmetric_expand', 'requantize', 'requantize_shift', 'multiplier_exponent', 'run_int_graph',
    'worst_case_accumulator',
]


class AccumulatorOverflowError(NumericalError):
    """ A partial sum left the signed 32-bit range; `index` locates the first one """

    def __init__(self, message, index=None):
        super(AccumulatorOverflowError, self).__init__(message)
        self.index = index


class Accumulator(object):
    """ Exact integer sums with their combined scale (per channel along `axis`) """

    def __init__(self, values, combined, axis=1, terms=None):
        self.values = np.asarray(values, dtype=np.int64)
        self.combined = np.asarray(combined, dtype=np.float64)
        self.axis = axis
        self.terms = terms or {}
        _check_range(self.values, 'accumulator')

    def broadcast(self, values=None):
        values = self.combined if values is None else np.asarray(values, dtype=np.float64)
        if values.ndim == 0:
            return values
        shape = [1] * self.values.ndim
        shape[self.axis] = values.size
        return values.reshape(shape)

    def to_real(self):
        return self.values.astype(np.float64) * self.broadcast()

    def __repr__(self):
        return '<Accumulator shape={}>'.format(list(self.values.shape))


class RequantParams(object):
    """ Input combined scale(s) and the output spec """

    def __init__(self, combined, out_spec):
        combined = np.asarray(combined, dtype=np.float64)
        if not np.all(np.isfinite(combined)) or np.any(combined <= 0):
            raise ContractError('combined scales must be positive')
        if not out_spec.fitted:
            raise ContractError('requantization needs a fitted output spec')
        self.combined = combined
        self.out_spec = out_spec


def _check_range(values, what):
    if values.size and (values.min() < INT32_MIN or values.max() > INT32_MAX):
        index = tuple(int(i) for i in np.argwhere((values < INT32_MIN) | (values > INT32_MAX))[0])
        raise AccumulatorOverflowError('{} overflows 32 bits at index {}'.format(what, index), index)


def worst_case_accumulator(weight_bits, input_bits, inner):
    """ Largest |sum W_c x_c| possible with centered b-bit operands over `inner` terms """
    return int(inner) * (2 ** weight_bits - 1) * (2 ** input_bits - 1)


def _centered(x_int, spec):
    values = x_int.values if isinstance(x_int, IntTensor) else np.asarray(x_int, dtype=np.int64)
    z = np.rint(spec.zero_point).astype(np.int64)
    if spec.per_channel:
        shape = [1] * values.ndim
        shape[spec.axis] = z.size
        return values - z.reshape(shape)
    return values - z[0]


def _checked_products(products, bias):
    """ Running sums bias + cumsum(products) along the last axis must stay in 32 bits """
    partial = np.cumsum(products, axis=-1) + bias[..., None]
    _check_range(partial, 'partial sum')


def _bound_ok(wc, xc, bias, reduce_axes):
    bound = np.abs(wc).sum(axis=reduce_axes) * (np.abs(xc).max() if xc.size else 0) + np.abs(bias)
    return np.all(bound <= INT32_MAX)


def int_linear(x_int, w_int, bias_int32, specs):
    """ A[n] = b[n] + sum_m (W[n, m] - z_w)(x[m] - z_x), exact and overflow-checked

    `specs` is (input spec, weight spec); `x_int` is [M] or [N, M].
    """
    x_spec, w_spec = specs
    xc = _centered(x_int, x_spec)
    wc = _centered(w_int, w_spec)
    if wc.ndim != 2 or xc.shape[-1] != wc.shape[1]:
        raise DimensionError('int_linear of input {} with weights {}'.format(list(xc.shape), list(wc.shape)))
    single = xc.ndim == 1
    xc = np.atleast_2d(xc)
    bias = np.zeros(wc.shape[0], dtype=np.int64) if bias_int32 is None else np.asarray(bias_int32, dtype=np.int64)
    _check_range(bias, 'bias')

    if not _bound_ok(wc, xc, bias, 1):
        _checked_products(xc[:, None, :] * wc[None, :, :], np.broadcast_to(bias, (xc.shape[0], wc.shape[0])))
    acc = xc @ wc.T + bias
    combined = accumulator_scale(w_spec, x_spec, wc.shape[0])
    return Accumulator(acc[0] if single else acc, combined, axis=0 if single else 1)


def int_conv2d(x_int, w_int, bias_int32, specs, stride=1, padding=0, groups=1):
    """ Grouped integer convolution of centered operands, zero-padded on the real zero """
    x_spec, w_spec = specs
    xc = _centered(x_int, x_spec)
    wc = _centered(w_int, w_spec)
    bias = np.asarray(bias_int32, dtype=np.int64)
    _check_range(bias, 'bias')
    acc, (_, cols, wg) = T.conv2d_data(xc, wc, stride, padding, groups)

    if not _bound_ok(wc, xc, bias, (1, 2, 3)):
        for sample in range(cols.shape[0]):
            products = np.einsum('gchwij,gkcij->gkhwcij', cols[sample], wg)
            g, k, h, w = products.shape[:4]
            flat = products.reshape(g * k, h, w, -1)
            _checked_products(flat, np.broadcast_to(bias.reshape(-1, 1, 1), (g * k, h, w)))
    acc = acc + bias.reshape(1, -1, 1, 1)
    return Accumulator(acc, accumulator_scale(w_spec, x_spec, wc.shape[0]), axis=1)


def asymmetric_expand(w_int, x_int, specs, bias_int32=None):
    """ sum (W - z_w)(x - z_x) = sum W x - z_w sum x - z_x sum W + M z_w z_x

    The last two terms depend on weights only and are folded into the bias;
    the second vanishes for z_w = 0.
    """
    x_spec, w_spec = specs
    w = (w_int.values if isinstance(w_int, IntTensor) else np.asarray(w_int)).astype(np.int64)
    x = np.atleast_2d((x_int.values if isinstance(x_int, IntTensor) else np.asarray(x_int)).astype(np.int64))
    if w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError('asymmetric_expand of input {} with weights {}'.format(list(x.shape), list(w.shape)))
    inner = w.shape[1]
    z_w = np.rint(w_spec.zero_point).astype(np.int64)
    z_w = z_w if w_spec.per_channel else np.repeat(z_w, w.shape[0])
    z_x = int(np.rint(x_spec.zero_point[0]))
    bias = np.zeros(w.shape[0], dtype=np.int64) if bias_int32 is None else np.asarray(bias_int32, dtype=np.int64)

    product = x @ w.T
    input_term = -np.outer(x.sum(axis=1), z_w)
    folded_bias = bias - z_x * w.sum(axis=1) + inner * z_w * z_x
    _check_range(product, 'weight-input product')
    _check_range(folded_bias, 'folded bias')
    acc = product + input_term + folded_bias
    combined = accumulator_scale(w_spec, x_spec, w.shape[0])
    terms = {'product': product, 'input_term': input_term, 'folded_bias': folded_bias}
    return Accumulator(acc, combined, axis=1, terms=terms)


def requantize(acc, rq):
    """ clamp(round(A s_w s_x / s_out) + z_out; grid), round half to even """
    real = acc.values.astype(np.float64) * acc.broadcast(rq.combined)
    return quantize_int(real, rq.out_spec)


def multiplier_exponent(combined, out_scale):
    """ m with combined / out_scale == 2 ** m, for power-of-two scales """
    ratio = np.asarray(combined, dtype=np.float64) / float(out_scale)
    exponent = np.log2(ratio)
    if np.any(exponent != np.rint(exponent)):
        raise ContractError('requantization multiplier is not a power of two')
    return np.rint(exponent).astype(np.int64)


def _round_shift(values, shift):
    """ values / 2 ** shift rounded half to even, shift > 0 """
    quotient = values >> shift
    remainder = values - (quotient << shift)
    half = np.int64(1) << (shift - 1)
    up = (remainder > half) | ((remainder == half) & (quotient % 2 == 1))
    return quotient + up


def requantize_shift(acc, out_spec):
    """ Requantize with a bit shift; all scales must be powers of two """
    exponent = acc.broadcast(multiplier_exponent(acc.combined, out_spec.scale[0])).astype(np.int64)
    exponent = np.broadcast_to(exponent, acc.values.shape)
    values = acc.values
    left = values << np.maximum(exponent, 0)
    right = np.where(exponent < 0, _round_shift(values, np.maximum(-exponent, 1)), 0)
    q = np.where(exponent >= 0, left, right) + int(np.rint(out_spec.zero_point[0]))
    lo, hi = out_spec.storage_limits
    return IntTensor(np.clip(q, lo, hi), out_spec.bitwidth, out_spec.scheme.signed)


IntValue = collections.namedtuple('IntValue', 'q spec')
PendingAcc = collections.namedtuple('PendingAcc', 'acc clamps')
PendingReal = collections.namedtuple('PendingReal', 'values')


def _clip_point(layer, ndim):
    ceiling = layer.params.get('clip', layer.attrs.get('clip', 6.0))
    ceiling = np.asarray(ceiling, dtype=np.float64)
    if ceiling.ndim == 0:
        return ceiling
    shape = [1] * ndim
    shape[1] = ceiling.size
    return ceiling.reshape(shape)


def _dequantized(value):
    return _dequantize_data(value.q.values.astype(np.float64), value.spec)


class IntGraphRunner(object):
    """ Walks a frozen graph with integer values """

    def __init__(self, graph):
        self.graph = graph
        self.check()

    def check(self):
        graph = self.graph
        unsupported = [node.name for node in graph.nodes if node.kind is LayerKind.BATCHNORM]
        if unsupported:
            raise UnsupportedPatternError('integer execution needs folded batch norms', unsupported)
        if not graph.quantizers:
            raise ConfigurationError('integer execution needs attached quantizers')
        for site, spec in graph.quantizers.items():
            if spec is None or not spec.fitted or not spec.frozen:
                raise ConfigurationError('quantizer {} is not fitted and frozen'.format(site))

    def spec(self, site):
        return self.graph.spec(site)

    def settle(self, site, value):
        """ Bring a pending value onto the grid of `site` """
        spec = self.spec(site)
        if isinstance(value, IntValue):
            return IntValue(quantize_int(_dequantized(value), spec), spec)
        if isinstance(value, PendingReal):
            return IntValue(quantize_int(value.values, spec), spec)

        q = requantize(value.acc, RequantParams(value.acc.combined, spec)).values
        z = int(np.rint(spec.zero_point[0]))
        for kind, ceiling in value.clamps:
            if kind == 'relu':
                q = np.maximum(q, z)
            else:
                q = np.minimum(np.maximum(q, z), np.rint(ceiling / spec.scale[0]) + z)
        return IntValue(IntTensor(q, spec.bitwidth, spec.scheme.signed), spec)

    def run(self, x):
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.graph.input_shape:
            raise DimensionError('input of shape {} for graph expecting [N] + {}'.format(
                list(x.shape), list(self.graph.input_shape)))
        spec = self.spec(act_site(INPUT))
        values = {INPUT: IntValue(quantize_int(x, spec), spec)}

        for node in self.graph.nodes:
            out = self.evaluate(node, [values[source] for source in node.inputs])
            site = act_site(node.name)
            if node.kind not in PASS_THROUGH and site in self.graph.quantizers:
                out = self.settle(site, out)
            values[node.name] = out

        result = values[self.graph.output]
        if not isinstance(result, IntValue):
            raise ContractError('graph output {} is not quantized'.format(self.graph.output))
        return Tensor.from_op(_dequantized(result))

    def evaluate(self, node, inputs):
        kind = node.kind
        layer = node.layer
        attrs = layer.attrs
        x = inputs[0]

        if kind in WEIGHTED:
            w_spec = self.spec(weight_site(node.name))
            w_int = quantize_int(layer.params['weight'], w_spec)
            x_spec = x.spec
            combined = accumulator_scale(w_spec, x_spec, w_int.shape[0])
            bias = bias_to_accumulator(layer.params['bias'], combined).astype(np.int64)
            if kind is LayerKind.LINEAR:
                acc = int_linear(x.q, w_int, bias, (x_spec, w_spec))
            else:
                groups = x.q.shape[1] if kind is LayerKind.DEPTHWISE_CONV2D else 1
                acc = int_conv2d(x.q, w_int, bias, (x_spec, w_spec),
                                 attrs.get('stride', 1), attrs.get('padding', 0), groups)
            return PendingAcc(acc, ())

        if kind in (LayerKind.RELU, LayerKind.RELU6):
            if isinstance(x, PendingAcc):
                if kind is LayerKind.RELU:
                    clamp = ('relu', None)
                else:
                    clamp = ('relu6', _clip_point(layer, x.acc.values.ndim))
                return PendingAcc(x.acc, x.clamps + (clamp,))
            real = _dequantized(x) if isinstance(x, IntValue) else x.values
            if kind is LayerKind.RELU:
                return PendingReal(np.maximum(real, 0.0))
            return PendingReal(np.minimum(np.maximum(real, np.asarray(0.0)), _clip_point(layer, real.ndim)))

        if kind is LayerKind.ADD:
            sites = set(self.graph.canonical(self._grid_site(source)) for source in node.inputs)
            if all(isinstance(value, IntValue) for value in inputs) and len(sites) == 1 and None not in sites:
                spec = inputs[0].spec
                acc = sum(_centered(value.q, spec) for value in inputs)
                return PendingAcc(Accumulator(acc, spec.scale[0]), ())
            total = _dequantized(inputs[0])
            for value in inputs[1:]:
                total = total + _dequantized(value)
            return PendingReal(total)

        if kind is LayerKind.CONCAT:
            return PendingReal(np.concatenate([_dequantized(value) for value in inputs], axis=attrs.get('axis', 1)))

        if kind is LayerKind.AVGPOOL:
            kernel = attrs.get('kernel') or x.q.shape[2]
            stride = attrs.get('stride') or kernel
            windows = T._windows(_centered(x.q, x.spec), kernel, kernel, stride)
            acc = windows.sum(axis=(-2, -1))
            return PendingAcc(Accumulator(acc, pool_scale(x.spec.scale[0], kernel * kernel)), ())

        if kind is LayerKind.MAXPOOL:
            kernel = attrs.get('kernel', 2)
            stride = attrs.get('stride') or kernel
            windows = T._windows(x.q.values, kernel, kernel, stride)
            return IntValue(IntTensor(windows.max(axis=(-2, -1)), x.q.bitwidth, x.q.signed), x.spec)

        if kind is LayerKind.FLATTEN:
            q = x.q.values.reshape(x.q.shape[0], -1)
            return IntValue(IntTensor(q, x.q.bitwidth, x.q.signed), x.spec)

        raise UnsupportedPatternError('no integer kernel for {}'.format(kind.value), [node.name])

    def _grid_site(self, name):
        """ Site whose grid the output of `name` lies on, through pass-through layers """
        while name != INPUT and self.graph.node(name).kind in PASS_THROUGH:
            name = self.graph.node(name).inputs[0]
        site = act_site(name)
        return site if site in self.graph.quantizers else None


def run_int_graph(graph, x):
    """ Integer execution of a frozen graph, returning the dequantized output """
    result = IntGraphRunner(graph).run(x)
    logging.debug('Integer run of {} nodes done'.format(len(graph.nodes)))
    return result
