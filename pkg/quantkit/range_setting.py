""" Quantization ranges: min-max, MSE, cross-entropy and BN-based criteria """
import collections
import logging
from enum import Enum

import numpy as np
from scipy import special, stats

from .exceptions import ContractError
from .graph import INPUT, LayerKind, WEIGHTED, act_site, forward_sim_quant, run_capture, weight_site
from .quantizer import QuantizerSpec, Scheme, fake_quant_data, power_of_two
from .tensor import Tensor


__all__ = [
    'RangeMethod', 'ActivationStats', 'range_minmax', 'range_mse', 'range_cross_entropy',
    'range_bn', 'spec_from_range', 'fit_spec', 'per_channel_ranges', 'candidate_fractions',
    'propagate_moments', 'fit_weight_ranges', 'fit_activation_ranges',
]


CANDIDATES = 100
# candidate i clips to (1 - i / SPREAD) of the min-max range
SPREAD = 120.0
SWEEPS = 2

ALL_ZERO_SCALE = 1e-8
DEGENERATE_WIDTH = 1e-8


class RangeKind(Enum):
    MINMAX = 'minmax'
    MSE = 'mse'
    CROSS_ENTROPY = 'xent'
    BN = 'bn'


class RangeMethod(object):
    """ A range criterion; `alpha` only applies to the BN-based one """

    def __init__(self, kind, alpha=6.0):
        self.kind = RangeKind(kind)
        if self.kind is RangeKind.BN and not alpha > 0:
            raise ContractError('BN-based range setting needs alpha > 0, got {}'.format(alpha))
        self.alpha = float(alpha)

    @classmethod
    def parse(cls, name, alpha=6.0):
        """ Configuration names: minmax, mse, bn, xent-last """
        return cls('xent' if name == 'xent-last' else name, alpha)

    def __eq__(self, other):
        return isinstance(other, RangeMethod) and (self.kind, self.alpha) == (other.kind, other.alpha)

    __hash__ = None

    def __repr__(self):
        if self.kind is RangeKind.BN:
            return '<RangeMethod bn alpha={}>'.format(self.alpha)
        return '<RangeMethod {}>'.format(self.kind.value)


class ActivationStats(object):
    """ Full activations seen at each site during calibration

    Arrays are kept whole (no histograms); `values(site)` concatenates the
    batches along the batch axis.
    """

    def __init__(self, sites=None):
        self.sites = None if sites is None else set(sites)
        self._batches = collections.OrderedDict()

    def observe(self, site, values):
        if self.sites is not None and site not in self.sites:
            return
        self._batches.setdefault(site, []).append(np.array(values, dtype=np.float64))

    def count(self, site):
        return len(self._batches.get(site, []))

    def observed(self):
        return list(self._batches)

    def values(self, site):
        if not self.count(site):
            raise ContractError('no observations at site {} (run calibration first)'.format(site))
        return np.concatenate(self._batches[site], axis=0)

    def union(self, sites):
        """ Flattened observations of several sites """
        return np.concatenate([self.values(site).reshape(-1) for site in sites])


def _nonempty(values, what='tensor'):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError('range setting on an empty {}'.format(what))
    return values


def range_minmax(values):
    values = _nonempty(values)
    return float(values.min()), float(values.max())


def candidate_fractions():
    return 1.0 - np.arange(CANDIDATES) / SPREAD


def _include_zero(q_min, q_max):
    return min(q_min, 0.0), max(q_max, 0.0)


def _search(q_min, q_max, scheme, bitwidth, objective):
    """ Grid search over clipped ranges, starting from (and never worse than) min-max """
    scheme = Scheme(scheme)
    q_min, q_max = _include_zero(q_min, q_max)
    fractions = candidate_fractions()
    best = (q_min, q_max)
    best_loss = objective(*best)

    if not scheme.has_zero_point:
        for fraction in fractions[1:]:
            loss = objective(q_min * fraction, q_max * fraction)
            if loss < best_loss:
                best, best_loss = (q_min * fraction, q_max * fraction), loss
        return best

    low, high = best
    for _ in range(SWEEPS):
        for fraction in fractions:
            loss = objective(low, q_max * fraction)
            if loss < best_loss:
                high, best_loss = q_max * fraction, loss
        for fraction in fractions:
            loss = objective(q_min * fraction, high)
            if loss < best_loss:
                low, best_loss = q_min * fraction, loss
    return low, high


def _degenerate(q_min, q_max):
    return q_max - q_min <= 0


def range_mse(values, scheme, bitwidth):
    """ Range minimizing ||V - V^||^2 over the candidate grid """
    values = _nonempty(values)
    q_min, q_max = range_minmax(values)

    def objective(low, high):
        if _degenerate(low, high) and (low, high) != (0.0, 0.0):
            return np.inf
        spec = spec_from_range(low, high, scheme, bitwidth)
        return float(np.sum((values - fake_quant_data(values, spec)) ** 2))

    return _search(q_min, q_max, scheme, bitwidth, objective)


def _logit_matrix(logit_samples):
    if logit_samples is None or len(logit_samples) == 0:
        raise ContractError('cross-entropy range setting needs at least one logit sample')
    rows = [
        np.atleast_2d(np.asarray(sample.data if isinstance(sample, Tensor) else sample, dtype=np.float64))
        for sample in logit_samples
    ]
    return _nonempty(np.concatenate(rows, axis=0), 'logit sample list')


def mean_cross_entropy(logits, quantized):
    """ Mean over samples of H(softmax(v), softmax(v^)) """
    p = special.softmax(logits, axis=-1)
    log_q = special.log_softmax(quantized, axis=-1)
    return float(np.mean(-np.sum(p * log_q, axis=-1)))


def range_cross_entropy(logit_samples, scheme, bitwidth):
    """ Range minimizing the softmax cross-entropy between original and quantized logits """
    logits = _logit_matrix(logit_samples)
    q_min, q_max = range_minmax(logits)

    def objective(low, high):
        if _degenerate(low, high) and (low, high) != (0.0, 0.0):
            return np.inf
        spec = spec_from_range(low, high, scheme, bitwidth)
        return mean_cross_entropy(logits, fake_quant_data(logits, spec))

    return _search(q_min, q_max, scheme, bitwidth, objective)


def range_bn(beta, gamma, alpha=6.0):
    """ (min(beta - alpha |gamma|), max(beta + alpha |gamma|)), data-free """
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    if beta.shape != gamma.shape:
        raise ContractError('beta and gamma lengths differ: {} vs {}'.format(beta.size, gamma.size))
    if not alpha > 0:
        raise ContractError('alpha must be positive')
    _nonempty(beta, 'batch norm')
    spread = alpha * np.abs(gamma)
    return float(np.min(beta - spread)), float(np.max(beta + spread))


def _scale_and_zero_point(q_min, q_max, scheme, bitwidth):
    if q_min == 0.0 and q_max == 0.0:
        return ALL_ZERO_SCALE, 0.0

    q_min, q_max = _include_zero(q_min, q_max)
    if q_max == q_min:
        q_min, q_max = min(0.0, q_min), max(q_min + DEGENERATE_WIDTH, 0.0)
    if q_max == q_min:
        raise ContractError('degenerate range ({}, {})'.format(q_min, q_max))

    if scheme is Scheme.ASYMMETRIC:
        levels = 2 ** bitwidth - 1
        scale = (q_max - q_min) / levels
        return scale, float(np.clip(np.rint(-q_min / scale), 0, levels))
    if scheme is Scheme.SYMMETRIC_UNSIGNED:
        scale = q_max / (2 ** bitwidth - 1)
        return (scale if scale > 0 else ALL_ZERO_SCALE), 0.0
    half = 2 ** (bitwidth - 1)
    scale = max(abs(q_min) / half, q_max / (half - 1))
    if scheme is Scheme.POWER_OF_TWO:
        scale = float(power_of_two(scale))
    return scale, 0.0


def spec_from_range(q_min, q_max, scheme, bitwidth, granularity='per-tensor', axis=0):
    """ Invert the grid-limit formulas; arrays of ranges give a per-channel spec

    Zero is always included in the range; a degenerate range is widened to
    (min(0, q_min), max(q_min + 1e-8, 0)) and an all-zero tensor gets s = 1e-8.
    """
    scheme = Scheme(scheme)
    low = np.atleast_1d(np.asarray(q_min, dtype=np.float64))
    high = np.atleast_1d(np.asarray(q_max, dtype=np.float64))
    if low.shape != high.shape:
        raise ContractError('{} lower and {} upper range limits'.format(low.size, high.size))
    pairs = [_scale_and_zero_point(float(lo), float(hi), scheme, bitwidth) for lo, hi in zip(low, high)]
    scale = np.array([s for s, _ in pairs])
    zero_point = np.array([z for _, z in pairs])
    if granularity == 'per-tensor' and scale.size != 1:
        raise ContractError('per-tensor spec from {} ranges'.format(scale.size))
    return QuantizerSpec(scheme, bitwidth, granularity, axis, scale, zero_point)


def per_channel_ranges(values, axis, method, *args):
    """ Apply a per-tensor range function to every slice along `axis` """
    values = _nonempty(values)
    slices = np.moveaxis(values, axis, 0)
    ranges = [method(channel, *args) for channel in slices]
    return np.array([r[0] for r in ranges]), np.array([r[1] for r in ranges])


def _refine_power_of_two(values, spec):
    """ Compare the rounded exponent with its neighbours by MSE """
    if spec.scheme is not Scheme.POWER_OF_TWO or values is None:
        return spec
    scales = spec.scale.copy()
    slices = np.moveaxis(values, spec.axis, 0) if spec.per_channel else [values]
    for index, channel in enumerate(slices):
        best, best_loss = scales[index], None
        for factor in (0.5, 1.0, 2.0):
            trial = QuantizerSpec(spec.scheme, spec.bitwidth, scale=scales[index] * factor)
            loss = float(np.sum((channel - fake_quant_data(channel, trial)) ** 2))
            if best_loss is None or loss < best_loss:
                best, best_loss = scales[index] * factor, loss
        scales[index] = best
    return spec.with_params(scales)


def fit_spec(values, template, method, logit_samples=None):
    """ Fit `template` (an unfitted spec) to `values` with `method` """
    method = method if isinstance(method, RangeMethod) else RangeMethod.parse(method)
    scheme, bitwidth = template.scheme, template.bitwidth

    if method.kind is RangeKind.MINMAX:
        function, args = range_minmax, ()
    elif method.kind is RangeKind.MSE:
        function, args = range_mse, (scheme, bitwidth)
    elif method.kind is RangeKind.CROSS_ENTROPY:
        if template.per_channel:
            raise ContractError('cross-entropy range setting is per-tensor only')
        q_min, q_max = range_cross_entropy(logit_samples if logit_samples is not None else [values], scheme, bitwidth)
        return _refine_power_of_two(values, spec_from_range(q_min, q_max, scheme, bitwidth))
    else:
        raise ContractError('BN-based ranges come from batch norm parameters, not data')

    if template.per_channel:
        q_min, q_max = per_channel_ranges(values, template.axis, function, *args)
    else:
        q_min, q_max = function(values, *args)
    spec = spec_from_range(q_min, q_max, scheme, bitwidth, template.granularity.value, template.axis or 0)
    return _refine_power_of_two(values, spec)


def fit_weight_ranges(graph, method):
    """ Fit every weight quantizer from its layer's weights """
    result = graph.clone()
    for node in result.nodes:
        site = weight_site(node.name)
        if node.kind not in WEIGHTED or site not in result.quantizers:
            continue
        template = result.quantizers[site]
        result.quantizers[site] = fit_spec(node.layer.params['weight'], template, method)
    result.record('fit_weight_ranges', method=str(method))
    return result


# Data-free statistics


def _clipped_normal(mean, std):
    """ Mean and variance of relu(N(mean, std^2)) """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(std > 0, mean / np.where(std > 0, std, 1.0), 0.0)
    cdf = stats.norm.cdf(ratio)
    pdf = stats.norm.pdf(ratio)
    first = std * pdf + mean * cdf
    second = (mean ** 2 + std ** 2) * cdf + mean * std * pdf
    deterministic = std <= 0
    first = np.where(deterministic, np.maximum(mean, 0.0), first)
    second = np.where(deterministic, np.maximum(mean, 0.0) ** 2, second)
    return first, np.maximum(second - first ** 2, 0.0)


def _input_moments(graph):
    metadata = graph.metadata
    channels = graph.input_shape[0]
    if 'input_mean' in metadata or 'input_std' in metadata:
        mean = np.broadcast_to(np.asarray(metadata.get('input_mean', 0.0), dtype=np.float64), (channels,))
        std = np.broadcast_to(np.asarray(metadata.get('input_std', 1.0), dtype=np.float64), (channels,))
        return mean.copy(), std.copy() ** 2
    low, high = metadata.get('input_range', (-1.0, 1.0))
    return np.full(channels, (low + high) / 2.0), np.full(channels, (high - low) ** 2 / 12.0)


def propagate_moments(graph):
    """ Per-channel (mean, variance) of every node output, from parameters only

    Batch-normalized layers (folded, with a `bn` annotation, or explicit) reset
    the statistics to (beta, gamma^2); other layers propagate them assuming
    independent inputs, ReLU through clipped-normal moments.
    Returns {node: (mean, var, pre_activation)} with `pre_activation` the
    moments entering the node for activation layers.
    """
    shapes = {}
    executor = run_capture(graph, np.zeros((1,) + graph.input_shape), quantize=False)
    for name, value in executor.values.items():
        shapes[name] = value.shape

    moments = {INPUT: _input_moments(graph) + (None,)}
    for node in graph.nodes:
        kind = node.kind
        layer = node.layer
        source = moments[node.inputs[0]]
        mean, var = source[0], source[1]

        if kind in WEIGHTED:
            weight = layer.params['weight']
            if kind is LayerKind.LINEAR:
                out_mean = weight @ mean + layer.params['bias']
                out_var = (weight ** 2) @ var
            elif kind is LayerKind.CONV2D:
                out_mean = np.einsum('kcij,c->k', weight, mean) + layer.params['bias']
                out_var = np.einsum('kcij,c->k', weight ** 2, var)
            else:
                out_mean = weight.sum(axis=(1, 2, 3)) * mean + layer.params['bias']
                out_var = (weight ** 2).sum(axis=(1, 2, 3)) * var
            bn = layer.annotations.get('bn')
            if bn is not None:
                out_mean = np.asarray(bn['beta'], dtype=np.float64)
                out_var = np.asarray(bn['gamma'], dtype=np.float64) ** 2
            moments[node.name] = (out_mean, out_var, None)
        elif kind is LayerKind.BATCHNORM:
            moments[node.name] = (layer.params['beta'].copy(), layer.params['gamma'] ** 2, None)
        elif kind in (LayerKind.RELU, LayerKind.RELU6):
            out_mean, out_var = _clipped_normal(mean, np.sqrt(var))
            if kind is LayerKind.RELU6:
                out_mean = np.minimum(out_mean, layer.params.get('clip', layer.attrs.get('clip', 6.0)))
            moments[node.name] = (out_mean, out_var, (mean, var))
        elif kind is LayerKind.ADD:
            total_mean = sum(moments[s][0] for s in node.inputs)
            total_var = sum(moments[s][1] for s in node.inputs)
            moments[node.name] = (total_mean, total_var, None)
        elif kind is LayerKind.CONCAT:
            moments[node.name] = (
                np.concatenate([moments[s][0] for s in node.inputs]),
                np.concatenate([moments[s][1] for s in node.inputs]), None,
            )
        elif kind is LayerKind.FLATTEN:
            spatial = int(np.prod(shapes[node.inputs[0]][2:])) if len(shapes[node.inputs[0]]) > 2 else 1
            moments[node.name] = (np.repeat(mean, spatial), np.repeat(var, spatial), None)
        else:
            moments[node.name] = (mean, var, None)
    return moments


def _moment_range(mean, var, alpha):
    return range_bn(mean, np.sqrt(var), alpha)


def _site_range_from_moments(graph, node_name, moments, alpha):
    mean, var, pre = moments[node_name]
    if node_name == INPUT:
        low, high = graph.metadata.get('input_range', _moment_range(mean, var, alpha))
        return float(low), float(high)
    node = graph.node(node_name)
    if node.kind in (LayerKind.RELU, LayerKind.RELU6):
        low, high = _moment_range(pre[0], pre[1], alpha)
        low, high = max(low, 0.0), max(high, 0.0)
        if node.kind is LayerKind.RELU6:
            ceiling = float(np.max(node.layer.params.get('clip', node.layer.attrs.get('clip', 6.0))))
            low, high = min(low, ceiling), min(high, ceiling)
        return low, high
    return _moment_range(mean, var, alpha)


def fit_activation_ranges(graph, method, calibration=None, alpha=6.0, classifier=False):
    """ Fit every activation quantizer

    With calibration batches the graph runs with weight quantizers active and
    activation quantizers bypassed, observing every activation site; the
    `xent-last` method uses cross-entropy at the output site of a classifier
    and MSE elsewhere. Without data (or with method `bn`) the ranges come from
    batch norm statistics and propagated moments.
    """
    method = method if isinstance(method, RangeMethod) else RangeMethod.parse(method, alpha)
    result = graph.clone()
    canonicals = []
    for site in result.activation_sites():
        canonical = result.canonical(site)
        if canonical not in canonicals:
            canonicals.append(canonical)

    if method.kind is RangeKind.BN or calibration is None:
        moments = propagate_moments(result)
        for canonical in canonicals:
            ranges = [_site_range_from_moments(result, site[2:], moments, method.alpha)
                      for site in result.tied_members(canonical)]
            low = min(r[0] for r in ranges)
            high = max(r[1] for r in ranges)
            template = result.quantizers[canonical]
            result.set_spec(canonical, spec_from_range(low, high, template.scheme, template.bitwidth))
        result.record('fit_activation_ranges', method='bn', alpha=method.alpha, data_free=True)
        logging.info('Set {} activation ranges data-free (alpha={})'.format(len(canonicals), method.alpha))
        return result

    observer = ActivationStats(result.activation_sites())
    for batch in calibration:
        forward_sim_quant(result, batch, active=result.weight_sites(), strict=False, observer=observer)

    output_site = act_site(result.output)
    for canonical in canonicals:
        members = result.tied_members(canonical)
        template = result.quantizers[canonical]
        if method.kind is RangeKind.CROSS_ENTROPY:
            if classifier and output_site in members:
                spec = fit_spec(observer.values(output_site), template, method)
            else:
                spec = fit_spec(observer.union(members), template, RangeMethod('mse'))
        else:
            spec = fit_spec(observer.union(members), template, method)
        result.set_spec(canonical, spec)

    result.record('fit_activation_ranges', method=method.kind.value, batches=len(calibration))
    logging.info('Set {} activation ranges from {} calibration batches'.format(len(canonicals), len(calibration)))
    return result
