""" Data-light pre-processing: cross-layer equalization, bias absorption, bias correction """
import collections
import logging

import numpy as np
from scipy import stats

from .configuration import ConfigurationError
from .exceptions import ContractError
from .graph import (
    ACTIVATIONS, LayerKind, WEIGHTED, forward_fp, run_capture, weight_site,
)
from .quantizer import fake_quant_data


__all__ = [
    'EqualizablePair', 'find_cle_pairs', 'cle_scales', 'channel_ranges', 'equalize_pair',
    'apply_cle', 'absorb_bias', 'bias_correct_empirical', 'bias_correct_analytic',
    'clipped_normal_mean', 'CLE_TOLERANCE', 'CLE_MAX_SWEEPS',
]


CLE_TOLERANCE = 1e-4
CLE_MAX_SWEEPS = 20
ABSORB_SIGMAS = 3.0


class EqualizablePair(collections.namedtuple('EqualizablePair', 'first activation second')):
    """ Names of two weighted layers and the ReLU/ReLU6 between them """


def _output_axes(weight):
    return tuple(range(1, weight.ndim))


def channel_ranges(layer, side):
    """ Per-channel max-abs of a layer's weights

    side='out': ranges of the output channels (rows); side='in': ranges of the
    input channels this layer reads (depthwise layers couple channel to channel).
    """
    weight = np.abs(layer.params['weight'])
    if side == 'out' or layer.kind is LayerKind.DEPTHWISE_CONV2D:
        return weight.max(axis=_output_axes(weight))
    if layer.kind is LayerKind.LINEAR:
        return weight.max(axis=0)
    return weight.max(axis=(0, 2, 3))


def _input_channels(layer):
    weight = layer.params['weight']
    if layer.kind is LayerKind.DEPTHWISE_CONV2D:
        return weight.shape[0]
    return weight.shape[1]


def find_cle_pairs(graph):
    """ Weighted -> ReLU/ReLU6 -> weighted chains without branching

    Returns (pairs, skipped) where skipped lists {'node', 'reason'} records.
    """
    pairs, skipped = [], []
    for node in graph.nodes:
        if node.kind not in WEIGHTED or node.name == graph.output:
            continue
        consumers = graph.consumers(node.name)
        if len(consumers) != 1 or consumers[0].kind not in ACTIVATIONS:
            continue
        activation = consumers[0]
        followers = graph.consumers(activation.name)
        if len(followers) != 1 or followers[0].kind not in WEIGHTED or activation.name == graph.output:
            skipped.append({'node': node.name, 'reason': 'activation {} does not feed a single linear layer'.format(
                activation.name)})
            continue
        second = followers[0]
        if node.layer.channels != _input_channels(second.layer):
            skipped.append({'node': node.name, 'reason': 'channel coupling {} vs {}'.format(
                node.layer.channels, _input_channels(second.layer))})
            continue
        pairs.append(EqualizablePair(node.name, activation.name, second.name))
    return pairs, skipped


def cle_scales(r1, r2):
    """ s_i = sqrt(r1_i r2_i) / r2_i; channels with a zero range keep s_i = 1 """
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    if r1.shape != r2.shape:
        raise ContractError('range vectors differ in length: {} vs {}'.format(r1.size, r2.size))
    if np.any(r1 < 0) or np.any(r2 < 0):
        raise ContractError('channel ranges must be non-negative')
    scales = np.ones_like(r1)
    live = (r1 > 0) & (r2 > 0)
    scales[live] = np.sqrt(r1[live] * r2[live]) / r2[live]
    return scales


def _scale_rows(weight, factor):
    return weight * factor.reshape((-1,) + (1,) * (weight.ndim - 1))


def _scale_inputs(layer, factor):
    weight = layer.params['weight']
    if layer.kind is LayerKind.DEPTHWISE_CONV2D:
        return _scale_rows(weight, factor)
    if layer.kind is LayerKind.LINEAR:
        return weight * factor.reshape(1, -1)
    return weight * factor.reshape(1, -1, 1, 1)


def equalize_pair(graph, pair, scales=None):
    """ W1 <- S^-1 W1, b1 <- S^-1 b1, W2 <- W2 S; a ReLU6 clip point becomes clip / s

    Returns (graph, scales).
    """
    result = graph.clone()
    first = result.node(pair.first).layer
    activation = result.node(pair.activation).layer
    second = result.node(pair.second).layer
    if scales is None:
        scales = cle_scales(channel_ranges(first, 'out'), channel_ranges(second, 'in'))

    first.params['weight'] = _scale_rows(first.params['weight'], 1.0 / scales)
    first.params['bias'] = first.params['bias'] / scales
    bn = first.annotations.get('bn')
    if bn is not None:
        bn['gamma'] = np.asarray(bn['gamma']) / scales
        bn['beta'] = np.asarray(bn['beta']) / scales
    if activation.kind is LayerKind.RELU6:
        clip_point = activation.params.get('clip', np.full(scales.shape, activation.attrs.get('clip', 6.0)))
        activation.params['clip'] = clip_point / scales
    second.params['weight'] = _scale_inputs(second, scales)
    return result, scales


def apply_cle(graph, tolerance=CLE_TOLERANCE, max_sweeps=CLE_MAX_SWEEPS):
    """ Equalize every eligible pair, sweeping until the scales settle """
    pairs, skipped = find_cle_pairs(graph)
    for record in skipped:
        logging.warning('CLE skipped {}: {}'.format(record['node'], record['reason']))

    result = graph
    trace = []
    totals = {pair.first: np.ones(result.node(pair.first).layer.channels) for pair in pairs}
    for sweep in range(1, max_sweeps + 1 if pairs else 1):
        change = 0.0
        for pair in pairs:
            result, scales = equalize_pair(result, pair)
            totals[pair.first] = totals[pair.first] * scales
            change = max(change, float(np.max(np.abs(scales - 1.0))))
        trace.append({'sweep': sweep, 'max_change': change})
        logging.debug('CLE sweep {} max scale change {:.3g}'.format(sweep, change))
        if change < tolerance:
            break

    if result is graph:
        result = graph.clone()
    result.record(
        'cle',
        pairs=[list(pair) for pair in pairs],
        scales={name: scales for name, scales in totals.items()},
        sweeps=trace,
        skipped=skipped,
        converged=bool(not trace or trace[-1]['max_change'] < tolerance),
    )
    logging.info('CLE equalized {} pair(s) in {} sweep(s)'.format(len(pairs), len(trace)))
    return result


def _preactivation_minimum(graph, name, calibration):
    minimum = None
    for batch in calibration:
        values = run_capture(graph, batch).raw[name].data
        axes = tuple(i for i in range(values.ndim) if i != 1)
        batch_min = values.min(axis=axes)
        minimum = batch_min if minimum is None else np.minimum(minimum, batch_min)
    return minimum


def _shift_through(layer, shift):
    """ W2 c for a constant input shift c per channel """
    weight = layer.params['weight']
    if layer.kind is LayerKind.LINEAR:
        return weight @ shift
    if layer.kind is LayerKind.DEPTHWISE_CONV2D:
        return weight.sum(axis=(1, 2, 3)) * shift
    return np.einsum('kcij,c->k', weight, shift)


def absorb_bias(graph, calibration=None):
    """ Move the always-active part c of a ReLU's input into the next layer

    b1 <- b1 - c, b2 <- b2 + W2 c. With calibration batches c_i is the
    observed minimum of pre-activation channel i (floored at 0); without,
    c_i = max(0, beta_i - 3 |gamma_i|) from the folded batch norm.
    """
    if calibration is not None and len(calibration) == 0:
        raise ContractError('empty calibration set')
    pairs, _ = find_cle_pairs(graph)
    result = graph.clone()
    absorbed, skipped = [], []

    for pair in pairs:
        first = result.node(pair.first).layer
        activation = result.node(pair.activation).layer
        second = result.node(pair.second).layer

        if second.kind is not LayerKind.LINEAR and second.attrs.get('padding', 0):
            skipped.append({'node': pair.first, 'reason': 'padded convolution {} would see the shift at borders'.format(
                pair.second)})
            continue

        if calibration is not None:
            shift = np.maximum(_preactivation_minimum(result, pair.first, calibration), 0.0)
            mode = 'empirical'
        elif first.annotations.get('bn') is not None:
            bn = first.annotations['bn']
            shift = np.maximum(np.asarray(bn['beta']) - ABSORB_SIGMAS * np.abs(np.asarray(bn['gamma'])), 0.0)
            mode = 'bn'
        else:
            raise ConfigurationError(
                'bias absorption at {} needs calibration data or batch norm statistics'.format(pair.first))

        if activation.kind is LayerKind.RELU6:
            clip_point = activation.params.get('clip', np.full(shift.shape, activation.attrs.get('clip', 6.0)))
            shift = np.minimum(shift, clip_point)
            activation.params['clip'] = clip_point - shift
        if not np.any(shift > 0):
            continue

        first.params['bias'] = first.params['bias'] - shift
        second.params['bias'] = second.params['bias'] + _shift_through(second, shift)
        bn = first.annotations.get('bn')
        if bn is not None:
            bn['beta'] = np.asarray(bn['beta']) - shift
        absorbed.append({'pair': list(pair), 'mode': mode, 'c': shift})

    for record in skipped:
        logging.warning('Bias absorption skipped {}: {}'.format(record['node'], record['reason']))
    result.record('absorb_bias', absorbed=absorbed, skipped=skipped)
    logging.info('Absorbed high biases of {} pair(s)'.format(len(absorbed)))
    return result


def _channel_mean(values):
    axes = tuple(i for i in range(values.ndim) if i != 1)
    return values.mean(axis=axes)


def bias_correct_empirical(graph, calibration):
    """ Remove the mean output shift E[W^x] - E[Wx] layer by layer

    Layers are corrected in order; each one is measured on the graph with its
    predecessors already corrected.
    """
    if calibration is None or len(calibration) == 0:
        raise ContractError('empirical bias correction needs a non-empty calibration set')
    result = graph.clone()
    active = [site for site, spec in result.quantizers.items() if spec is not None and spec.fitted]
    fp_means = {}
    for node in result.weighted_nodes():
        batches = [run_capture(graph, batch).raw[node.name].data for batch in calibration]
        fp_means[node.name] = _channel_mean(np.concatenate(batches, axis=0))

    corrections = {}
    for node in result.weighted_nodes():
        if weight_site(node.name) not in active:
            continue
        batches = [
            run_capture(result, batch, quantize=True, active=active).raw[node.name].data
            for batch in calibration
        ]
        shift = _channel_mean(np.concatenate(batches, axis=0)) - fp_means[node.name]
        node.layer.params['bias'] = node.layer.params['bias'] - shift
        corrections[node.name] = shift

    result.record(
        'bias_correct_empirical',
        corrections={name: float(np.linalg.norm(shift)) for name, shift in corrections.items()},
    )
    logging.info('Empirical bias correction on {} layer(s)'.format(len(corrections)))
    return result


def clipped_normal_mean(beta, gamma):
    """ E[relu(x)] for x ~ N(beta, gamma^2): gamma pdf(-beta/gamma) + beta (1 - cdf(-beta/gamma)) """
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.abs(np.asarray(gamma, dtype=np.float64))
    safe = np.where(gamma > 0, gamma, 1.0)
    ratio = -beta / safe
    mean = gamma * stats.norm.pdf(ratio) + beta * (1.0 - stats.norm.cdf(ratio))
    return np.where(gamma > 0, mean, np.maximum(beta, 0.0))


def _expected_shift(layer, delta, expected):
    if layer.kind is LayerKind.LINEAR:
        return delta @ expected
    if layer.kind is LayerKind.DEPTHWISE_CONV2D:
        return delta.sum(axis=(1, 2, 3)) * expected
    return np.einsum('kcij,c->k', delta, expected)


def bias_correct_analytic(graph):
    """ Data-free bias correction: b <- b - dW E[x], E[x] from the clipped normal

    Applies to layers fed by a ReLU/ReLU6 whose input is a batch-normalized
    (folded) layer; other layers are skipped and recorded.
    """
    result = graph.clone()
    corrections, skipped = {}, []
    for node in result.weighted_nodes():
        spec = result.spec(weight_site(node.name))
        if spec is None or not spec.fitted:
            skipped.append({'node': node.name, 'reason': 'weight quantizer not fitted'})
            continue
        source = node.inputs[0]
        producer = result.node(source) if source in result else None
        upstream = result.node(producer.inputs[0]) if producer is not None and producer.inputs[0] in result else None
        if producer is None or producer.kind not in ACTIVATIONS or upstream is None \
                or upstream.layer.annotations.get('bn') is None:
            skipped.append({'node': node.name, 'reason': 'input is not a ReLU of a batch-normalized layer'})
            continue

        bn = upstream.layer.annotations['bn']
        expected = clipped_normal_mean(bn['beta'], bn['gamma'])
        if producer.kind is LayerKind.RELU6:
            expected = np.minimum(expected, producer.layer.params.get('clip', producer.layer.attrs.get('clip', 6.0)))
        weight = node.layer.params['weight']
        delta = fake_quant_data(weight, spec) - weight
        shift = _expected_shift(node.layer, delta, expected)
        node.layer.params['bias'] = node.layer.params['bias'] - shift
        corrections[node.name] = shift

    for record in skipped:
        logging.warning('Analytic bias correction skipped {}: {}'.format(record['node'], record['reason']))
    result.record(
        'bias_correct_analytic',
        corrections={name: float(np.linalg.norm(shift)) for name, shift in corrections.items()},
        skipped=skipped,
    )
    return result


def fp_outputs_close(graph, other, batches, tolerance):
    """ Max |forward_fp(graph) - forward_fp(other)| relative to the output scale, over batches """
    worst = 0.0
    for batch in batches:
        a = forward_fp(graph, batch).data
        b = forward_fp(other, batch).data
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12)))
    return worst <= tolerance, worst
