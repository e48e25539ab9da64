""" Quantization-aware training with straight-through gradients

Quantizer scales are learned in the log domain: each scale is s0 exp(u)
with a trainable offset u (starting at 0), so scales stay positive without
projection. Asymmetric zero-points are trained as reals and rounded in the
forward pass.
"""
import collections
import logging

import numpy as np

from . import tensor as T
from .configuration import ConfigurationError
from .datasets import split
from .exceptions import ContractError, NumericalError
from .graph import Executor, LayerKind, WEIGHTED, act_site, fold_bn, rename_site, weight_site
from .metrics import default_metric, get_metric
from .quantizer import MIN_SCALE, Scheme
from .tensor import Parameter, Tensor
from .utils import JsonLinesWriter, make_rng


__all__ = [
    'QatConfig', 'TrainState', 'TrainingDivergenceError', 'qat_forward_backward', 'train',
    'fold_bn_static_for_qat', 'absorb_bn_into_channel_scales', 'quant_param_lr_policy',
    'SGD_QUANT_LR_FACTOR',
]


SGD_QUANT_LR_FACTOR = 1e-2

OPTIMIZERS = ('adam', 'sgd')
BN_MODES = ('static-fold', 'keep-bn')
LOSSES = ('cross-entropy', 'mse')


class TrainingDivergenceError(NumericalError):
    pass


class QatConfig(object):
    """ Training settings, built from a plain dict """

    epochs = 20
    batch_size = 32
    lr = 1e-2
    optimizer = 'adam'
    momentum = 0.9
    bn_mode = 'static-fold'
    learnable_ranges = True
    loss = 'cross-entropy'
    val_fraction = 0.2
    seed = 0

    KEYS = (
        'epochs', 'batch_size', 'lr', 'optimizer', 'momentum', 'bn_mode',
        'learnable_ranges', 'loss', 'val_fraction', 'seed',
    )

    def __init__(self, **settings):
        unknown = sorted(set(settings) - set(self.KEYS))
        if unknown:
            raise ConfigurationError('Unknown qat setting(s): {}'.format(', '.join(unknown)))
        for key, value in settings.items():
            setattr(self, key, value)
        self.validate()

    @classmethod
    def from_dict(cls, settings):
        if isinstance(settings, QatConfig):
            return settings
        return cls(**(settings or {}))

    def validate(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigurationError('epochs must be a non-negative integer')
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigurationError('batch_size must be a positive integer')
        if self.lr < 0:
            raise ConfigurationError('lr must be non-negative')
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError('optimizer must be one of {}'.format(OPTIMIZERS))
        if self.bn_mode not in BN_MODES:
            raise ConfigurationError('bn_mode must be one of {}'.format(BN_MODES))
        if self.loss not in LOSSES:
            raise ConfigurationError('loss must be one of {}'.format(LOSSES))
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError('val_fraction must be in [0, 1)')

    def as_dict(self):
        return {key: getattr(self, key) for key in self.KEYS}


def quant_param_lr_policy(config):
    """ Learning rates per parameter group

    SGD trains quantizer parameters at 1e-2 of the weight rate, adaptive
    optimizers at the same rate. `quantizers` is None when ranges are fixed.
    """
    config = QatConfig.from_dict(config)
    if not config.learnable_ranges:
        return {'weights': config.lr, 'quantizers': None}
    factor = SGD_QUANT_LR_FACTOR if config.optimizer == 'sgd' else 1.0
    return {'weights': config.lr, 'quantizers': config.lr * factor}


class TrainState(object):
    """ Trainable tensors of one training run

    `params`: {(node, name): Parameter}; `offsets`: {site: Parameter u} with
    scale s0 exp(u); `zero_points`: {site: Parameter z} for asymmetric sites.
    """

    def __init__(self, graph, learnable_ranges=True, train_bn=False):
        self.graph = graph
        self.params = collections.OrderedDict()
        for node in graph.nodes:
            names = ()
            if node.kind in WEIGHTED:
                names = ('weight', 'bias')
            elif node.kind is LayerKind.BATCHNORM and train_bn:
                names = ('gamma', 'beta')
            for name in names:
                self.params[(node.name, name)] = Parameter(node.layer.params[name])

        self.offsets = collections.OrderedDict()
        self.zero_points = collections.OrderedDict()
        if learnable_ranges:
            for site in self.canonical_sites():
                spec = graph.quantizers[site]
                if spec.scheme is Scheme.POWER_OF_TWO:
                    continue
                self.offsets[site] = Parameter(np.zeros_like(spec.scale))
                if spec.scheme.has_zero_point:
                    self.zero_points[site] = Parameter(spec.zero_point)

        self.epoch = 0
        self.step = 0
        self.history = []

    def canonical_sites(self):
        sites = []
        for site, spec in self.graph.quantizers.items():
            canonical = self.graph.canonical(site)
            if canonical not in sites and spec is not None and spec.fitted:
                sites.append(canonical)
        return sites

    def scale(self, site):
        return self.graph.quantizers[site].scale * np.exp(self.offsets[site].data)

    def quant_leaves(self):
        """ Fresh leaf tensors {site: (scale, zero_point or None)} for one forward pass """
        leaves = collections.OrderedDict()
        for site in self.offsets:
            zero_point = self.zero_points.get(site)
            leaves[site] = (
                Tensor(self.scale(site), requires_grad=True),
                Tensor(zero_point.data, requires_grad=True) if zero_point is not None else None,
            )
        return leaves

    def quant_parameters(self):
        return list(self.offsets.values()) + list(self.zero_points.values())

    def project(self):
        """ Keep s > MIN_SCALE and z inside the storage range """
        for site, offset in self.offsets.items():
            base = self.graph.quantizers[site].scale
            offset.data = np.maximum(offset.data, np.log(MIN_SCALE / base) + 1e-12)
        for site, zero_point in self.zero_points.items():
            spec = self.graph.quantizers[site]
            zero_point.data = np.clip(zero_point.data, 0.0, 2 ** spec.bitwidth - 1)

    def materialize(self):
        """ Graph carrying the current parameter values (learned zero-points unrounded) """
        graph = self.graph.clone()
        for (node, name), param in self.params.items():
            graph.node(node).layer.params[name] = param.data.copy()
        for site in self.offsets:
            spec = self.graph.quantizers[site]
            zero_point = self.zero_points[site].data if site in self.zero_points else None
            frozen = spec.frozen and zero_point is None
            graph.set_spec(site, spec.with_params(self.scale(site), zero_point, frozen=frozen))
        return graph


def _loss_fn(kind):
    if kind == 'cross-entropy':
        return T.cross_entropy
    return T.mse_loss


def qat_forward_backward(graph, batch, loss_fn, state=None, quantize=True):
    """ One forward/backward pass

    Returns (loss, grads) with grads keyed `node.param`, `site.scale`,
    `site.zero_point`; scale gradients are d loss / d s and the state's log
    offsets receive the chain-ruled d loss / d u = s d loss / d s.
    """
    if state is None:
        state = TrainState(graph)
    x, targets = batch
    leaves = state.quant_leaves() if quantize else {}
    for param in state.params.values():
        param.zero_grad()
    for param in state.quant_parameters():
        param.zero_grad()

    executor = Executor(graph, quantize=quantize, strict=quantize, params=state.params, quant_params=leaves)
    loss = loss_fn(executor.run(x), targets)
    if not np.isfinite(loss.data):
        raise TrainingDivergenceError('loss is {}'.format(float(loss.data)), state.history)
    loss.backward()

    grads = collections.OrderedDict()
    for (node, name), param in state.params.items():
        grads['{}.{}'.format(node, name)] = param.grad if param.grad is not None else np.zeros_like(param.data)
    for site, (scale, zero_point) in leaves.items():
        scale_grad = scale.grad if scale.grad is not None else np.zeros_like(scale.data)
        grads['{}.scale'.format(site)] = scale_grad
        state.offsets[site].grad = scale_grad * scale.data
        if zero_point is not None:
            zero_grad = zero_point.grad if zero_point.grad is not None else np.zeros_like(zero_point.data)
            grads['{}.zero_point'.format(site)] = zero_grad
            state.zero_points[site].grad = zero_grad
    return float(loss.data), grads


def fold_bn_static_for_qat(graph):
    """ Static folding before training; the folded weights are the trainable ones """
    result = fold_bn(graph)
    if result.history and result.history[-1]['transform'] == 'fold_bn':
        result.history[-1]['transform'] = 'fold_bn_static_for_qat'
    return result


def absorb_bn_into_channel_scales(graph):
    """ Merge kept batch norms after training

    W~_k = a_k W_k, b~_k = beta_k + a_k (b_k - mu_k), s~_w,k = |a_k| s_w,k with
    a_k = gamma_k / sqrt(var_k + eps). A negative a_k flips the sign of the
    channel's weights (its scale stays positive) and is recorded.
    """
    result = graph.clone()
    merged, flipped = [], []
    for bn in [node for node in result.nodes if node.kind is LayerKind.BATCHNORM]:
        producer_name = bn.inputs[0]
        producer = result.node(producer_name) if producer_name in result else None
        if producer is None or producer.kind not in WEIGHTED or len(result.consumers(producer_name)) != 1:
            raise ContractError('batch norm {} does not directly follow a Linear/Conv'.format(bn.name))
        site = weight_site(producer_name)
        spec = result.spec(site)
        if spec is None or not spec.fitted or not spec.per_channel:
            raise ConfigurationError('absorbing batch norm into scales needs a fitted per-channel quantizer at {}'.format(
                site))

        params = bn.layer.params
        factor = params['gamma'] / np.sqrt(params['var'] + bn.layer.attrs['eps'])
        layer = producer.layer
        weight = layer.params['weight']
        layer.params['weight'] = weight * factor.reshape((-1,) + (1,) * (weight.ndim - 1))
        layer.params['bias'] = params['beta'] + factor * (layer.params['bias'] - params['mean'])
        layer.annotations['bn'] = {'gamma': params['gamma'].copy(), 'beta': params['beta'].copy()}
        result.set_spec(site, spec.with_params(spec.scale * np.abs(factor), spec.zero_point))

        negative = [int(k) for k in np.flatnonzero(factor < 0)]
        if negative:
            flipped.append({'layer': producer_name, 'channels': negative})
            logging.warning('Batch norm {} has negative scale on channel(s) {}, weight sign flipped'.format(
                bn.name, negative))

        for consumer in result.consumers(bn.name):
            consumer.inputs = [producer_name if s == bn.name else s for s in consumer.inputs]
        if result.output == bn.name:
            result.output = producer_name
        result.nodes = [node for node in result.nodes if node.name != bn.name]
        rename_site(result, act_site(bn.name), act_site(producer_name))
        merged.append({'batchnorm': bn.name, 'into': producer_name})

    result.record('absorb_bn_into_channel_scales', merged=merged, flipped=flipped)
    return result


def _mean_scales(graph):
    means = {'weights': [], 'activations': []}
    for site, spec in graph.quantizers.items():
        if spec is not None and spec.fitted:
            means['weights' if site.startswith('w:') else 'activations'].append(float(np.mean(spec.scale)))
    return {key: (float(np.mean(values)) if values else None) for key, values in means.items()}


def _evaluate(graph, inputs, targets, metric, quantize):
    with T.no_grad():
        out = Executor(graph, quantize=quantize, strict=quantize).run(inputs)
    return metric.function(out.data, targets)


def train(graph, dataset, config=None, quantize=True, metric=None, metrics_path=None):
    """ Train `graph` on `dataset` = (inputs, targets)

    With `quantize` the simulated-quantization graph is trained through
    straight-through gradients (QAT); without, it is ordinary FP training.
    Returns (best-validation graph, history). QAT graphs come back frozen.
    """
    config = QatConfig.from_dict(config)
    inputs, targets = (np.asarray(a) for a in dataset)
    if inputs.shape[0] != targets.shape[0] or inputs.shape[0] == 0:
        raise ContractError('dataset needs matching, non-empty inputs and targets')

    has_bn = any(node.kind is LayerKind.BATCHNORM for node in graph.nodes)
    keep_bn = has_bn and config.bn_mode == 'keep-bn'
    if quantize and has_bn and not keep_bn:
        raise ConfigurationError('static-fold QAT expects a folded graph; run fold_bn_static_for_qat first')
    if quantize and keep_bn:
        specs = [graph.spec(weight_site(node.name)) for node in graph.weighted_nodes()]
        if any(spec is None or not spec.per_channel for spec in specs):
            raise ConfigurationError('keep-bn training needs per-channel weight quantizers')

    metric = get_metric(metric or default_metric(graph))
    rng = make_rng(config.seed)
    fit, val = split(inputs, targets, config.val_fraction, rng)
    if fit[0].shape[0] == 0:
        raise ContractError('no training samples left after the validation split')
    if val[0].shape[0] == 0:
        val = fit

    state = TrainState(graph, config.learnable_ranges and quantize, train_bn=not quantize or keep_bn)
    rates = quant_param_lr_policy(config)
    groups = [{'params': list(state.params.values()), 'lr': rates['weights']}]
    if rates['quantizers'] is not None and state.quant_parameters():
        groups.append({'params': state.quant_parameters(), 'lr': rates['quantizers']})
    optimizer = T.Adam(groups) if config.optimizer == 'adam' else T.SGD(groups, config.momentum)
    loss_fn = _loss_fn(config.loss)
    writer = JsonLinesWriter(metrics_path)

    best_graph = state.materialize()
    best_value = _evaluate(best_graph, val[0], val[1], metric, quantize)
    logging.info('Training {} epochs ({}), initial {} {:.4f}'.format(
        config.epochs, 'QAT' if quantize else 'FP', metric.name, best_value))

    for epoch in range(1, int(config.epochs) + 1):
        order = rng.permutation(fit[0].shape[0])
        losses = []
        for start in range(0, len(order), int(config.batch_size)):
            index = order[start:start + int(config.batch_size)]
            try:
                loss, _ = qat_forward_backward(graph, (fit[0][index], fit[1][index]), loss_fn, state, quantize)
            except TrainingDivergenceError as e:
                raise TrainingDivergenceError('training diverged in epoch {}: {}'.format(epoch, e), state.history)
            optimizer.step()
            state.project()
            state.step += 1
            losses.append(loss)

        state.epoch = epoch
        current = state.materialize()
        value = _evaluate(current, val[0], val[1], metric, quantize)
        entry = {'epoch': epoch, 'train_loss': float(np.mean(losses)), 'val_metric': value}
        entry.update({'mean_scale_' + key: mean for key, mean in _mean_scales(current).items()})
        state.history.append(entry)
        writer.write(entry)
        logging.debug('epoch {} loss {:.4f} val {:.4f}'.format(epoch, entry['train_loss'], value))

        better = value > best_value if metric.higher_is_better else value < best_value
        if better:
            best_graph, best_value = current, value

    if quantize:
        best_graph = best_graph.freeze()
    best_graph.record(
        'qat' if quantize else 'train', config=config.as_dict(), epochs=len(state.history),
        best_val_metric=best_value, metric=metric.name,
    )
    logging.info('Training done, best validation {} {:.4f}'.format(metric.name, best_value))
    return best_graph, state.history
