""" Graph IR: layers, quantizer placement, FP/simulated execution, BN folding """
import collections
import copy
import logging
from enum import Enum

import numpy as np

from . import tensor as T
from .configuration import ConfigurationError
from .exceptions import ContractError, DimensionError, UnsupportedPatternError
from .quantizer import QuantizerSpec, fake_quant
from .tensor import Tensor, no_grad


__all__ = [
    'LayerKind', 'Layer', 'Node', 'Graph', 'Grid', 'QuantizerPlacement', 'Executor',
    'forward_fp', 'forward_sim_quant', 'fold_bn', 'attach_quantizers',
    'weight_site', 'act_site', 'INPUT',
]


INPUT = 'input'

INT32_MIN = -2 ** 31
INT32_MAX = 2 ** 31 - 1


class LayerKind(Enum):
    LINEAR = 'linear'
    CONV2D = 'conv2d'
    DEPTHWISE_CONV2D = 'depthwise_conv2d'
    BATCHNORM = 'batchnorm'
    RELU = 'relu'
    RELU6 = 'relu6'
    ADD = 'add'
    CONCAT = 'concat'
    AVGPOOL = 'avgpool'
    MAXPOOL = 'maxpool'
    FLATTEN = 'flatten'


WEIGHTED = frozenset([LayerKind.LINEAR, LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D])
ACTIVATIONS = frozenset([LayerKind.RELU, LayerKind.RELU6])
PASS_THROUGH = frozenset([LayerKind.MAXPOOL, LayerKind.FLATTEN])
MULTI_INPUT = frozenset([LayerKind.ADD, LayerKind.CONCAT])


def weight_site(name):
    return 'w:' + name


def act_site(name):
    return 'a:' + name


class Layer(object):
    """ One operation with its parameters (numpy arrays) and attributes

    Parameters per kind::

        linear            weight [out, in], bias [out]
        conv2d            weight [K, C, kh, kw], bias [K]
        depthwise_conv2d  weight [C, 1, kh, kw], bias [C]
        batchnorm         gamma, beta, mean, var [C]
        relu6             clip [C] (optional, per-channel clip points)

    Attributes: stride, padding (conv), kernel, stride (pools), eps (batchnorm),
    axis (concat). `annotations['bn']` keeps the (gamma, beta) of a batch norm
    folded into this layer.
    """

    def __init__(self, kind, params=None, attrs=None, annotations=None):
        self.kind = LayerKind(kind)
        self.params = collections.OrderedDict(
            (k, np.array(v, dtype=np.float64)) for k, v in (params or {}).items()
        )
        self.attrs = dict(attrs or {})
        self.annotations = copy.deepcopy(annotations or {})
        if self.kind is LayerKind.BATCHNORM:
            self.attrs.setdefault('eps', 1e-5)
        self.validate()

    def validate(self):
        kind = self.kind
        if kind in WEIGHTED:
            if 'weight' not in self.params:
                raise ContractError('{} layer without weight'.format(kind.value))
            weight = self.params['weight']
            if 'bias' not in self.params:
                self.params['bias'] = np.zeros(weight.shape[0])
            if kind is LayerKind.LINEAR and weight.ndim != 2:
                raise DimensionError('linear weight must be 2-D, got {}'.format(list(weight.shape)))
            if kind is LayerKind.CONV2D and weight.ndim != 4:
                raise DimensionError('conv2d weight must be 4-D, got {}'.format(list(weight.shape)))
            if kind is LayerKind.DEPTHWISE_CONV2D and (weight.ndim != 4 or weight.shape[1] != 1):
                raise DimensionError('depthwise weight must be [C, 1, kh, kw], got {}'.format(list(weight.shape)))
            if self.params['bias'].shape != (weight.shape[0],):
                raise DimensionError('bias of shape {} for {} output channels'.format(
                    list(self.params['bias'].shape), weight.shape[0]))
        elif kind is LayerKind.BATCHNORM:
            for key in ('gamma', 'beta', 'mean', 'var'):
                if key not in self.params:
                    raise ContractError('batchnorm layer without {}'.format(key))
            shapes = set(self.params[key].shape for key in ('gamma', 'beta', 'mean', 'var'))
            if len(shapes) != 1:
                raise DimensionError('batchnorm parameters disagree in shape: {}'.format(sorted(shapes)))
            if np.any(self.params['var'] < 0):
                raise ContractError('batchnorm variance must be non-negative')
            if self.attrs['eps'] <= 0:
                raise ContractError('batchnorm eps must be positive')

    @property
    def weight(self):
        return self.params.get('weight')

    @property
    def bias(self):
        return self.params.get('bias')

    @property
    def channels(self):
        """ Output channel count of weighted and batchnorm layers """
        if self.kind in WEIGHTED:
            return self.params['weight'].shape[0]
        if self.kind is LayerKind.BATCHNORM:
            return self.params['gamma'].shape[0]
        return None

    def copy(self):
        return Layer(self.kind, self.params, self.attrs, self.annotations)

    def __repr__(self):
        return '<Layer {}>'.format(self.kind.value)


class Node(object):

    def __init__(self, name, layer, inputs=None):
        self.name = name
        self.layer = layer
        self.inputs = list(inputs or [INPUT])

    @property
    def kind(self):
        return self.layer.kind

    def copy(self):
        return Node(self.name, self.layer.copy(), self.inputs)

    def __repr__(self):
        return '<Node {} {} <- {}>'.format(self.name, self.kind.value, ','.join(self.inputs))


class Grid(collections.namedtuple('Grid', 'spec site')):
    """ The quantization grid a value lies on and the (canonical) site that set it """


class Graph(object):
    """ Ordered DAG of named nodes plus quantizer slots

    `quantizers` maps site ids (`w:<node>`, `a:<node>`, `a:input`) to specs;
    `ties` maps a site to the canonical site whose spec it shares.
    Transforms never mutate a graph: they return a modified `clone()`.
    """

    def __init__(self, nodes, input_shape, output=None, quantizers=None, ties=None,
                 metadata=None, history=None):
        self.nodes = list(nodes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.output = output or (self.nodes[-1].name if self.nodes else INPUT)
        self.quantizers = collections.OrderedDict(quantizers or {})
        self.ties = dict(ties or {})
        self.metadata = copy.deepcopy(metadata or {})
        self.history = copy.deepcopy(history or [])
        self.validate()

    def validate(self):
        seen = set([INPUT])
        for node in self.nodes:
            if node.name in seen:
                raise ContractError('duplicate node name {!r}'.format(node.name))
            for source in node.inputs:
                if source not in seen:
                    raise ContractError('node {!r} reads {!r} before it is defined (cycle or unknown)'.format(
                        node.name, source))
            if node.kind in MULTI_INPUT and len(node.inputs) < 2:
                raise ContractError('{} node {!r} needs at least two inputs'.format(node.kind.value, node.name))
            if node.kind not in MULTI_INPUT and len(node.inputs) != 1:
                raise ContractError('{} node {!r} takes exactly one input'.format(node.kind.value, node.name))
            seen.add(node.name)
        if self.output not in seen:
            raise ContractError('output {!r} is not a node'.format(self.output))

    def node(self, name):
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    def __contains__(self, name):
        return any(node.name == name for node in self.nodes)

    def consumers(self, name):
        return [node for node in self.nodes if name in node.inputs]

    def weighted_nodes(self):
        return [node for node in self.nodes if node.kind in WEIGHTED]

    def canonical(self, site):
        while site in self.ties:
            site = self.ties[site]
        return site

    def spec(self, site):
        return self.quantizers.get(self.canonical(site))

    def tied_members(self, canonical):
        return [site for site in self.quantizers if self.canonical(site) == canonical]

    def set_spec(self, site, spec):
        """ Bind `spec` to the canonical site of `site` (shared by all tied members) """
        canonical = self.canonical(site)
        for member in self.tied_members(canonical):
            self.quantizers[member] = spec

    @property
    def classifier(self):
        return bool(self.metadata.get('classifier', False))

    @property
    def frozen(self):
        return bool(self.quantizers) and all(
            spec is not None and spec.fitted and spec.frozen for spec in self.quantizers.values()
        )

    def weight_sites(self):
        return [site for site in self.quantizers if site.startswith('w:')]

    def activation_sites(self):
        return [site for site in self.quantizers if site.startswith('a:')]

    def clone(self):
        return Graph(
            [node.copy() for node in self.nodes], self.input_shape, self.output,
            self.quantizers, self.ties, self.metadata, self.history,
        )

    def record(self, transform, **details):
        entry = {'transform': transform}
        entry.update(details)
        self.history.append(entry)
        return entry

    def freeze(self):
        """ Clone with every fitted spec frozen (learned zero-points rounded) """
        graph = self.clone()
        for site, spec in graph.quantizers.items():
            if spec is not None and spec.fitted:
                graph.quantizers[site] = spec.freeze()
        return graph

    def __repr__(self):
        return '<Graph nodes={} sites={}>'.format(len(self.nodes), len(self.quantizers))


class QuantizerPlacement(object):
    """ Where quantizers go

    - weights: one quantizer on every Linear/Conv weight, before the op
    - activations: after the nonlinearity, or after the layer when no
      nonlinearity (or batch norm) directly follows
    - MaxPool, Flatten: pass-through, no new grid
    - AvgPool: output shares the input's spec
    - Add: `requantize` gives the sum a fresh spec; `tied` makes both inputs
      and the output share one spec
    - Concat: fresh output spec, each branch requantized into it
    - the graph input gets its own quantizer
    """

    def __init__(self, add_policy='requantize'):
        if add_policy not in ('requantize', 'tied'):
            raise ConfigurationError('unknown add policy {!r}'.format(add_policy))
        self.add_policy = add_policy

    def fused(self, graph, node):
        """ True when `node`'s output feeds straight into a fusable follower """
        consumers = graph.consumers(node.name)
        if len(consumers) != 1 or node.name == graph.output:
            return False
        follower = consumers[0].kind
        if follower in ACTIVATIONS:
            return node.kind not in PASS_THROUGH and node.kind not in ACTIVATIONS
        return follower is LayerKind.BATCHNORM and node.kind in WEIGHTED

    def sites(self, graph):
        """ Ordered (site, kind, node) triples and the tie map """
        sites = [(act_site(INPUT), 'activation', INPUT)]
        ties = {}
        grid_site = {INPUT: act_site(INPUT)}
        # node -> canonical site its output site joins (tied Add and its fused activation)
        joins = {}

        for node in graph.nodes:
            if node.kind in WEIGHTED:
                sites.append((weight_site(node.name), 'weight', node.name))

            if node.kind in PASS_THROUGH:
                grid_site[node.name] = grid_site.get(node.inputs[0])
                continue

            if node.kind is LayerKind.ADD and self.add_policy == 'tied':
                members = [grid_site.get(source) for source in node.inputs]
                if all(members):
                    canonical = _root(ties, members[0])
                    for member in members[1:]:
                        _tie(ties, member, canonical)
                    joins[node.name] = canonical

            if self.fused(graph, node):
                grid_site[node.name] = None
                if node.name in joins:
                    joins[graph.consumers(node.name)[0].name] = joins[node.name]
                continue

            site = act_site(node.name)
            sites.append((site, 'activation', node.name))
            grid_site[node.name] = site

            if node.kind is LayerKind.AVGPOOL and grid_site.get(node.inputs[0]):
                ties[site] = grid_site[node.inputs[0]]
            elif node.name in joins:
                _tie(ties, site, joins[node.name])

        return sites, ties


def _root(ties, site):
    while site in ties:
        site = ties[site]
    return site


def _tie(ties, site, canonical):
    site = _root(ties, site)
    canonical = _root(ties, canonical)
    if site != canonical:
        ties[site] = canonical


def attach_quantizers(graph, config, placement=None):
    """ Allocate unfitted specs at every placement site

    `config` provides weight_scheme/bitwidth/granularity, act_scheme/bitwidth,
    add_policy and bitwidth_overrides (a Configuration or a plain object).
    """
    granularity = getattr(config, 'weight_granularity', 'per-tensor')
    if getattr(config, 'act_granularity', 'per-tensor') != 'per-tensor':
        raise ConfigurationError('activation quantizers are per-tensor only; per-channel needs axis-0 weights')
    bn_nodes = [node.name for node in graph.nodes if node.kind is LayerKind.BATCHNORM]
    if bn_nodes and granularity == 'per-tensor':
        raise ConfigurationError(
            'per-tensor weight quantization needs a BN-folded graph; unfolded batch norm at {}'.format(
                ', '.join(bn_nodes)))

    placement = placement or QuantizerPlacement(getattr(config, 'add_policy', 'requantize'))
    sites, ties = placement.sites(graph)
    overrides = dict(getattr(config, 'bitwidth_overrides', None) or {})
    unknown = sorted(set(overrides) - set(site for site, _, _ in sites))
    if unknown:
        raise ConfigurationError('bit-width override for unknown site(s): {}'.format(', '.join(unknown)))

    result = graph.clone()
    result.quantizers = collections.OrderedDict()
    for site, kind, _ in sites:
        if kind == 'weight':
            spec = QuantizerSpec.unfitted(config.weight_scheme, config.weight_bitwidth, granularity, axis=0)
        else:
            spec = QuantizerSpec.unfitted(config.act_scheme, config.act_bitwidth)
        if site in overrides:
            spec = spec.with_bitwidth(overrides[site])
        result.quantizers[site] = spec
    result.ties = ties
    for site in ties:
        result.quantizers[site] = result.quantizers[_root(ties, site)]

    result.metadata['add_policy'] = placement.add_policy
    result.record(
        'attach_quantizers', sites=[site for site, _, _ in sites], ties=ties,
        weights=len([s for s in sites if s[1] == 'weight']),
        activations=len([s for s in sites if s[1] == 'activation']),
    )
    logging.info('Attached {} quantizer sites ({} tied)'.format(len(sites), len(ties)))
    return result


def combined_scale(w_scale, x_scale):
    """ Per-output-channel scale of the accumulator, s_w * s_x """
    return np.asarray(w_scale, dtype=np.float64) * float(x_scale)


def bias_to_accumulator(bias, combined):
    """ Bias on the accumulator grid: round(b / (s_w s_x)), clamped to 32 bits """
    return np.clip(np.rint(np.asarray(bias, dtype=np.float64) / combined), INT32_MIN, INT32_MAX)


def accumulator_scale(w_spec, x_spec, channels):
    """ Combined scale per output channel for a weight spec and a per-tensor input spec """
    w_scale = w_spec.scale if w_spec.per_channel else np.repeat(w_spec.scale, channels)
    return combined_scale(w_scale, x_spec.scale[0])


def pool_scale(scale, area):
    return float(scale) / float(area)


def centered(values, spec):
    """ Recover integer offsets x_int - z from on-grid reals s (x_int - z) """
    return np.rint(values / spec.broadcast(spec.scale, values.ndim))


def _channel_view(values, ndim, axis=1):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    shape = [1] * ndim
    shape[axis] = values.size
    return values.reshape(shape)


def _swap_data(plain, data):
    """ Keep `plain`'s backward but replace its forward values """
    return Tensor.from_op(data, plain._parents, plain._backward, plain.op)


class Executor(object):
    """ Runs a graph in FP (`quantize=False`) or simulated-quantization mode

    In simulated mode:

    - `active`: site ids to quantize (None = all); the rest pass through
    - `strict`: an active site without a fitted spec is a configuration error;
      when False such sites pass through
    - `params`: {(node, name): Tensor} overrides for layer parameters
    - `quant_params`: {canonical site: (scale Tensor, zero_point Tensor or None)}
    - `observer`: gets `observe(site, values)` for every site input

    When a Linear/Conv sees an on-grid input and on-grid weights, it is
    evaluated scale-factored: `s_w s_x (sum W_int x_int + b_int)` with the
    integer sums exact in float64 and the bias on the accumulator grid.
    Tied-grid Add and AvgPool are factored the same way.
    """

    def __init__(self, graph, quantize=False, active=None, strict=True, params=None,
                 quant_params=None, observer=None):
        self.graph = graph
        self.quantize = quantize
        self.active = None if active is None else set(active)
        self.strict = strict
        self.params = params or {}
        self.quant_params = quant_params or {}
        self.observer = observer
        self.placement = QuantizerPlacement(graph.metadata.get('add_policy', 'requantize'))
        self.values = {}
        self.raw = {}
        self.grids = {}

    def param(self, node, name):
        key = (node.name, name)
        if key in self.params:
            return self.params[key]
        return Tensor.from_op(node.layer.params[name])

    def _site_spec(self, site):
        canonical = self.graph.canonical(site)
        spec = self.graph.quantizers.get(canonical)
        if canonical in self.quant_params and spec is not None:
            scale, zero_point = self.quant_params[canonical]
            spec = spec.with_params(
                scale.data, zero_point.data if zero_point is not None else None, frozen=False,
            )
        return canonical, spec

    def apply_site(self, site, value):
        """ Returns (value, Grid or None) """
        if self.observer is not None:
            self.observer.observe(site, value.data)
        if not self.quantize or site not in self.graph.quantizers:
            return value, None
        if self.active is not None and site not in self.active:
            return value, None

        canonical, spec = self._site_spec(site)
        if spec is None or not spec.fitted:
            if self.strict:
                raise ConfigurationError('quantizer site {} has no fitted spec'.format(site))
            return value, None

        if canonical in self.quant_params:
            scale, zero_point = self.quant_params[canonical]
            base = self.graph.quantizers[canonical]
            return fake_quant(value, base, scale, zero_point), Grid(spec, canonical)
        return fake_quant(value, spec), Grid(spec, canonical)

    def run(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != self.graph.input_shape:
            raise DimensionError('input of shape {} for graph expecting [N] + {}'.format(
                list(x.shape), list(self.graph.input_shape)))

        value, grid = self.apply_site(act_site(INPUT), x)
        self.values[INPUT], self.grids[INPUT] = value, grid

        for node in self.graph.nodes:
            inputs = [self.values[source] for source in node.inputs]
            grids = [self.grids[source] for source in node.inputs]
            out, grid = self.evaluate(node, inputs, grids)
            self.raw[node.name] = out

            if node.kind not in PASS_THROUGH and act_site(node.name) in self.graph.quantizers:
                out, grid = self.apply_site(act_site(node.name), out)
            elif node.kind not in PASS_THROUGH and not self.quantize and self.observer is not None:
                if not self.placement.fused(self.graph, node):
                    self.observer.observe(act_site(node.name), out.data)
            self.values[node.name], self.grids[node.name] = out, grid

        return self.values[self.graph.output]

    def evaluate(self, node, inputs, grids):
        kind = node.kind
        attrs = node.layer.attrs
        x = inputs[0]

        if kind in WEIGHTED:
            weight = self.param(node, 'weight')
            bias = self.param(node, 'bias')
            weight, w_grid = self.apply_site(weight_site(node.name), weight)
            plain = self._weighted(node, x, weight, bias)
            if self.quantize and w_grid is not None and grids[0] is not None:
                return _swap_data(plain, self._factored(node, x, weight, bias, grids[0], w_grid)), None
            return plain, None

        if kind is LayerKind.BATCHNORM:
            gamma = self.param(node, 'gamma')
            beta = self.param(node, 'beta')
            params = node.layer.params
            inv_std = 1.0 / np.sqrt(params['var'] + attrs['eps'])
            scale = gamma * inv_std
            shift = beta - scale * params['mean']
            return T.add_bias(T.scale_channels(x, scale, axis=1), shift, axis=1), None

        if kind is LayerKind.RELU:
            return T.relu(x), None

        if kind is LayerKind.RELU6:
            clip_point = node.layer.params.get('clip', attrs.get('clip', 6.0))
            return T.clip(x, 0.0, _channel_view(clip_point, x.ndim)), None

        if kind is LayerKind.ADD:
            plain = inputs[0]
            for other in inputs[1:]:
                plain = plain + other
            sites = set(grid.site for grid in grids if grid is not None)
            if self.quantize and all(grids) and len(sites) == 1:
                spec = grids[0].spec
                acc = sum(centered(value.data, spec) for value in inputs)
                return _swap_data(plain, acc * spec.broadcast(spec.scale, acc.ndim)), None
            return plain, None

        if kind is LayerKind.CONCAT:
            return T.concat(inputs, axis=attrs.get('axis', 1)), None

        if kind is LayerKind.AVGPOOL:
            kernel = attrs.get('kernel') or x.shape[2]
            stride = attrs.get('stride') or kernel
            plain = T.avg_pool2d(x, kernel, stride)
            if self.quantize and grids[0] is not None:
                spec = grids[0].spec
                windows = T._windows(centered(x.data, spec), kernel, kernel, stride)
                acc = windows.sum(axis=(-2, -1))
                return _swap_data(plain, acc * pool_scale(spec.scale[0], kernel * kernel)), None
            return plain, None

        if kind is LayerKind.MAXPOOL:
            kernel = attrs.get('kernel', 2)
            return T.max_pool2d(x, kernel, attrs.get('stride') or kernel), grids[0]

        if kind is LayerKind.FLATTEN:
            return x.reshape((x.shape[0], -1)), grids[0]

        raise UnsupportedPatternError('no executor for {}'.format(kind.value), [node.name])

    def _weighted(self, node, x, weight, bias):
        attrs = node.layer.attrs
        if node.kind is LayerKind.LINEAR:
            if x.ndim != 2:
                raise DimensionError('linear {!r} needs [N, features] input, got {}'.format(node.name, list(x.shape)))
            return T.add_bias(T.matmul(x, weight.T), bias, axis=1)
        groups = x.shape[1] if node.kind is LayerKind.DEPTHWISE_CONV2D else 1
        return T.conv2d(x, weight, bias, attrs.get('stride', 1), attrs.get('padding', 0), groups)

    def _factored(self, node, x, weight, bias, x_grid, w_grid):
        x_spec, w_spec = x_grid.spec, w_grid.spec
        xc = centered(x.data, x_spec)
        wc = centered(weight.data, w_spec)
        combined = accumulator_scale(w_spec, x_spec, wc.shape[0])
        b_int = bias_to_accumulator(bias.data, combined)
        attrs = node.layer.attrs
        if node.kind is LayerKind.LINEAR:
            acc = xc @ wc.T + b_int
            return acc * combined
        groups = x.shape[1] if node.kind is LayerKind.DEPTHWISE_CONV2D else 1
        acc, _ = T.conv2d_data(xc, wc, attrs.get('stride', 1), attrs.get('padding', 0), groups)
        acc = acc + b_int.reshape(1, -1, 1, 1)
        return acc * combined.reshape(1, -1, 1, 1)


def forward_fp(graph, x, observer=None):
    """ Real-valued execution, quantizer slots ignored """
    with no_grad():
        return Executor(graph, quantize=False, observer=observer).run(x)


def forward_sim_quant(graph, x, active=None, strict=True, observer=None):
    """ Simulated quantization per the placement rules """
    with no_grad():
        return Executor(graph, quantize=True, active=active, strict=strict, observer=observer).run(x)


def run_capture(graph, x, quantize=False, active=None, strict=False):
    """ Execute and return the executor, exposing per-node values """
    executor = Executor(graph, quantize=quantize, active=active, strict=strict)
    with no_grad():
        executor.run(x)
    return executor


def rename_site(graph, old, new):
    """ Move the spec (and ties) of site `old` to `new` in place """
    if old not in graph.quantizers:
        return
    items = [(new if site == old else site, spec) for site, spec in graph.quantizers.items()]
    graph.quantizers = collections.OrderedDict(items)
    graph.ties = {
        (new if site == old else site): (new if canonical == old else canonical)
        for site, canonical in graph.ties.items()
    }


def fold_bn(graph):
    """ Fold every batch norm into the Linear/Conv directly before it

    W~_k = gamma_k W_k / sqrt(var_k + eps), b~_k = beta_k + gamma_k (b_k - mu_k) / sqrt(var_k + eps).
    The folded layer keeps `annotations['bn'] = {'gamma', 'beta'}`.
    """
    result = graph.clone()
    folded = []
    for bn in [node for node in result.nodes if node.kind is LayerKind.BATCHNORM]:
        producer_name = bn.inputs[0]
        producer = result.node(producer_name) if producer_name in result else None
        if producer is None or producer.kind not in WEIGHTED or len(result.consumers(producer_name)) != 1:
            raise UnsupportedPatternError(
                'batch norm {!r} is not directly preceded by a Linear/Conv without branching'.format(bn.name),
                [bn.name],
            )

        params = bn.layer.params
        factor = params['gamma'] / np.sqrt(params['var'] + bn.layer.attrs['eps'])
        layer = producer.layer
        weight = layer.params['weight']
        layer.params['weight'] = weight * factor.reshape((-1,) + (1,) * (weight.ndim - 1))
        layer.params['bias'] = params['beta'] + factor * (layer.params['bias'] - params['mean'])
        layer.annotations['bn'] = {'gamma': params['gamma'].copy(), 'beta': params['beta'].copy()}

        for consumer in result.consumers(bn.name):
            consumer.inputs = [producer_name if source == bn.name else source for source in consumer.inputs]
        if result.output == bn.name:
            result.output = producer_name
        result.nodes = [node for node in result.nodes if node.name != bn.name]
        rename_site(result, act_site(bn.name), act_site(producer_name))
        folded.append({'batchnorm': bn.name, 'into': producer_name})

    if folded:
        result.record('fold_bn', folded=folded)
        logging.info('Folded {} batch norm layer(s)'.format(len(folded)))
    return result
