""" Toy model builders

Weights are He-initialized from a seeded generator; batch norms start with
unit statistics. `pretrained` trains a builder's graph in floating point,
giving the starting point every quantization pipeline expects.
"""
import logging

import numpy as np

from .exceptions import ContractError
from .graph import Graph, Layer, LayerKind, Node, run_capture
from .qat import train
from .utils import make_rng


__all__ = ['mlp', 'dw_convnet', 'residual_mlp', 'branch_net', 'MODELS', 'build', 'pretrained', 'input_metadata']


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def _linear(rng, n_in, n_out):
    return Layer(LayerKind.LINEAR, {'weight': _he(rng, (n_out, n_in), n_in), 'bias': np.zeros(n_out)})


def _conv(rng, c_in, c_out, kernel, padding=0, stride=1):
    weight = _he(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
    return Layer(LayerKind.CONV2D, {'weight': weight, 'bias': np.zeros(c_out)},
                 {'stride': stride, 'padding': padding})


def _depthwise(rng, channels, kernel, padding=0):
    weight = _he(rng, (channels, 1, kernel, kernel), kernel * kernel)
    return Layer(LayerKind.DEPTHWISE_CONV2D, {'weight': weight, 'bias': np.zeros(channels)},
                 {'stride': 1, 'padding': padding})


def _batchnorm(channels):
    return Layer(LayerKind.BATCHNORM, {
        'gamma': np.ones(channels), 'beta': np.zeros(channels),
        'mean': np.zeros(channels), 'var': np.ones(channels),
    })


def mlp(in_features=2, hidden=(32, 32), classes=2, batchnorm=True, seed=0):
    """ [Linear (-> BN) -> ReLU] * len(hidden) -> Linear """
    rng = make_rng(seed)
    nodes = []
    source = 'input'
    width = in_features
    for i, size in enumerate(hidden):
        nodes.append(Node('fc{}'.format(i), _linear(rng, width, size), [source]))
        source = 'fc{}'.format(i)
        if batchnorm:
            nodes.append(Node('bn{}'.format(i), _batchnorm(size), [source]))
            source = 'bn{}'.format(i)
        nodes.append(Node('relu{}'.format(i), Layer(LayerKind.RELU), [source]))
        source = 'relu{}'.format(i)
        width = size
    nodes.append(Node('logits', _linear(rng, width, classes), [source]))
    return Graph(nodes, (in_features,), metadata={'classifier': True, 'model': 'mlp'})


def dw_convnet(channels=1, size=8, width=8, classes=10, seed=0):
    """ Conv-BN-ReLU, depthwise-BN-ReLU6, pointwise-BN-ReLU, global AvgPool, Flatten, Linear """
    rng = make_rng(seed)
    nodes = [
        Node('conv', _conv(rng, channels, width, 3, padding=1)),
        Node('conv_bn', _batchnorm(width), ['conv']),
        Node('conv_relu', Layer(LayerKind.RELU), ['conv_bn']),
        Node('dw', _depthwise(rng, width, 3, padding=1), ['conv_relu']),
        Node('dw_bn', _batchnorm(width), ['dw']),
        Node('dw_relu6', Layer(LayerKind.RELU6), ['dw_bn']),
        Node('pw', _conv(rng, width, 2 * width, 1), ['dw_relu6']),
        Node('pw_bn', _batchnorm(2 * width), ['pw']),
        Node('pw_relu', Layer(LayerKind.RELU), ['pw_bn']),
        Node('pool', Layer(LayerKind.AVGPOOL, attrs={'kernel': size}), ['pw_relu']),
        Node('flatten', Layer(LayerKind.FLATTEN), ['pool']),
        Node('logits', _linear(rng, 2 * width, classes), ['flatten']),
    ]
    return Graph(nodes, (channels, size, size), metadata={'classifier': True, 'model': 'dw_convnet'})


def residual_mlp(in_features=2, width=32, classes=2, seed=0):
    """ stem -> ReLU -> [Linear -> ReLU -> Linear] + skip -> ReLU -> Linear """
    rng = make_rng(seed)
    nodes = [
        Node('stem', _linear(rng, in_features, width)),
        Node('stem_relu', Layer(LayerKind.RELU), ['stem']),
        Node('fc1', _linear(rng, width, width), ['stem_relu']),
        Node('fc1_relu', Layer(LayerKind.RELU), ['fc1']),
        Node('fc2', _linear(rng, width, width), ['fc1_relu']),
        Node('add', Layer(LayerKind.ADD), ['stem_relu', 'fc2']),
        Node('add_relu', Layer(LayerKind.RELU), ['add']),
        Node('logits', _linear(rng, width, classes), ['add_relu']),
    ]
    return Graph(nodes, (in_features,), metadata={'classifier': True, 'model': 'residual_mlp'})


def branch_net(channels=1, size=8, width=4, classes=10, seed=0):
    """ Two convolution branches concatenated, max-pooled and classified """
    rng = make_rng(seed)
    nodes = [
        Node('stem', _conv(rng, channels, width, 3, padding=1)),
        Node('stem_relu', Layer(LayerKind.RELU), ['stem']),
        Node('left', _conv(rng, width, width, 1), ['stem_relu']),
        Node('left_relu', Layer(LayerKind.RELU), ['left']),
        Node('right', _conv(rng, width, width, 3, padding=1), ['stem_relu']),
        Node('right_relu', Layer(LayerKind.RELU), ['right']),
        Node('concat', Layer(LayerKind.CONCAT, attrs={'axis': 1}), ['left_relu', 'right_relu']),
        Node('pool', Layer(LayerKind.MAXPOOL, attrs={'kernel': 2}), ['concat']),
        Node('flatten', Layer(LayerKind.FLATTEN), ['pool']),
        Node('logits', _linear(rng, 2 * width * (size // 2) ** 2, classes), ['flatten']),
    ]
    return Graph(nodes, (channels, size, size), metadata={'classifier': True, 'model': 'branch_net'})


MODELS = {
    'mlp': mlp,
    'dw_convnet': dw_convnet,
    'residual_mlp': residual_mlp,
    'branch_net': branch_net,
}


def build(name, **options):
    try:
        return MODELS[name](**options)
    except KeyError:
        raise ContractError('Unknown model {!r}, expected one of {}'.format(name, sorted(MODELS)))


def input_metadata(inputs):
    """ Per-channel input statistics recorded for data-free range setting """
    axes = tuple(i for i in range(inputs.ndim) if i != 1)
    return {
        'input_range': [float(inputs.min()), float(inputs.max())],
        'input_mean': inputs.mean(axis=axes).tolist(),
        'input_std': inputs.std(axis=axes).tolist(),
    }


def _batchnorm_statistics(graph, inputs, preserve=False):
    """ Set each batch norm's running mean/var to the statistics its input shows on `inputs`

    With `preserve`, gamma and beta are adjusted so the layer computes the
    same function; (beta, gamma) then describe the actual output distribution.
    """
    executor = run_capture(graph, inputs)
    for node in graph.nodes:
        if node.kind is LayerKind.BATCHNORM:
            values = executor.values[node.inputs[0]].data
            axes = tuple(i for i in range(values.ndim) if i != 1)
            mean, var = values.mean(axis=axes), values.var(axis=axes)
            params = node.layer.params
            if preserve:
                eps = node.layer.attrs['eps']
                old_std = np.sqrt(params['var'] + eps)
                new_std = np.sqrt(var + eps)
                params['beta'] = params['beta'] + params['gamma'] * (mean - params['mean']) / old_std
                params['gamma'] = params['gamma'] * new_std / old_std
            params['mean'] = mean
            params['var'] = var


def pretrained(graph, dataset, config=None):
    """ FP-train `graph` on (inputs, labels)

    Batch norm statistics are measured on the training inputs before
    training so the normalization is meaningful, and the input statistics
    are recorded in the metadata.
    """
    inputs, labels = dataset
    graph = graph.clone()
    _batchnorm_statistics(graph, inputs)
    graph.metadata.update(input_metadata(inputs))
    settings = {'epochs': 30, 'lr': 1e-2, 'optimizer': 'adam'}
    settings.update(config or {})
    trained, history = train(graph, dataset, settings, quantize=False)
    _batchnorm_statistics(trained, inputs, preserve=True)
    logging.info('Pretrained {} to validation {:.4f}'.format(
        graph.metadata.get('model', 'graph'), history[-1]['val_metric'] if history else float('nan')))
    return trained
