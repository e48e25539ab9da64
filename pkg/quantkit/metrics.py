""" Named evaluation metrics """
import collections

import numpy as np

from .exceptions import ContractError, DimensionError
from .graph import forward_fp, forward_sim_quant
from .tensor import Tensor


__all__ = [
    'Metric', 'METRICS', 'register_metric', 'get_metric', 'accuracy', 'output_mse', 'default_metric', 'score',
]


Metric = collections.namedtuple('Metric', 'name function higher_is_better')

METRICS = collections.OrderedDict()


def register_metric(name, higher_is_better=True):
    """ Decorator adding `function(outputs, targets) -> float` to the registry

    Usage::

        @register_metric('top2', higher_is_better=True)
        def top2(outputs, labels):
            ...
    """
    def decorator(function):
        METRICS[name] = Metric(name, function, higher_is_better)
        return function

    return decorator


def get_metric(name):
    try:
        return METRICS[name]
    except KeyError:
        raise ContractError('Unknown metric {!r}, expected one of {}'.format(name, list(METRICS)))


@register_metric('accuracy')
def accuracy(outputs, labels):
    outputs = np.asarray(outputs)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if outputs.ndim != 2 or outputs.shape[0] != labels.shape[0]:
        raise DimensionError('accuracy needs [N, C] outputs and N labels')
    return float(np.mean(outputs.argmax(axis=1) == labels))


@register_metric('output_mse', higher_is_better=False)
def output_mse(outputs, targets):
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise DimensionError('output_mse of {} against {}'.format(list(outputs.shape), list(targets.shape)))
    return float(np.mean((outputs - targets) ** 2))


def default_metric(graph):
    return 'accuracy' if graph.classifier else 'output_mse'


def score(graph, inputs, targets, metric=None, quantize=True, executor=None):
    """ Metric value of `graph` on (inputs, targets)

    `executor` overrides the forward function (e.g. the integer executor).
    """
    metric = get_metric(metric or default_metric(graph))
    if executor is None:
        executor = forward_sim_quant if quantize else forward_fp
    outputs = executor(graph, inputs)
    return metric.function(outputs.data if isinstance(outputs, Tensor) else outputs, targets)
