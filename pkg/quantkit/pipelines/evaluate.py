""" Metric of a model under one execution engine """
import logging

from . import Pipeline, PipelineReport, require
from ..configuration import ConfigurationError
from ..graph import forward_fp, forward_sim_quant
from ..int_executor import run_int_graph
from ..utils import mixedmethod


__all__ = ['Evaluate', 'EvaluationReport', 'ENGINES']


ENGINES = {
    'fp': forward_fp,
    'sim': forward_sim_quant,
    'int': run_int_graph,
}


class EvaluationReport(PipelineReport):
    kind = 'eval'
    outputs = None

    @property
    def value(self):
        return self.report['value']


class Evaluate(Pipeline):
    """ Score a graph with the `fp`, `sim` or `int` engine

    Usage::

        report = Evaluate.run(graph, (inputs, labels), engine='int')
        report.value, report.outputs

    The `sim` and `int` engines need fitted specs, `int` frozen ones.
    """

    @mixedmethod
    def run(self, graph, data, engine='sim'):
        require(engine in ENGINES, 'eval', 'unknown engine {!r}, expected one of {}'.format(engine, sorted(ENGINES)))
        inputs, targets = data
        metric = self.metric(graph, targets)
        if engine != 'fp':
            require(bool(graph.quantizers), 'eval', 'the {} engine needs a quantized model'.format(engine))
        if engine == 'int' and not graph.frozen:
            raise ConfigurationError('eval: the int engine needs fitted, frozen quantizers')
        if targets is None:
            targets = forward_fp(graph, inputs).data

        outputs = ENGINES[engine](graph, inputs).data
        value = metric.function(outputs, targets)
        logging.info('{} engine {}: {:.6g}'.format(engine, metric.name, value))

        report = EvaluationReport(self.configuration, {
            'engine': engine,
            'metric': metric.name,
            'value': value,
            'samples': int(inputs.shape[0]),
        })
        report.outputs = outputs
        return report
