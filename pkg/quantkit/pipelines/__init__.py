import logging

import numpy as np

from ..configuration import Configuration, ConfigurationError
from ..graph import forward_fp, forward_sim_quant
from ..metrics import default_metric, get_metric, score
from ..utils import dumps_stable, jsonable, mixedmethod, write_json


__all__ = [
    'Pipeline', 'PipelineReport', 'StepLog', 'evaluator', 'reference_targets',
    'require', 'degradation', 'summarize',
]


class PipelineMeta(type):
    @property
    def configuration(cls):
        """ Classproperty for Pipeline.configuration """
        if not cls._configuration:
            cls._configuration = Configuration.instantiate()
        return cls._configuration

    @property
    def config(cls):
        """ Alias for Pipeline.configuration """
        return cls.configuration


class Pipeline(object, metaclass=PipelineMeta):
    """ Abstract class for the quantization workflows

    Allows instantiation with a specific configuration instance,
    or using classmethods for global configuration::

        # Use global configuration
        >>> PTQ.config
        <Configuration W8A8 ... >

        >>> PTQ.run(graph, calibration)

        # Use instance configuration
        >>> PTQ(config).config
        <Configuration W4A8 ... >

        >>> PTQ(config).run(graph, calibration)

    Methods can be called as either classmethods or instancemethods,
    so they are wrapped in the @mixedmethod decorator
    """

    _configuration = None

    def __init__(self, configuration=None):
        super(Pipeline, self).__init__()
        self._configuration = configuration

    @property
    def configuration(self):
        """ Instance property for Pipeline().configuration """
        if not self._configuration:
            self._configuration = Configuration.instantiate()
        return self._configuration

    @property
    def config(self):
        """ Alias for Pipeline().configuration """
        return self.configuration

    @mixedmethod
    def metric(self, graph, targets=None):
        """ The configured metric, or the graph's default one

        Label-free evaluation falls back to output MSE against FP outputs.
        """
        name = self.configuration.metric or default_metric(graph)
        if targets is None and name == 'accuracy':
            name = 'output_mse'
        return get_metric(name)

    @mixedmethod
    def classifier(self, graph):
        configured = self.configuration.classifier
        return graph.classifier if configured is None else bool(configured)


class StepLog(object):
    """ Ordered record of pipeline steps with the metric after each one

    `evaluate(graph, quantize)` is called after every completed step when
    evaluation data was given; deltas are against the previous measured step.
    """

    def __init__(self, evaluate=None):
        self.steps = []
        self.evaluate = evaluate
        self._last = None

    def done(self, name, graph=None, quantize=False, **details):
        entry = {'step': name, 'status': 'done'}
        entry.update(details)
        if self.evaluate is not None and graph is not None:
            value = self.evaluate(graph, quantize)
            entry['metric'] = value
            entry['delta'] = None if self._last is None else value - self._last
            self._last = value
        self.steps.append(entry)
        logging.info('Step {} done{}'.format(
            name, '' if 'metric' not in entry else ', metric {:.6g}'.format(entry['metric'])))
        return entry

    def skipped(self, name, reason, **details):
        entry = {'step': name, 'status': 'skipped', 'reason': reason}
        entry.update(details)
        self.steps.append(entry)
        logging.info('Step {} skipped: {}'.format(name, reason))
        return entry

    @property
    def order(self):
        return [entry['step'] for entry in self.steps]

    def status(self, name):
        for entry in self.steps:
            if entry['step'] == name:
                return entry['status']
        return None


def _partial_sim(graph, inputs):
    return forward_sim_quant(graph, inputs, strict=False)


def evaluator(metric, inputs, targets):
    """ evaluate(graph, quantize) for StepLog; unfitted quantizers pass through """
    def evaluate(graph, quantize):
        return score(graph, inputs, targets, metric.name, quantize, _partial_sim if quantize else None)

    return evaluate


def reference_targets(graph, inputs, targets):
    """ Labels when given, else the FP outputs of `graph` """
    return targets if targets is not None else forward_fp(graph, inputs).data


class PipelineReport(Pipeline):
    """ Machine-readable outcome of a pipeline run

    Holds a JSON-able `report` dict; written with stable key order so
    identical runs give byte-identical files.

    `PipelineReport` is always instantiated, so `@mixedmethod` decorators
    are not required
    """

    kind = 'pipeline'
    report = None

    def __init__(self, configuration=None, report=None):
        super(PipelineReport, self).__init__(configuration=configuration)

        if report is not None:
            self.report = jsonable(report)

            if not self.success:
                logging.error('{} report failed: {}'.format(self.kind, self.report.get('error')))
            else:
                logging.debug('{} report: {}'.format(self.kind, self.report))

    @property
    def success(self):
        return self.report is not None and not self.report.get('error')

    @property
    def steps(self):
        return self.report.get('steps', [])

    def as_dict(self):
        record = {'kind': self.kind, 'configuration': self.configuration.as_dict()}
        record.update(self.report or {})
        return record

    def dumps(self):
        return dumps_stable(self.as_dict())

    def write(self, path):
        write_json(path, self.as_dict())
        logging.info('Wrote {} report to {}'.format(self.kind, path))

    def __getitem__(self, key):
        return self.report[key]


def require(condition, step, message):
    """ ConfigurationError naming the pipeline step when `condition` fails """
    if not condition:
        raise ConfigurationError('{}: {}'.format(step, message))


def degradation(reference, value, higher_is_better):
    """ How much worse `value` is than `reference`, positive when worse """
    return float(reference - value) if higher_is_better else float(value - reference)


def summarize(values):
    """ min / quartiles / max per channel of [channels, samples] data """
    values = np.asarray(values, dtype=np.float64)
    quartiles = np.percentile(values, [25, 50, 75], axis=1)
    return {
        'min': values.min(axis=1),
        'q1': quartiles[0],
        'median': quartiles[1],
        'q3': quartiles[2],
        'max': values.max(axis=1),
    }
