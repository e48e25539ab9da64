""" Standard post-training quantization pipeline

fold batch norm -> cross-layer equalization -> bias absorption -> attach
quantizers -> weight ranges -> AdaRound | bias correction -> activation
ranges -> freeze
"""
import logging

from . import Pipeline, PipelineReport, StepLog, evaluator, reference_targets, require
from ..adaround import AdaroundConfig, apply_adaround
from ..graph import LayerKind, attach_quantizers, fold_bn
from ..range_setting import fit_activation_ranges, fit_weight_ranges
from ..transforms import (
    absorb_bias, apply_cle, bias_correct_analytic, bias_correct_empirical, find_cle_pairs, fp_outputs_close,
)
from ..utils import mixedmethod


__all__ = ['PTQ', 'PTQReport', 'STEPS']


STEPS = (
    'fold_bn', 'cle', 'absorb_bias', 'attach_quantizers', 'weight_ranges',
    'adaround', 'bias_correction', 'activation_ranges', 'freeze',
)

# CLE and bias absorption must leave FP outputs unchanged up to rounding
FP_TOLERANCE = 1e-6


class PTQReport(PipelineReport):
    kind = 'ptq'

    @property
    def data_free(self):
        return self.report['data_free']


class PTQ(Pipeline):
    """ Post-training quantization of an FP graph

    Usage::

        graph, report = PTQ.run(graph, calibration=batches, evaluation=(inputs, labels))

    `calibration` is a list of input batches; None selects the data-free
    branch (BN-based activation ranges, analytic bias correction, no
    AdaRound). `evaluation` adds the metric after every step to the report.
    """

    @mixedmethod
    def plan(self, calibration=None):
        """ {step: mode} the configuration selects for this data situation """
        config = self.configuration
        has_data = calibration is not None
        adaround = config.adaround if config.adaround is not None else has_data
        require(not adaround or has_data, 'adaround', 'AdaRound needs calibration data (--calib)')

        bias_correction = config.bias_correction
        if bias_correction == 'auto':
            bias_correction = 'empirical' if has_data else 'analytic'
        require(bias_correction != 'empirical' or has_data, 'bias_correction',
                'empirical bias correction needs calibration data (--calib)')
        if adaround:
            bias_correction = 'off'

        return {
            'cle': bool(config.cle),
            'absorb_bias': bool(config.cle and config.absorb_bias),
            'adaround': bool(adaround),
            'bias_correction': bias_correction,
            'activation_ranges': config.act_range if has_data else 'bn',
        }

    @mixedmethod
    def run(self, graph, calibration=None, evaluation=None):
        """ Returns (quantized frozen graph, PTQReport) """
        config = self.configuration
        if calibration is not None and len(calibration) == 0:
            calibration = None
        plan = self.plan(calibration)
        data_free = calibration is None

        log = StepLog()
        if evaluation is not None:
            inputs, targets = evaluation
            targets = reference_targets(graph, inputs, targets)
            metric = self.metric(graph, evaluation[1])
            log.evaluate = evaluator(metric, inputs, targets)
            baseline = log.evaluate(graph, False)
        else:
            metric, baseline = None, None
        checks = list(calibration[:1]) if calibration else ([evaluation[0]] if evaluation is not None else [])

        if any(node.kind is LayerKind.BATCHNORM for node in graph.nodes):
            graph = fold_bn(graph)
            log.done('fold_bn', graph, folded=graph.history[-1]['folded'])
        else:
            log.skipped('fold_bn', 'no batch norm layers')

        if plan['cle']:
            before = graph
            graph = apply_cle(graph)
            record = graph.history[-1]
            details = {'pairs': len(record['pairs']), 'converged': record['converged']}
            if checks:
                close, worst = fp_outputs_close(before, graph, checks, FP_TOLERANCE)
                if not close:
                    logging.warning('CLE changed FP outputs by {:.3g} (relative)'.format(worst))
                details['fp_deviation'] = worst
            log.done('cle', graph, **details)
        else:
            log.skipped('cle', 'disabled')

        if plan['absorb_bias']:
            pairs, _ = find_cle_pairs(graph)
            missing = [pair.first for pair in pairs if graph.node(pair.first).layer.annotations.get('bn') is None]
            if data_free and missing:
                log.skipped('absorb_bias', 'no batch norm statistics for {}'.format(', '.join(missing)))
            else:
                graph = absorb_bias(graph, calibration)
                log.done('absorb_bias', graph, absorbed=len(graph.history[-1]['absorbed']))
        else:
            log.skipped('absorb_bias', 'disabled')

        graph = attach_quantizers(graph, config)
        log.done('attach_quantizers', graph, quantize=True, sites=len(graph.quantizers))

        graph = fit_weight_ranges(graph, config.weight_range)
        log.done('weight_ranges', graph, quantize=True, method=config.weight_range)

        if plan['adaround']:
            settings = {'seed': config.seed}
            settings.update(config.adaround_config)
            graph = apply_adaround(graph, calibration, AdaroundConfig.from_dict(settings))
            fallbacks = [layer['layer'] for layer in graph.history[-1]['layers'] if layer['fallback']]
            log.done('adaround', graph, quantize=True, fallback=fallbacks)
        else:
            log.skipped('adaround', 'no calibration data' if data_free else 'disabled')

        mode = plan['bias_correction']
        if mode == 'empirical':
            graph = bias_correct_empirical(graph, calibration)
            log.done('bias_correction', graph, quantize=True, mode=mode)
        elif mode == 'analytic':
            graph = bias_correct_analytic(graph)
            log.done('bias_correction', graph, quantize=True, mode=mode,
                     skipped=[record['node'] for record in graph.history[-1]['skipped']])
        else:
            log.skipped('bias_correction', 'adaround' if plan['adaround'] else 'disabled', mode=mode)

        graph = fit_activation_ranges(
            graph, plan['activation_ranges'], calibration, alpha=config.bn_alpha, classifier=self.classifier(graph),
        )
        log.done('activation_ranges', graph, quantize=True, method=plan['activation_ranges'],
                 requested=config.act_range)

        graph = graph.freeze()
        graph.record('ptq', plan=plan, data_free=data_free)
        log.done('freeze', graph, quantize=True)

        report = {
            'steps': log.steps,
            'order': log.order,
            'plan': plan,
            'data_free': data_free,
            'history': graph.history,
        }
        if metric is not None:
            report['metric'] = {
                'name': metric.name,
                'fp': baseline,
                'quantized': log.steps[-1]['metric'],
                'delta': log.steps[-1]['metric'] - baseline,
            }
        return graph, PTQReport(config, report)
