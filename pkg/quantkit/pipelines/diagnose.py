""" Quantization debugging workflow

1. sanity: every quantizer bypassed must reproduce the FP metric exactly
2. weights-only against activations-only quantization
3. sweep: one quantizer active at a time, ranked by the damage it does
4. per-channel range summaries of the flagged tensors
5. ranked recommendations
"""
import logging

import numpy as np

from . import Pipeline, PipelineReport, degradation, require, summarize
from ..datasets import to_batches
from ..graph import (
    INPUT, LayerKind, attach_quantizers, fold_bn, forward_fp, forward_sim_quant, run_capture,
)
from ..metrics import get_metric
from ..range_setting import fit_activation_ranges, fit_weight_ranges
from ..utils import mixedmethod


__all__ = ['Diagnose', 'DiagnosticReport', 'SPREAD_THRESHOLD', 'FLAGGED']


# channel range ratio above which a weight tensor counts as imbalanced
SPREAD_THRESHOLD = 10.0
FLAGGED = 3
# metric loss below which a quantization setting counts as harmless
TOLERANCE = 1e-3


class DiagnosticReport(PipelineReport):
    kind = 'diagnose'

    @property
    def sweep(self):
        return self.report['sweep']

    @property
    def recommendations(self):
        return self.report['recommendations']

    @property
    def sanity_delta(self):
        return self.report['sanity']['delta']


def _channel_spread(weight):
    """ max / min of the per-output-channel absolute ranges (inf with a dead channel) """
    ranges = np.abs(weight).reshape(weight.shape[0], -1).max(axis=1)
    if ranges.max() == 0:
        return 1.0
    if ranges.min() == 0:
        return float('inf')
    return float(ranges.max() / ranges.min())


def _channels_by_samples(values):
    """ [N, C, ...] or [N, C] -> [C, samples] """
    values = np.moveaxis(np.asarray(values), 1, 0)
    return values.reshape(values.shape[0], -1)


class Diagnose(Pipeline):
    """ Locate the quantizers responsible for an accuracy drop

    Usage::

        report = Diagnose(config).run(graph, (inputs, labels))

    A graph with fitted quantizers is diagnosed as is; an FP graph is first
    given the configured quantizers with plain range setting on `inputs`.
    """

    @mixedmethod
    def prepare(self, graph, inputs):
        if graph.quantizers and all(spec is not None and spec.fitted for spec in graph.quantizers.values()):
            return graph
        config = self.configuration
        if any(node.kind is LayerKind.BATCHNORM for node in graph.nodes):
            graph = fold_bn(graph)
        graph = attach_quantizers(graph, config)
        graph = fit_weight_ranges(graph, config.weight_range)
        return fit_activation_ranges(
            graph, config.act_range, to_batches(inputs), alpha=config.bn_alpha, classifier=self.classifier(graph),
        )

    @mixedmethod
    def run(self, graph, data):
        """ Returns a DiagnosticReport

        `data` is (inputs, labels); with labels None the configured metric
        must be output MSE, scored against the FP outputs.
        """
        config = self.configuration
        inputs, labels = data
        require(labels is not None or config.metric in (None, 'output_mse'), 'diagnose',
                'metric {!r} needs labels'.format(config.metric))
        graph = self.prepare(graph, inputs)
        metric = self.metric(graph, labels)
        fp_outputs = forward_fp(graph, inputs).data
        targets = labels if labels is not None else fp_outputs
        higher = metric.higher_is_better
        mse = get_metric('output_mse')

        def evaluate(active):
            outputs = forward_sim_quant(graph, inputs, active=active).data
            return metric.function(outputs, targets), mse.function(outputs, fp_outputs)

        fp_value = metric.function(fp_outputs, targets)
        bypass_value, _ = evaluate([])
        sanity = {'fp': fp_value, 'bypassed': bypass_value, 'delta': bypass_value - fp_value}
        if sanity['delta'] != 0:
            logging.error('Bypassing every quantizer changed the metric by {}'.format(sanity['delta']))

        full_value, full_mse = evaluate(None)
        weights_value, weights_mse = evaluate(graph.weight_sites())
        acts_value, acts_mse = evaluate(graph.activation_sites())
        split = {
            'full': {'metric': full_value, 'output_mse': full_mse,
                     'degradation': degradation(fp_value, full_value, higher)},
            'weights_only': {'metric': weights_value, 'output_mse': weights_mse,
                             'degradation': degradation(fp_value, weights_value, higher)},
            'activations_only': {'metric': acts_value, 'output_mse': acts_mse,
                                 'degradation': degradation(fp_value, acts_value, higher)},
        }

        rows = []
        for site in graph.quantizers:
            value, site_mse = evaluate([site])
            spec = graph.spec(site)
            rows.append({
                'site': site,
                'kind': 'weight' if site.startswith('w:') else 'activation',
                'bitwidth': spec.bitwidth,
                'metric': value,
                'output_mse': site_mse,
                'degradation': degradation(fp_value, value, higher),
            })
        rows.sort(key=lambda row: (-row['degradation'], -row['output_mse']))
        for rank, row in enumerate(rows, 1):
            row['rank'] = rank
        logging.info('Quantizer sweep: worst site {}'.format(rows[0]['site'] if rows else None))

        spreads = {
            site: _channel_spread(graph.node(site[2:]).layer.params['weight']) for site in graph.weight_sites()
        }
        flagged = [row['site'] for row in rows[:FLAGGED]]
        flagged += [site for site, spread in spreads.items() if spread > SPREAD_THRESHOLD and site not in flagged]
        channels = self.channel_statistics(graph, inputs, flagged)

        report = {
            'metric': metric.name,
            'sanity': sanity,
            'split': split,
            'sweep': rows,
            'channel_spread': spreads,
            'channels': channels,
            'recommendations': self.recommend(split, rows, spreads),
        }
        return DiagnosticReport(config, report)

    @mixedmethod
    def channel_statistics(self, graph, inputs, sites):
        """ Per-channel min / quartiles / max of weights (per output channel) or FP activations """
        executor = None
        statistics = {}
        for site in sites:
            name = site[2:]
            if site.startswith('w:'):
                weight = graph.node(name).layer.params['weight']
                values = weight.reshape(weight.shape[0], -1)
            else:
                if executor is None:
                    executor = run_capture(graph, inputs)
                value = executor.values[INPUT] if name == INPUT else executor.raw[name]
                values = _channels_by_samples(value.data)
            statistics[site] = summarize(values)
        return statistics

    @mixedmethod
    def recommend(self, split, rows, spreads):
        """ Ranked fixes, most damaging problem first """
        config = self.configuration
        recommendations = []

        def add(action, reason, sites, weight):
            recommendations.append({'action': action, 'reason': reason, 'sites': sites, 'severity': weight})

        imbalanced = sorted(site for site, spread in spreads.items() if spread > SPREAD_THRESHOLD)
        site_damage = {row['site']: row['degradation'] for row in rows}
        weights_damage = split['weights_only']['degradation']
        acts_damage = split['activations_only']['degradation']
        imbalance_damage = max([site_damage.get(site, 0.0) for site in imbalanced] + [weights_damage])

        if imbalanced:
            add('cle', 'weight channel ranges differ by more than {}x'.format(SPREAD_THRESHOLD),
                imbalanced, imbalance_damage)
            if config.weight_granularity == 'per-tensor':
                add('per-channel', 'per-tensor weight grids waste resolution on imbalanced channels',
                    imbalanced, imbalance_damage)

        if weights_damage > TOLERANCE:
            add('bias-correction', 'weight quantization shifts output means', [], weights_damage)
            add('adaround', 'weight rounding costs {:.4g}'.format(weights_damage), [], weights_damage)

        if acts_damage > TOLERANCE and config.act_range == 'minmax':
            add('act-range-mse', 'min-max activation ranges are sensitive to outliers', [], acts_damage)

        for row in rows[:FLAGGED]:
            if row['degradation'] > TOLERANCE:
                add('higher-bitwidth', '{} alone costs {:.4g}'.format(row['site'], row['degradation']),
                    [row['site']], row['degradation'])

        recommendations.sort(key=lambda entry: -entry['severity'])
        for rank, entry in enumerate(recommendations, 1):
            entry['rank'] = rank
        return recommendations
