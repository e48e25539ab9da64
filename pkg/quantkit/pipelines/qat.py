""" Standard quantization-aware training pipeline

batch norm handling -> cross-layer equalization -> attach quantizers ->
range initialization -> train with learnable quantizer parameters ->
(merge kept batch norms) -> freeze
"""
import numpy as np

from . import Pipeline, PipelineReport, StepLog, evaluator, require
from ..datasets import to_batches
from ..graph import LayerKind, attach_quantizers
from ..qat import QatConfig, absorb_bn_into_channel_scales, fold_bn_static_for_qat, train
from ..range_setting import fit_activation_ranges, fit_weight_ranges
from ..transforms import apply_cle
from ..utils import mixedmethod


__all__ = ['QAT', 'QATReport', 'STEPS']


STEPS = ('batchnorm', 'cle', 'attach_quantizers', 'range_init', 'train', 'absorb_bn', 'freeze')


class QATReport(PipelineReport):
    kind = 'qat'

    @property
    def history(self):
        return self.report['history']


class QAT(Pipeline):
    """ Quantization-aware training of an FP graph on labeled data

    Usage::

        graph, report = QAT(config).run(graph, (inputs, labels), metrics_path='metrics.jsonl')

    Batch norms are folded before training unless the weights are
    per-channel, in which case they are kept, trained and merged into the
    per-channel scales afterwards (`qat.bn_mode` overrides the choice).
    """

    @mixedmethod
    def settings(self, graph):
        config = self.configuration
        settings = {'seed': config.seed}
        has_bn = any(node.kind is LayerKind.BATCHNORM for node in graph.nodes)
        if has_bn and config.weight_granularity == 'per-channel':
            settings['bn_mode'] = 'keep-bn'
        settings.update(config.qat)
        qat_config = QatConfig.from_dict(settings)
        require(qat_config.bn_mode != 'keep-bn' or config.weight_granularity == 'per-channel', 'batchnorm',
                'keeping batch norms during training needs per-channel weight quantization')
        return qat_config

    @mixedmethod
    def run(self, graph, dataset, calibration=None, evaluation=None, metrics_path=None):
        """ Returns (trained frozen graph, QATReport)

        `calibration` batches initialize the ranges; by default they are cut
        from the training inputs.
        """
        config = self.configuration
        inputs, labels = dataset
        require(labels is not None, 'train', 'quantization-aware training needs labeled data')
        qat_config = self.settings(graph)
        if calibration is None:
            calibration = to_batches(np.asarray(inputs)[:256], qat_config.batch_size)

        log = StepLog()
        metric = self.metric(graph, labels)
        if evaluation is not None:
            log.evaluate = evaluator(metric, evaluation[0], evaluation[1])

        has_bn = any(node.kind is LayerKind.BATCHNORM for node in graph.nodes)
        keep_bn = has_bn and qat_config.bn_mode == 'keep-bn'
        if has_bn and not keep_bn:
            graph = fold_bn_static_for_qat(graph)
            log.done('batchnorm', graph, mode='static-fold')
        else:
            log.skipped('batchnorm', 'kept for training' if keep_bn else 'no batch norm layers',
                        mode=qat_config.bn_mode if has_bn else None)

        if config.cle and not keep_bn:
            graph = apply_cle(graph)
            log.done('cle', graph, pairs=len(graph.history[-1]['pairs']))
        else:
            log.skipped('cle', 'batch norm kept' if keep_bn else 'disabled')

        graph = attach_quantizers(graph, config)
        log.done('attach_quantizers', graph, quantize=True, sites=len(graph.quantizers))

        graph = fit_weight_ranges(graph, config.weight_range)
        graph = fit_activation_ranges(
            graph, config.act_range, calibration, alpha=config.bn_alpha, classifier=self.classifier(graph),
        )
        log.done('range_init', graph, quantize=True, weights=config.weight_range, activations=config.act_range)

        graph, history = train(graph, (inputs, labels), qat_config, quantize=True,
                               metric=metric.name, metrics_path=metrics_path)
        log.done('train', graph, quantize=True, epochs=len(history), learnable_ranges=qat_config.learnable_ranges)

        if keep_bn:
            graph = absorb_bn_into_channel_scales(graph)
            log.done('absorb_bn', graph, quantize=True, flipped=graph.history[-1]['flipped'])
        else:
            log.skipped('absorb_bn', 'batch norm folded before training' if has_bn else 'no batch norm layers')

        graph = graph.freeze()
        log.done('freeze', graph, quantize=True)

        report = {
            'steps': log.steps,
            'order': log.order,
            'qat': qat_config.as_dict(),
            'history': history,
            'metric': metric.name,
        }
        return graph, QATReport(config, report)
