import numpy as np
import pytest

from quantkit.configuration import Configuration, ConfigurationError
from quantkit.datasets import to_batches
from quantkit.graph import LayerKind, attach_quantizers, fold_bn, forward_sim_quant
from quantkit.int_executor import run_int_graph
from quantkit.models import build
from quantkit.pipelines import StepLog, degradation, require, summarize
from quantkit.pipelines.diagnose import Diagnose, SPREAD_THRESHOLD
from quantkit.pipelines.evaluate import Evaluate
from quantkit.pipelines.ptq import PTQ, STEPS as PTQ_STEPS
from quantkit.pipelines.qat import QAT, STEPS as QAT_STEPS
from quantkit.quantizer import QuantizerSpec
from quantkit.range_setting import fit_weight_ranges


FAST = {'adaround_config': {'iterations': 20}}


class TestHelpers(object):

    def test_require(self):
        require(True, 'cle', 'never raised')
        with pytest.raises(ConfigurationError) as error:
            require(False, 'adaround', 'needs data')
        assert str(error.value) == 'adaround: needs data'

    def test_degradation(self):
        assert degradation(0.9, 0.8, True) == pytest.approx(0.1)
        assert degradation(0.1, 0.3, False) == pytest.approx(0.2)

    def test_summarize(self):
        summary = summarize([[0.0, 1.0, 2.0, 3.0, 4.0]])
        assert summary['min'].tolist() == [0.0]
        assert summary['median'].tolist() == [2.0]
        assert summary['q3'].tolist() == [3.0]

    def test_step_log_deltas(self):
        values = iter([0.5, 0.7])
        log = StepLog(lambda graph, quantize: next(values))
        log.done('first', graph=object())
        log.skipped('second', 'disabled')
        entry = log.done('third', graph=object())
        assert log.order == ['first', 'second', 'third']
        assert log.status('second') == 'skipped'
        assert entry['delta'] == pytest.approx(0.2)


class TestPTQPlan(object):

    def test_with_data(self, calibration):
        plan = PTQ(Configuration()).plan(calibration)
        assert plan == {
            'cle': True, 'absorb_bias': True, 'adaround': True, 'bias_correction': 'off', 'activation_ranges': 'mse',
        }

    def test_with_data_no_adaround(self, calibration):
        plan = PTQ(Configuration(adaround=False)).plan(calibration)
        assert plan['bias_correction'] == 'empirical'

    def test_data_free(self):
        plan = PTQ(Configuration()).plan(None)
        assert not plan['adaround']
        assert plan['bias_correction'] == 'analytic'
        assert plan['activation_ranges'] == 'bn'

    def test_class_uses_global_configuration(self, calibration):
        Configuration.configure(adaround=False)

        class GlobalPTQ(PTQ):
            pass

        assert GlobalPTQ.plan(calibration)['bias_correction'] == 'empirical'
        assert GlobalPTQ(Configuration()).plan(calibration)['bias_correction'] == 'off'

    def test_adaround_needs_data(self):
        with pytest.raises(ConfigurationError) as error:
            PTQ(Configuration(adaround=True)).plan(None)
        assert str(error.value).startswith('adaround:')

    def test_empirical_bias_correction_needs_data(self):
        with pytest.raises(ConfigurationError) as error:
            PTQ(Configuration(bias_correction='empirical')).plan(None)
        assert str(error.value).startswith('bias_correction:')


class TestPTQRun(object):

    def test_step_order(self, mlp_graph, calibration):
        graph, report = PTQ(Configuration(**FAST)).run(mlp_graph, calibration)
        assert report.success
        assert report['order'] == list(PTQ_STEPS)
        assert graph.frozen
        assert not any(node.kind is LayerKind.BATCHNORM for node in graph.nodes)

    def test_data_free(self, mlp_graph, moons):
        graph, report = PTQ(Configuration()).run(mlp_graph, None)
        assert report.data_free
        statuses = {entry['step']: entry['status'] for entry in report.steps}
        assert statuses['adaround'] == 'skipped'
        assert statuses['bias_correction'] == 'done'
        assert graph.frozen
        # the integer path runs on a data-free model too
        np.testing.assert_array_equal(run_int_graph(graph, moons[0]).data, forward_sim_quant(graph, moons[0]).data)

    def test_empty_calibration_is_data_free(self, mlp_graph):
        _, report = PTQ(Configuration()).run(mlp_graph, [])
        assert report.data_free

    def test_metric_per_step(self, mlp_graph, calibration, moons):
        evaluation = (moons[0][200:], moons[1][200:])
        _, report = PTQ(Configuration(adaround=False)).run(mlp_graph, calibration, evaluation)
        metric = report['metric']
        assert metric['name'] == 'accuracy'
        assert metric['delta'] == pytest.approx(metric['quantized'] - metric['fp'])
        done = [entry for entry in report.steps if entry['status'] == 'done']
        assert all('metric' in entry for entry in done)

    def test_cle_keeps_fp_outputs(self):
        graph = build('dw_convnet', seed=0)
        inputs = np.random.default_rng(0).normal(size=(32, 1, 8, 8))
        _, report = PTQ(Configuration(adaround=False)).run(graph, [inputs])
        cle = [entry for entry in report.steps if entry['step'] == 'cle'][0]
        assert cle['fp_deviation'] < 1e-6

    def test_deterministic_report(self, mlp_graph, calibration):
        config = Configuration(**FAST)
        first = PTQ(config).run(mlp_graph, calibration)[1].dumps()
        second = PTQ(config).run(mlp_graph, calibration)[1].dumps()
        assert first == second

    def test_input_graph_untouched(self, mlp_graph, calibration):
        before = mlp_graph.node('fc0').layer.weight.copy()
        PTQ(Configuration(adaround=False)).run(mlp_graph, calibration)
        np.testing.assert_array_equal(mlp_graph.node('fc0').layer.weight, before)
        assert not mlp_graph.quantizers

    def test_report_kind(self, mlp_graph, calibration):
        _, report = PTQ(Configuration(adaround=False)).run(mlp_graph, calibration)
        record = report.as_dict()
        assert record['kind'] == 'ptq'
        assert record['configuration']['adaround'] is False


class TestDiagnose(object):

    def quantized(self, config, graph, inputs):
        return Diagnose(config).prepare(graph, inputs)

    def test_sanity(self, mlp_graph, moons):
        report = Diagnose(Configuration()).run(mlp_graph, moons)
        assert report.sanity_delta == 0
        assert report['metric'] == 'accuracy'
        assert [row['rank'] for row in report.sweep] == list(range(1, len(report.sweep) + 1))

    def test_finds_planted_quantizer(self, mlp_graph, moons):
        config = Configuration(metric='output_mse')
        graph = self.quantized(config, mlp_graph, moons[0])
        graph.set_spec('w:fc1', QuantizerSpec('symmetric-signed', 8, scale=1e-9))
        report = Diagnose(config).run(graph, (moons[0], None))
        assert report.sweep[0]['site'] == 'w:fc1'
        assert report.sweep[0]['degradation'] > 0
        assert 'w:fc1' in report['channels']
        higher = [entry for entry in report.recommendations if entry['action'] == 'higher-bitwidth']
        assert higher[0]['sites'] == ['w:fc1']

    def test_split(self, mlp_graph, moons):
        report = Diagnose(Configuration(environment='W4A8')).run(mlp_graph, moons)
        assert set(report['split']) == {'full', 'weights_only', 'activations_only'}

    def test_imbalanced_channels(self, digits_data):
        graph = fold_bn(build('dw_convnet', seed=0))
        weight = graph.node('dw').layer.params['weight']
        weight[0] *= 1000.0
        config = Configuration(metric='output_mse')
        report = Diagnose(config).run(graph, (digits_data[0][:64], None))
        assert report['channel_spread']['w:dw'] > SPREAD_THRESHOLD
        actions = [entry['action'] for entry in report.recommendations]
        assert 'cle' in actions
        assert 'per-channel' in actions
        assert [entry['rank'] for entry in report.recommendations] == list(range(1, len(actions) + 1))
        severities = [entry['severity'] for entry in report.recommendations]
        assert severities == sorted(severities, reverse=True)

    def test_labels_needed_for_accuracy(self, mlp_graph, moons):
        with pytest.raises(ConfigurationError):
            Diagnose(Configuration(metric='accuracy')).run(mlp_graph, (moons[0], None))

    def test_activation_channel_statistics(self, mlp_graph, moons):
        config = Configuration(metric='output_mse')
        graph = self.quantized(config, mlp_graph, moons[0])
        statistics = Diagnose(config).channel_statistics(graph, moons[0], ['a:relu0', 'a:input'])
        assert statistics['a:relu0']['min'].shape == (16,)
        assert np.all(statistics['a:relu0']['min'] >= 0.0)
        assert statistics['a:input']['max'].shape == (2,)


class TestEvaluate(object):

    def frozen(self, mlp_graph, calibration):
        return PTQ(Configuration(adaround=False)).run(mlp_graph, calibration)[0]

    def test_engines(self, mlp_graph, calibration, moons):
        graph = self.frozen(mlp_graph, calibration)
        evaluate = Evaluate(Configuration())
        fp = evaluate.run(graph, moons, engine='fp')
        sim = evaluate.run(graph, moons, engine='sim')
        integer = evaluate.run(graph, moons, engine='int')
        assert 0.0 <= fp.value <= 1.0
        assert integer.value == sim.value
        np.testing.assert_array_equal(integer.outputs, sim.outputs)
        assert integer['engine'] == 'int'
        assert integer['samples'] == len(moons[0])

    def test_without_labels(self, mlp_graph, calibration, moons):
        graph = self.frozen(mlp_graph, calibration)
        report = Evaluate(Configuration()).run(graph, (moons[0], None), engine='fp')
        assert report['metric'] == 'output_mse'
        assert report.value == 0.0

    def test_unknown_engine(self, mlp_graph, moons):
        with pytest.raises(ConfigurationError):
            Evaluate(Configuration()).run(mlp_graph, moons, engine='gpu')

    def test_needs_quantizers(self, mlp_graph, moons):
        with pytest.raises(ConfigurationError):
            Evaluate(Configuration()).run(mlp_graph, moons, engine='sim')

    def test_int_needs_frozen_graph(self, mlp_graph, moons):
        graph = fit_weight_ranges(attach_quantizers(fold_bn(mlp_graph), Configuration()), 'minmax')
        with pytest.raises(ConfigurationError):
            Evaluate(Configuration()).run(graph, moons, engine='int')


class TestQAT(object):

    def test_settings(self, mlp_graph):
        assert QAT(Configuration()).settings(mlp_graph).bn_mode == 'static-fold'
        assert QAT(Configuration(environment='W8A8PerChannel')).settings(mlp_graph).bn_mode == 'keep-bn'
        assert QAT(Configuration(qat={'epochs': 3})).settings(mlp_graph).epochs == 3

    def test_keep_bn_needs_per_channel(self, mlp_graph):
        with pytest.raises(ConfigurationError):
            QAT(Configuration(qat={'bn_mode': 'keep-bn'})).settings(mlp_graph)

    def test_needs_labels(self, mlp_graph, moons):
        with pytest.raises(ConfigurationError):
            QAT(Configuration()).run(mlp_graph, (moons[0], None))

    def test_run(self, mlp_graph, moons):
        graph, report = QAT(Configuration(qat={'epochs': 2})).run(mlp_graph, moons, evaluation=moons)
        assert report['order'] == list(QAT_STEPS)
        assert len(report.history) == 2
        assert graph.frozen
        assert report['qat']['bn_mode'] == 'static-fold'
        np.testing.assert_array_equal(run_int_graph(graph, moons[0]).data, forward_sim_quant(graph, moons[0]).data)

    def test_run_keeps_then_absorbs_bn(self, mlp_graph, moons):
        config = Configuration(environment='W8A8PerChannel', qat={'epochs': 1})
        graph, report = QAT(config).run(mlp_graph, moons)
        statuses = {entry['step']: entry['status'] for entry in report.steps}
        assert statuses['batchnorm'] == 'skipped'
        assert statuses['absorb_bn'] == 'done'
        assert not any(node.kind is LayerKind.BATCHNORM for node in graph.nodes)
        assert graph.frozen

    def test_metrics_file(self, mlp_graph, moons, tmpdir):
        path = str(tmpdir.join('metrics.jsonl'))
        calibration = to_batches(moons[0][:64])
        QAT(Configuration(qat={'epochs': 1})).run(mlp_graph, moons, calibration, metrics_path=path)
        assert tmpdir.join('metrics.jsonl').check()
