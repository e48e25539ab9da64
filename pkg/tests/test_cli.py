import json

import pytest

from quantkit.cli import EXIT_CONFIGURATION, EXIT_OK, main
from quantkit.serialization import load_model


@pytest.fixture
def workspace(tmpdir):
    data = str(tmpdir.join('moons.json'))
    model = str(tmpdir.join('model.json'))
    assert main(['-q', 'make-data', '--dataset', 'two-moons', '--count', '300', '--seed', '1',
                 '--holdout', str(tmpdir.join('holdout.json')), '--out', data]) == EXIT_OK
    assert main(['-q', 'make-model', '--model-kind', 'mlp', '--data', data, '--epochs', '0', '--out', model]) == EXIT_OK
    return tmpdir


class TestCommands(object):

    def test_make_model(self, workspace):
        graph = load_model(str(workspace.join('model.json')))
        assert graph.input_shape == (2,)
        assert graph.classifier

    def test_ptq_then_eval(self, workspace):
        quantized = str(workspace.join('quantized.json'))
        assert main([
            '-q', 'ptq', '--model', str(workspace.join('model.json')), '--calib', str(workspace.join('moons.json')),
            '--data', str(workspace.join('holdout.json')), '--no-adaround', '--out', quantized,
        ]) == EXIT_OK
        report = json.loads(workspace.join('quantized.report.json').read())
        assert report['kind'] == 'ptq'
        assert report['plan']['bias_correction'] == 'empirical'
        assert load_model(quantized).frozen

        values = {}
        for engine in ('sim', 'int'):
            out = str(workspace.join('{}.json'.format(engine)))
            assert main(['-q', 'eval', '--model', quantized, '--data', str(workspace.join('holdout.json')),
                         '--engine', engine, '--out', out]) == EXIT_OK
            values[engine] = json.loads(workspace.join('{}.json'.format(engine)).read())['value']
        assert values['sim'] == values['int']

    def test_ptq_data_free(self, workspace):
        quantized = str(workspace.join('quantized.json'))
        report = str(workspace.join('report.json'))
        assert main(['-q', 'ptq', '--model', str(workspace.join('model.json')), '--wbits', '4',
                     '--out', quantized, '--report', report]) == EXIT_OK
        record = json.loads(workspace.join('report.json').read())
        assert record['data_free']
        assert record['configuration']['weight_bitwidth'] == 4

    def test_diagnose_to_stdout(self, workspace, capsys):
        assert main(['-q', 'diagnose', '--model', str(workspace.join('model.json')),
                     '--calib', str(workspace.join('holdout.json'))]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report['kind'] == 'diagnose'
        assert report['sanity']['delta'] == 0

    def test_deterministic_outputs(self, workspace):
        for run in ('first', 'second'):
            workspace.mkdir(run)
            assert main(['-q', 'ptq', '--model', str(workspace.join('model.json')),
                         '--calib', str(workspace.join('moons.json')), '--seed', '3',
                         '--adaround', '--config', str(self.fast_adaround(workspace)),
                         '--out', str(workspace.join(run, 'quantized.json'))]) == EXIT_OK
        for name in ('quantized.json', 'quantized.bin', 'quantized.report.json'):
            assert workspace.join('first', name).read_binary() == workspace.join('second', name).read_binary()

    def fast_adaround(self, workspace):
        config = workspace.join('adaround.json')
        config.write(json.dumps({'adaround_config': {'iterations': 20}}))
        return config

    def test_config_file_beats_flags(self, workspace):
        config = workspace.join('config.json')
        config.write(json.dumps({'weight_bitwidth': 6, 'adaround': False}))
        assert main(['-q', 'ptq', '--model', str(workspace.join('model.json')), '--wbits', '4',
                     '--config', str(config), '--out', str(workspace.join('quantized.json'))]) == EXIT_OK
        record = json.loads(workspace.join('quantized.report.json').read())
        assert record['configuration']['weight_bitwidth'] == 6


class TestExitCodes(object):

    def test_malformed_config(self, workspace):
        config = workspace.join('config.json')
        config.write('{')
        assert main(['-q', 'eval', '--model', str(workspace.join('model.json')),
                     '--data', str(workspace.join('moons.json')), '--engine', 'fp',
                     '--config', str(config)]) == EXIT_CONFIGURATION

    def test_adaround_without_data(self, workspace):
        assert main(['-q', 'ptq', '--model', str(workspace.join('model.json')), '--adaround',
                     '--out', str(workspace.join('quantized.json'))]) == EXIT_CONFIGURATION

    def test_int_engine_on_fp_model(self, workspace):
        assert main(['-q', 'eval', '--model', str(workspace.join('model.json')),
                     '--data', str(workspace.join('moons.json')), '--engine', 'int']) == EXIT_CONFIGURATION

    def test_missing_model(self, tmpdir):
        assert main(['-q', 'eval', '--model', str(tmpdir.join('missing.json')),
                     '--data', str(tmpdir.join('missing-data.json'))]) == EXIT_CONFIGURATION
