import numpy as np
import pytest

from quantkit.exceptions import ContractError
from quantkit.graph import LayerKind, forward_fp
from quantkit.models import MODELS, build, input_metadata, pretrained


class TestBuilders(object):

    @pytest.mark.parametrize('name, shape, classes', [
        ('mlp', (2,), 2), ('dw_convnet', (1, 8, 8), 10), ('residual_mlp', (2,), 2), ('branch_net', (1, 8, 8), 10),
    ])
    def test_output_shape(self, rng, name, shape, classes):
        graph = build(name, seed=0)
        assert graph.input_shape == shape
        assert graph.classifier
        assert forward_fp(graph, rng.normal(size=(3,) + shape)).shape == (3, classes)

    def test_seeded(self):
        first, second = build('mlp', seed=4), build('mlp', seed=4)
        np.testing.assert_array_equal(first.node('fc0').layer.weight, second.node('fc0').layer.weight)

    def test_without_batchnorm(self):
        graph = build('mlp', hidden=(4,), batchnorm=False)
        assert [node.name for node in graph.nodes] == ['fc0', 'relu0', 'logits']

    def test_unknown(self):
        with pytest.raises(ContractError):
            build('resnet50')

    def test_registry(self):
        assert sorted(MODELS) == ['branch_net', 'dw_convnet', 'mlp', 'residual_mlp']


class TestPretrained(object):

    def test_input_metadata(self):
        inputs = np.array([[0.0, 1.0], [2.0, 3.0]])
        metadata = input_metadata(inputs)
        assert metadata['input_range'] == [0.0, 3.0]
        assert metadata['input_mean'] == [1.0, 2.0]
        assert metadata['input_std'] == [1.0, 1.0]

    def test_batchnorm_statistics_describe_outputs(self, moons):
        graph = pretrained(build('mlp', hidden=(8,), seed=0), moons, {'epochs': 2})
        assert graph.metadata['input_range'][0] < 0.0
        bn = graph.node('bn0').layer.params
        assert np.all(bn['var'] > 0.0)
        assert not np.allclose(bn['mean'], 0.0)

    def test_learns(self, moons):
        graph = pretrained(build('mlp', hidden=(16, 16), seed=0), moons, {'epochs': 10})
        assert graph.history[-1]['best_val_metric'] > 0.8
        assert graph.node('bn0').kind is LayerKind.BATCHNORM
