import numpy as np
import pytest

from quantkit.exceptions import ContractError, DimensionError
from quantkit.graph import forward_fp
from quantkit.metrics import METRICS, accuracy, default_metric, get_metric, output_mse, register_metric, score
from quantkit.models import build

from conftest import linear_relu_graph


class TestMetrics(object):

    def test_accuracy(self):
        outputs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
        assert accuracy(outputs, [0, 1, 1, 1]) == 0.75

    def test_accuracy_shape(self):
        with pytest.raises(DimensionError):
            accuracy(np.zeros((3, 2)), [0, 1])
        with pytest.raises(DimensionError):
            accuracy(np.zeros(3), [0, 1, 1])

    def test_output_mse(self):
        assert output_mse([[1.0, 2.0]], [[0.0, 4.0]]) == 2.5
        with pytest.raises(DimensionError):
            output_mse(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_registry(self):
        assert list(METRICS)[:2] == ['accuracy', 'output_mse']
        assert get_metric('accuracy').higher_is_better
        assert not get_metric('output_mse').higher_is_better

    def test_register(self):
        @register_metric('max_error', higher_is_better=False)
        def max_error(outputs, targets):
            return float(np.max(np.abs(np.asarray(outputs) - targets)))

        try:
            metric = get_metric('max_error')
            assert metric.function([1.0, -3.0], [0.0, 0.0]) == 3.0
            assert not metric.higher_is_better
        finally:
            del METRICS['max_error']

    def test_unknown(self):
        with pytest.raises(ContractError):
            get_metric('f1')


class TestScore(object):

    def test_default_metric(self):
        assert default_metric(build('mlp')) == 'accuracy'
        assert default_metric(linear_relu_graph([[1.0]], [0.0])) == 'output_mse'

    def test_fp_score(self, mlp_graph, moons):
        inputs, labels = moons
        expected = accuracy(forward_fp(mlp_graph, inputs).data, labels)
        assert score(mlp_graph, inputs, labels, quantize=False) == expected

    def test_custom_executor(self):
        graph = linear_relu_graph([[1.0, 1.0]], [0.0])
        constant = lambda graph, inputs: np.ones((len(inputs), 1))
        value = score(graph, np.zeros((4, 2)), np.zeros((4, 1)), 'output_mse', executor=constant)
        assert value == 1.0
