import numpy as np
import pytest

from quantkit.configuration import Configuration
from quantkit.datasets import make_dataset, to_batches
from quantkit.graph import Graph, Layer, LayerKind, Node
from quantkit.models import build, input_metadata
from quantkit.tensor import Tensor


@pytest.fixture(autouse=True)
def global_configuration():
    Configuration.reset()
    yield
    Configuration.reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numerical_gradient(function, value, step=1e-5):
    """ Central differences of a scalar function of one array """
    value = np.array(value, dtype=np.float64)
    grad = np.zeros_like(value)
    for index in np.ndindex(*value.shape):
        original = value[index]
        value[index] = original + step
        plus = function(value)
        value[index] = original - step
        minus = function(value)
        value[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def check_gradient(build_loss, value, rtol=1e-4, atol=1e-6):
    """ Compare Tensor.backward() against central differences """
    leaf = Tensor(value, requires_grad=True)
    build_loss(leaf).backward()
    expected = numerical_gradient(lambda v: float(build_loss(Tensor(v)).data), value)
    np.testing.assert_allclose(leaf.grad, expected, rtol=rtol, atol=atol)


def linear_relu_graph(weight, bias, classifier=False):
    weight = np.asarray(weight, dtype=np.float64)
    nodes = [
        Node('fc', Layer(LayerKind.LINEAR, {'weight': weight, 'bias': bias})),
        Node('relu', Layer(LayerKind.RELU), ['fc']),
    ]
    return Graph(nodes, (weight.shape[1],), metadata={'classifier': classifier})


@pytest.fixture
def moons():
    return make_dataset('two-moons', count=400, seed=0)


@pytest.fixture
def digits_data():
    return make_dataset('digits', count=160, seed=0)


@pytest.fixture
def mlp_graph(moons):
    graph = build('mlp', in_features=2, hidden=(16, 16), classes=2, seed=0)
    graph.metadata.update(input_metadata(moons[0]))
    return graph


@pytest.fixture
def calibration(moons):
    return to_batches(moons[0][:128], batch_size=64)
