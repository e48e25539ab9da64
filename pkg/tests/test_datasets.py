import numpy as np
import pytest

from quantkit.datasets import (
    blobs, digits, load_batches, load_dataset, make_dataset, save_dataset, split, to_batches, two_moons,
)
from quantkit.exceptions import ContractError
from quantkit.serialization import ModelFormatError, save_tensors


class TestGenerators(object):

    def test_two_moons(self):
        inputs, labels = two_moons(count=101, seed=3)
        assert inputs.shape == (101, 2)
        assert labels.dtype == np.int64
        assert set(labels.tolist()) == {0, 1}

    def test_seeded(self):
        first = make_dataset('blobs', count=50, seed=7)
        second = make_dataset('blobs', count=50, seed=7)
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])
        assert not np.array_equal(first[0], make_dataset('blobs', count=50, seed=8)[0])

    def test_blobs_shape(self):
        inputs, labels = blobs(count=30, classes=3, features=5)
        assert inputs.shape == (30, 5)
        assert labels.max() < 3
        with pytest.raises(ContractError):
            blobs(classes=1)

    def test_digits(self):
        images, labels = digits(count=40, seed=1)
        assert images.shape == (40, 1, 8, 8)
        assert labels.min() >= 0 and labels.max() <= 9
        assert -1.0 < images.min() and images.max() < 2.0

    def test_unknown(self):
        with pytest.raises(ContractError):
            make_dataset('mnist')


class TestBatches(object):

    def test_split(self):
        inputs, labels = np.arange(10.0).reshape(10, 1), np.arange(10)
        (train_x, train_y), (held_x, held_y) = split(inputs, labels, 0.3)
        assert len(held_x) == 3 and len(train_x) == 7
        assert sorted(train_y.tolist() + held_y.tolist()) == list(range(10))

    def test_split_shares_generator(self):
        inputs, labels = np.arange(10.0).reshape(10, 1), np.arange(10)
        seeded = split(inputs, labels, 0.3, seed=5)
        drawn = split(inputs, labels, 0.3, np.random.default_rng(5))
        np.testing.assert_array_equal(seeded[1][1], drawn[1][1])
        np.testing.assert_array_equal(seeded[0][0], drawn[0][0])

    def test_to_batches(self):
        batches = to_batches(np.zeros((130, 2)), 64)
        assert [len(batch) for batch in batches] == [64, 64, 2]

    def test_file_round_trip(self, tmpdir):
        inputs, labels = make_dataset('digits', count=70, seed=0)
        path = str(tmpdir.join('digits.json'))
        save_dataset(path, inputs, labels, batch_size=32)
        batches = load_batches(path)
        assert [len(batch[0]) for batch in batches] == [32, 32, 6]
        loaded_inputs, loaded_labels = load_dataset(path)
        np.testing.assert_array_equal(loaded_inputs, inputs)
        np.testing.assert_array_equal(loaded_labels, labels)

    def test_unlabelled(self, tmpdir):
        path = str(tmpdir.join('calib.json'))
        save_dataset(path, np.ones((5, 2)))
        inputs, labels = load_dataset(path)
        assert inputs.shape == (5, 2)
        assert labels is None

    def test_batch_order(self, tmpdir):
        # input_10 sorts after input_2
        path = str(tmpdir.join('calib.json'))
        save_dataset(path, np.arange(12.0).reshape(12, 1), batch_size=1)
        inputs, _ = load_dataset(path)
        assert inputs.reshape(-1).tolist() == list(np.arange(12.0))

    def test_no_inputs(self, tmpdir):
        path = str(tmpdir.join('other.json'))
        save_tensors({'weights': np.ones(3)}, path)
        with pytest.raises(ModelFormatError):
            load_batches(path)
