""" Desk-scale datasets

Every generator returns `(inputs, labels)` as float64 / int64 arrays and draws
from one seeded generator. Datasets are stored in the tensor container as
`input_<i>` / `label_<i>` batch pairs.
"""
import logging
import re

import numpy as np
from scipy import ndimage

from .exceptions import ContractError
from .serialization import ModelFormatError, load_tensors, save_tensors
from .utils import make_rng


__all__ = ['two_moons', 'blobs', 'digits', 'DATASETS', 'make_dataset', 'to_batches',
           'save_dataset', 'load_dataset', 'load_batches', 'split']


def two_moons(count=1000, noise=0.1, seed=0):
    """ Two interleaved half circles, labels 0/1 """
    rng = make_rng(seed)
    half = count // 2
    outer = np.linspace(0, np.pi, count - half)
    inner = np.linspace(0, np.pi, half)
    points = np.concatenate([
        np.stack([np.cos(outer), np.sin(outer)], axis=1),
        np.stack([1 - np.cos(inner), 0.5 - np.sin(inner)], axis=1),
    ])
    labels = np.concatenate([np.zeros(count - half), np.ones(half)]).astype(np.int64)
    points = points + rng.normal(0.0, noise, points.shape)
    order = rng.permutation(count)
    return points[order], labels[order]


def blobs(count=1000, classes=4, features=8, spread=1.0, seed=0):
    """ Isotropic Gaussian clusters with centers drawn in [-4, 4]^features """
    if classes < 2:
        raise ContractError('blobs needs at least two classes')
    rng = make_rng(seed)
    centers = rng.uniform(-4.0, 4.0, (classes, features))
    labels = rng.integers(0, classes, count)
    points = centers[labels] + rng.normal(0.0, spread, (count, features))
    return points, labels.astype(np.int64)


# 5x3 strokes of the ten digits, '#' inked
GLYPHS = [
    ['###', '#.#', '#.#', '#.#', '###'],
    ['.#.', '##.', '.#.', '.#.', '###'],
    ['###', '..#', '###', '#..', '###'],
    ['###', '..#', '.##', '..#', '###'],
    ['#.#', '#.#', '###', '..#', '..#'],
    ['###', '#..', '###', '..#', '###'],
    ['###', '#..', '###', '#.#', '###'],
    ['###', '..#', '.#.', '.#.', '.#.'],
    ['###', '#.#', '###', '#.#', '###'],
    ['###', '#.#', '###', '..#', '###'],
]


def _glyph(digit):
    return np.array([[1.0 if c == '#' else 0.0 for c in row] for row in GLYPHS[digit]])


def digits(count=1000, noise=0.15, seed=0):
    """ 8x8 single-channel images of the digits 0-9

    Each glyph is upscaled, placed at a random offset, blurred and noised.
    Images come out as [N, 1, 8, 8] with values in roughly [0, 1].
    """
    rng = make_rng(seed)
    labels = rng.integers(0, 10, count)
    images = np.zeros((count, 1, 8, 8))
    for i, digit in enumerate(labels):
        glyph = ndimage.zoom(_glyph(digit), (6.0 / 5.0, 4.0 / 3.0), order=1)
        top = rng.integers(0, 8 - glyph.shape[0] + 1)
        left = rng.integers(0, 8 - glyph.shape[1] + 1)
        canvas = np.zeros((8, 8))
        canvas[top:top + glyph.shape[0], left:left + glyph.shape[1]] = glyph
        canvas = ndimage.gaussian_filter(canvas, sigma=0.5)
        images[i, 0] = canvas + rng.normal(0.0, noise, (8, 8))
    return images, labels.astype(np.int64)


DATASETS = {
    'two-moons': two_moons,
    'blobs': blobs,
    'digits': digits,
}


def make_dataset(name, count=1000, seed=0, **options):
    try:
        generator = DATASETS[name]
    except KeyError:
        raise ContractError('Unknown dataset {!r}, expected one of {}'.format(name, sorted(DATASETS)))
    return generator(count=count, seed=seed, **options)


def split(inputs, labels, fraction=0.2, seed=0):
    """ (train, held-out) with `fraction` of the samples held out """
    rng = make_rng(seed)
    order = rng.permutation(inputs.shape[0])
    held = int(round(inputs.shape[0] * fraction))
    return (inputs[order[held:]], labels[order[held:]]), (inputs[order[:held]], labels[order[:held]])


def to_batches(inputs, batch_size=64):
    return [inputs[start:start + batch_size] for start in range(0, inputs.shape[0], batch_size)]


def save_dataset(path, inputs, labels=None, batch_size=64):
    tensors = {}
    for i, start in enumerate(range(0, inputs.shape[0], batch_size)):
        tensors['input_{}'.format(i)] = inputs[start:start + batch_size]
        if labels is not None:
            tensors['label_{}'.format(i)] = labels[start:start + batch_size]
    save_tensors(tensors, path, blob_dtype='float64')
    logging.info('Wrote {} samples to {}'.format(inputs.shape[0], path))


def _batch_index(name, prefix):
    match = re.match(r'{}_(\d+)$'.format(prefix), name)
    return int(match.group(1)) if match else None


def load_batches(path):
    """ [(inputs, labels or None)] in batch order """
    tensors = load_tensors(path)
    indices = sorted(i for i in (_batch_index(name, 'input') for name in tensors) if i is not None)
    if not indices:
        raise ModelFormatError('no input_<i> tensors', path)
    batches = []
    for i in indices:
        labels = tensors.get('label_{}'.format(i))
        batches.append((tensors['input_{}'.format(i)], None if labels is None else labels.astype(np.int64)))
    return batches


def load_dataset(path):
    """ All batches concatenated: (inputs, labels or None) """
    batches = load_batches(path)
    inputs = np.concatenate([batch[0] for batch in batches], axis=0)
    if any(batch[1] is None for batch in batches):
        return inputs, None
    return inputs, np.concatenate([batch[1] for batch in batches], axis=0)
