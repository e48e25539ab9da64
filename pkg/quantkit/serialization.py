""" Model and tensor-container files

A model is two files: a JSON manifest (`model.json`) and a blob of
little-endian floats next to it. The manifest lists nodes, edges,
attributes, quantizer specs, ties, metadata and transform history; every
array is a reference `{"offset": bytes, "length": bytes, "shape": [...]}`
into the blob.

The tensor container (calibration sets, datasets) uses the same layout with
a flat `tensors` map, named `input_<i>` / `label_<i>` for batches.
"""
import json
import os

import numpy as np

from .exceptions import QuantkitError
from .graph import Graph, Layer, LayerKind, Node
from .quantizer import QuantizerSpec
from .utils import dumps_stable, jsonable


__all__ = ['ModelFormatError', 'save_model', 'load_model', 'save_tensors', 'load_tensors', 'FORMAT_VERSION']


FORMAT_VERSION = 1

DTYPES = {
    'float32': np.dtype('<f4'),
    'float64': np.dtype('<f8'),
}


class ModelFormatError(QuantkitError):
    """ A manifest or blob that cannot be read; `location` names the offending entry """

    def __init__(self, message, location=None):
        if location:
            message = '{}: {}'.format(location, message)
        super(ModelFormatError, self).__init__(message)
        self.location = location


def _blob_path(path):
    root, _ = os.path.splitext(path)
    return root + '.bin'


class _BlobWriter(object):

    def __init__(self, dtype):
        self.dtype = DTYPES[dtype]
        self.chunks = []
        self.offset = 0

    def add(self, array):
        data = np.ascontiguousarray(np.asarray(array, dtype=np.float64).astype(self.dtype))
        raw = data.tobytes()
        ref = {'offset': self.offset, 'length': len(raw), 'shape': list(data.shape)}
        self.chunks.append(raw)
        self.offset += len(raw)
        return ref

    def write(self, path):
        with open(path, 'wb') as handle:
            for chunk in self.chunks:
                handle.write(chunk)


class _BlobReader(object):

    def __init__(self, path, dtype):
        if dtype not in DTYPES:
            raise ModelFormatError('unknown blob dtype {!r}'.format(dtype), 'blob_dtype')
        self.dtype = DTYPES[dtype]
        try:
            with open(path, 'rb') as handle:
                self.raw = handle.read()
        except (IOError, OSError) as e:
            raise ModelFormatError('cannot read blob {}: {}'.format(path, e), 'blob')

    def read(self, ref, location):
        try:
            offset, length, shape = int(ref['offset']), int(ref['length']), [int(d) for d in ref['shape']]
        except (KeyError, TypeError, ValueError):
            raise ModelFormatError('tensor reference needs offset, length and shape', location)
        expected = int(np.prod(shape)) * self.dtype.itemsize
        if length != expected:
            raise ModelFormatError('length {} bytes does not match shape {} ({} bytes)'.format(
                length, shape, expected), location)
        if offset < 0 or offset + length > len(self.raw):
            raise ModelFormatError('bytes [{}, {}) beyond blob of {} bytes'.format(
                offset, offset + length, len(self.raw)), location)
        data = np.frombuffer(self.raw, dtype=self.dtype, count=length // self.dtype.itemsize, offset=offset)
        return data.astype(np.float64).reshape(shape)


def _read_manifest(path):
    try:
        with open(path) as handle:
            manifest = json.load(handle)
    except (IOError, OSError) as e:
        raise ModelFormatError('cannot read manifest {}: {}'.format(path, e))
    except ValueError as e:
        raise ModelFormatError('malformed JSON in {}: {}'.format(path, e))
    if not isinstance(manifest, dict):
        raise ModelFormatError('manifest must be a JSON object', path)
    if manifest.get('format_version') != FORMAT_VERSION:
        raise ModelFormatError('unsupported format_version {!r}'.format(manifest.get('format_version')),
                               'format_version')
    return manifest


def _blob_for(path, manifest):
    blob = manifest.get('blob')
    if not blob:
        raise ModelFormatError('missing blob file name', 'blob')
    return _BlobReader(os.path.join(os.path.dirname(os.path.abspath(path)), blob),
                       manifest.get('blob_dtype', 'float32'))


def save_model(graph, path, blob_dtype='float32'):
    """ Write `graph` to `path` (manifest) and a sibling `.bin` blob """
    writer = _BlobWriter(blob_dtype)
    nodes = []
    for node in graph.nodes:
        layer = node.layer
        record = {
            'name': node.name,
            'kind': layer.kind.value,
            'inputs': list(node.inputs),
            'attrs': jsonable(layer.attrs),
            'params': {key: writer.add(value) for key, value in layer.params.items()},
        }
        if layer.annotations.get('bn'):
            record['annotations'] = {
                'bn': {key: writer.add(value) for key, value in layer.annotations['bn'].items()}
            }
        nodes.append(record)

    blob_path = _blob_path(path)
    manifest = {
        'format_version': FORMAT_VERSION,
        'blob': os.path.basename(blob_path),
        'blob_dtype': blob_dtype,
        'input_shape': list(graph.input_shape),
        'output': graph.output,
        'nodes': nodes,
        'quantizers': {site: spec.as_dict() for site, spec in graph.quantizers.items()},
        'quantizer_order': list(graph.quantizers),
        'ties': dict(graph.ties),
        'metadata': graph.metadata,
        'history': graph.history,
    }
    writer.write(blob_path)
    with open(path, 'w') as handle:
        handle.write(dumps_stable(manifest))


def load_model(path):
    manifest = _read_manifest(path)
    blob = _blob_for(path, manifest)

    nodes = []
    for index, record in enumerate(manifest.get('nodes') or []):
        location = 'nodes[{}]'.format(index)
        if not isinstance(record, dict) or 'name' not in record or 'kind' not in record:
            raise ModelFormatError('node needs a name and a kind', location)
        location = 'nodes[{}] ({})'.format(index, record['name'])
        try:
            kind = LayerKind(record['kind'])
        except ValueError:
            raise ModelFormatError('unknown layer kind {!r}'.format(record['kind']), location)

        params = {
            key: blob.read(ref, '{}.params.{}'.format(location, key))
            for key, ref in (record.get('params') or {}).items()
        }
        annotations = {}
        for group, refs in (record.get('annotations') or {}).items():
            annotations[group] = {
                key: blob.read(ref, '{}.annotations.{}.{}'.format(location, group, key))
                for key, ref in refs.items()
            }
        try:
            layer = Layer(kind, params, record.get('attrs'), annotations)
        except QuantkitError as e:
            raise ModelFormatError(str(e), location)
        nodes.append(Node(record['name'], layer, record.get('inputs')))

    quantizers = manifest.get('quantizers') or {}
    order = manifest.get('quantizer_order') or sorted(quantizers)
    specs = []
    for site in order:
        try:
            specs.append((site, QuantizerSpec.from_dict(quantizers[site])))
        except (KeyError, TypeError, ValueError, QuantkitError) as e:
            raise ModelFormatError('bad quantizer spec: {}'.format(e), 'quantizers.{}'.format(site))

    try:
        graph = Graph(
            nodes, manifest.get('input_shape') or [], manifest.get('output'), specs,
            manifest.get('ties'), manifest.get('metadata'), manifest.get('history'),
        )
    except QuantkitError as e:
        raise ModelFormatError(str(e), 'nodes')
    return graph


def save_tensors(tensors, path, blob_dtype='float32'):
    """ Write a {name: array} container """
    writer = _BlobWriter(blob_dtype)
    refs = {name: writer.add(value) for name, value in tensors.items()}
    blob_path = _blob_path(path)
    writer.write(blob_path)
    manifest = {
        'format_version': FORMAT_VERSION,
        'blob': os.path.basename(blob_path),
        'blob_dtype': blob_dtype,
        'tensors': refs,
    }
    with open(path, 'w') as handle:
        handle.write(dumps_stable(manifest))


def load_tensors(path):
    manifest = _read_manifest(path)
    blob = _blob_for(path, manifest)
    refs = manifest.get('tensors')
    if not isinstance(refs, dict):
        raise ModelFormatError('container needs a tensors object', 'tensors')
    return {name: blob.read(ref, 'tensors.{}'.format(name)) for name, ref in sorted(refs.items())}
