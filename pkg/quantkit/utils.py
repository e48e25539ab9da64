import functools
import json
import math

import numpy as np


class MixedMethod(object):
    """ Method bound to the instance when called on one, to the class otherwise

    Pipeline steps use it so they run on the global configuration from the
    class and on the pipeline's own configuration from an instance::

        Configuration.configure(environment='W4A8')
        PTQ.plan(calibration)                             # W4A8 from the global settings
        PTQ(Configuration(adaround=False)).plan(calibration)

    """

    def __init__(self, func):
        self.func = func
        functools.update_wrapper(self, func)

    def __get__(self, instance, owner):
        return functools.partial(self.func, owner if instance is None else instance)


mixedmethod = MixedMethod


def make_rng(seed=None):
    """ Seeded generator; every random draw in the package goes through one """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def jsonable(value):
    """ Convert numpy scalars/arrays and nested containers to plain JSON types """
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value) or math.isinf(value):
            return repr(value)
        return value
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps_stable(value):
    """ Deterministic JSON: sorted keys, fixed separators, trailing newline """
    return json.dumps(jsonable(value), sort_keys=True, indent=2, separators=(',', ': ')) + '\n'


def write_json(path, value):
    with open(path, 'w') as handle:
        handle.write(dumps_stable(value))


class JsonLinesWriter(object):
    """ Append-only JSON-lines sink; a `None` path swallows the records """

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path is not None:
            open(path, 'w').close()

    def write(self, record):
        record = jsonable(record)
        self.records.append(record)
        if self.path is not None:
            with open(self.path, 'a') as handle:
                handle.write(json.dumps(record, sort_keys=True) + '\n')
