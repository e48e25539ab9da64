import json

from .environment import Environment
from .exceptions import QuantkitError


class ConfigurationError(QuantkitError):
    pass


SCHEMES = ('asymmetric-unsigned', 'symmetric-signed', 'symmetric-unsigned', 'power-of-two-signed')
GRANULARITIES = ('per-tensor', 'per-channel')
WEIGHT_RANGE_METHODS = ('mse', 'minmax')
ACT_RANGE_METHODS = ('mse', 'minmax', 'bn', 'xent-last')
BIAS_CORRECTION_MODES = ('auto', 'empirical', 'analytic', 'off')
ADD_POLICIES = ('requantize', 'tied')


class Configuration(object):
    """ Configure the quantization pipelines

    Usage::

        import quantkit

        settings = {
            'environment': 'W4A8',
            'weight_granularity': 'per-channel',
            'bias_correction': 'empirical',
        }

        # Global configuration
        quantkit.Configuration.configure(**settings)
        quantkit.PTQ.run(graph, calib)


        # Instance configuration
        config = quantkit.Configuration(**settings)
        quantkit.PTQ(config).run(graph, calib)

    Preset values from `environment` fill every field left as `None`.
    """

    FIELDS = (
        'environment',
        'weight_scheme', 'weight_bitwidth', 'weight_granularity', 'weight_range',
        'act_scheme', 'act_bitwidth', 'act_range',
        'cle', 'absorb_bias', 'adaround', 'adaround_config', 'bias_correction',
        'add_policy', 'bitwidth_overrides', 'bn_alpha', 'classifier', 'metric',
        'qat', 'seed',
    )

    environment = 'W8A8'

    weight_scheme = None
    weight_bitwidth = None
    weight_granularity = None
    weight_range = None

    act_scheme = None
    act_bitwidth = None
    act_range = None

    cle = True
    absorb_bias = True
    # None: on when calibration data is present
    adaround = None
    adaround_config = None
    bias_correction = 'auto'

    add_policy = 'requantize'
    bitwidth_overrides = None
    bn_alpha = 6.0
    # None: taken from the model metadata
    classifier = None
    metric = None

    qat = None
    seed = 0

    _global = {}

    def __init__(self, **settings):
        unknown = sorted(set(settings) - set(self.FIELDS))
        if unknown:
            raise ConfigurationError('Unknown configuration key(s): {}'.format(', '.join(unknown)))

        for key in self.FIELDS:
            if key in settings:
                setattr(self, key, settings[key])
            else:
                setattr(self, key, Configuration._global.get(key, getattr(Configuration, key)))

        self._apply_environment()
        self.validate()

    def _apply_environment(self):
        preset = Environment.named(self.environment)
        if preset is None:
            raise ConfigurationError(
                'Unknown environment {!r}, expected one of {}'.format(self.environment, Environment.names())
            )

        defaults = {
            'weight_scheme': preset.Weights.scheme,
            'weight_bitwidth': preset.Weights.bitwidth,
            'weight_granularity': preset.Weights.granularity,
            'weight_range': preset.Weights.range_method,
            'act_scheme': preset.Activations.scheme,
            'act_bitwidth': preset.Activations.bitwidth,
            'act_range': preset.Activations.range_method,
        }
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)

        self.bitwidth_overrides = dict(self.bitwidth_overrides or {})
        self.adaround_config = dict(self.adaround_config or {})
        self.qat = dict(self.qat or {})

    def validate(self):
        for key in ('weight_scheme', 'act_scheme'):
            if getattr(self, key) not in SCHEMES:
                raise ConfigurationError('{} must be one of {}, got {!r}'.format(key, SCHEMES, getattr(self, key)))

        for key in ('weight_bitwidth', 'act_bitwidth'):
            check_bitwidth(key, getattr(self, key))

        for site, bitwidth in self.bitwidth_overrides.items():
            check_bitwidth('bitwidth_overrides[{}]'.format(site), bitwidth)

        choices = (
            ('weight_granularity', GRANULARITIES),
            ('weight_range', WEIGHT_RANGE_METHODS),
            ('act_range', ACT_RANGE_METHODS),
            ('bias_correction', BIAS_CORRECTION_MODES),
            ('add_policy', ADD_POLICIES),
        )
        for key, allowed in choices:
            if getattr(self, key) not in allowed:
                raise ConfigurationError('{} must be one of {}, got {!r}'.format(key, allowed, getattr(self, key)))

        if self.bn_alpha <= 0:
            raise ConfigurationError('bn_alpha must be positive')

        if self.metric is not None:
            # late import, metrics registers plug-ins at import time
            from .metrics import METRICS
            if self.metric not in METRICS:
                raise ConfigurationError('Unknown metric {!r}'.format(self.metric))

    @classmethod
    def configure(cls, **settings):
        """ Use global configuration settings """
        unknown = sorted(set(settings) - set(cls.FIELDS))
        if unknown:
            raise ConfigurationError('Unknown configuration key(s): {}'.format(', '.join(unknown)))
        Configuration._global = dict(settings)

    @classmethod
    def reset(cls):
        Configuration._global = {}

    @classmethod
    def instantiate(cls):
        """ Return settings as a configuration instance """
        return cls(**Configuration._global)

    @classmethod
    def read_file(cls, path):
        try:
            with open(path) as handle:
                settings = json.load(handle)
        except (IOError, OSError) as e:
            raise ConfigurationError('Cannot read config file {}: {}'.format(path, e))
        except ValueError as e:
            raise ConfigurationError('Malformed config file {}: {}'.format(path, e))

        if not isinstance(settings, dict):
            raise ConfigurationError('Config file {} must hold a JSON object'.format(path))
        return settings

    @classmethod
    def from_file(cls, path):
        return cls(**cls.read_file(path))

    @classmethod
    def merged(cls, flags=None, path=None):
        """ defaults < command-line flags < config file """
        settings = {k: v for k, v in (flags or {}).items() if v is not None}
        if path is not None:
            settings.update(cls.read_file(path))
        return cls(**settings)

    def as_dict(self):
        return {key: getattr(self, key) for key in self.FIELDS}

    def copy(self, **changes):
        settings = self.as_dict()
        settings.update(changes)
        return Configuration(**settings)

    def __repr__(self):
        return '<Configuration {} W{}{} A{}>'.format(
            self.environment, self.weight_bitwidth,
            '/ch' if self.weight_granularity == 'per-channel' else '',
            self.act_bitwidth,
        )


def check_bitwidth(name, bitwidth):
    if isinstance(bitwidth, bool) or not isinstance(bitwidth, int) or not 2 <= bitwidth <= 16:
        raise ConfigurationError('{} must be an integer in [2, 16], got {!r}'.format(name, bitwidth))
