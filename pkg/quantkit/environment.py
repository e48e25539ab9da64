class Environment(object):
    """ Named bit-width presets

    Each preset carries a `Weights` and an `Activations` class with the
    quantizer defaults for that class of tensors. Explicit Configuration
    fields take precedence over the preset.
    """

    class W8A8(object):
        name = 'W8A8'

        class Weights(object):
            scheme = 'symmetric-signed'
            bitwidth = 8
            granularity = 'per-tensor'
            range_method = 'mse'

        class Activations(object):
            scheme = 'asymmetric-unsigned'
            bitwidth = 8
            range_method = 'mse'

    class W8A8PerChannel(object):
        name = 'W8A8PerChannel'

        class Weights(object):
            scheme = 'symmetric-signed'
            bitwidth = 8
            granularity = 'per-channel'
            # per-channel grids keep the full range cheaply
            range_method = 'minmax'

        class Activations(object):
            scheme = 'asymmetric-unsigned'
            bitwidth = 8
            range_method = 'mse'

    class W4A8(object):
        name = 'W4A8'

        class Weights(object):
            scheme = 'symmetric-signed'
            bitwidth = 4
            granularity = 'per-tensor'
            range_method = 'mse'

        class Activations(object):
            scheme = 'asymmetric-unsigned'
            bitwidth = 8
            range_method = 'mse'

    class W4A4(object):
        name = 'W4A4'

        class Weights(object):
            scheme = 'symmetric-signed'
            bitwidth = 4
            granularity = 'per-tensor'
            range_method = 'mse'

        class Activations(object):
            scheme = 'asymmetric-unsigned'
            bitwidth = 4
            range_method = 'mse'

    @classmethod
    def named(cls, name):
        preset = getattr(cls, name, None)
        if preset is None or not isinstance(preset, type) or not hasattr(preset, 'Weights'):
            return None
        return preset

    @classmethod
    def names(cls):
        return sorted(
            key for key, value in vars(cls).items()
            if isinstance(value, type) and hasattr(value, 'Weights')
        )

W8A8 = Environment.W8A8
W8A8PerChannel = Environment.W8A8PerChannel
W4A8 = Environment.W4A8
W4A4 = Environment.W4A4
