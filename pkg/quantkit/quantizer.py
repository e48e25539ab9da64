""" Uniform quantizers: specs, quantize/dequantize and STE gradients """
import collections
from enum import Enum

import numpy as np

from .exceptions import ContractError, DimensionError
from .tensor import Tensor


__all__ = [
    'Scheme', 'Granularity', 'QuantizerSpec', 'IntGridLimits', 'IntTensor',
    'quantize_int', 'dequantize', 'fake_quant', 'fake_quant_data', 'grid_limits',
    'int_grid_limits', 'ste_grad_input', 'ste_grad_scale', 'ste_grad_zero_point',
    'MIN_SCALE',
]


# lower bound kept on learned scales
MIN_SCALE = 1e-12


class Scheme(Enum):
    ASYMMETRIC = 'asymmetric-unsigned'
    SYMMETRIC_SIGNED = 'symmetric-signed'
    SYMMETRIC_UNSIGNED = 'symmetric-unsigned'
    POWER_OF_TWO = 'power-of-two-signed'

    @property
    def signed(self):
        return self in (Scheme.SYMMETRIC_SIGNED, Scheme.POWER_OF_TWO)

    @property
    def has_zero_point(self):
        return self is Scheme.ASYMMETRIC


class Granularity(Enum):
    PER_TENSOR = 'per-tensor'
    PER_CHANNEL = 'per-channel'


class IntGridLimits(collections.namedtuple('IntGridLimits', 'n p')):
    """ Integer grid limits relative to the zero-point: q_min/s, q_max/s """

    def __new__(cls, n, p):
        n = np.asarray(n, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if np.any(n >= p):
            raise ContractError('grid limits need n < p')
        return super(IntGridLimits, cls).__new__(cls, n, p)


def storage_range(scheme, bitwidth):
    """ Representable integers of a `bitwidth`-bit register for `scheme` """
    if scheme.signed:
        return -2 ** (bitwidth - 1), 2 ** (bitwidth - 1) - 1
    return 0, 2 ** bitwidth - 1


class IntTensor(object):
    """ Integer payload with a declared logical bit-width and signedness """

    def __init__(self, values, bitwidth, signed):
        values = np.asarray(values)
        if values.dtype.kind == 'f':
            if not np.all(values == np.rint(values)):
                raise ContractError('IntTensor values must be integral')
        self.values = values.astype(np.int64)
        self.bitwidth = int(bitwidth)
        self.signed = bool(signed)
        lo, hi = self.limits
        if self.values.size and (self.values.min() < lo or self.values.max() > hi):
            raise ContractError('IntTensor values outside the {}-bit {} range [{}, {}]'.format(
                bitwidth, 'signed' if signed else 'unsigned', lo, hi))

    @property
    def limits(self):
        if self.signed:
            return -2 ** (self.bitwidth - 1), 2 ** (self.bitwidth - 1) - 1
        return 0, 2 ** self.bitwidth - 1

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return '<IntTensor {}{} shape={}>'.format('int' if self.signed else 'uint', self.bitwidth, list(self.shape))


class QuantizerSpec(object):
    """ Scheme, bit-width, granularity and (once fitted) scale/zero-point

    Scales and zero-points are kept as 1-D arrays with one entry per group;
    per-tensor specs have a single group. A spec without scale is *unfitted*:
    it marks a quantizer site whose range has not been set yet.

    A frozen spec holds integer zero-points. An unfrozen asymmetric spec may
    hold a real-valued (learnable) zero-point that is rounded in the forward
    pass; `freeze()` stores the rounded value.
    """

    def __init__(self, scheme, bitwidth, granularity='per-tensor', axis=0,
                 scale=None, zero_point=None, frozen=True):
        self.scheme = Scheme(scheme)
        self.granularity = Granularity(granularity)
        if isinstance(bitwidth, bool) or int(bitwidth) != bitwidth or not 2 <= bitwidth <= 16:
            raise ContractError('bit-width must be an integer in [2, 16], got {!r}'.format(bitwidth))
        self.bitwidth = int(bitwidth)
        self.axis = int(axis) if self.granularity is Granularity.PER_CHANNEL else None
        self.frozen = bool(frozen)

        self.scale = None
        self.zero_point = None
        if scale is not None:
            scale = np.atleast_1d(np.asarray(scale, dtype=np.float64)).copy()
            if zero_point is None:
                zero_point = np.zeros_like(scale)
            zero_point = np.atleast_1d(np.asarray(zero_point, dtype=np.float64)).copy()
            if zero_point.shape != scale.shape:
                raise DimensionError('{} scales but {} zero-points'.format(scale.size, zero_point.size))
            self.scale = scale
            self.zero_point = zero_point
            self._validate()

    def _validate(self):
        if self.granularity is Granularity.PER_TENSOR and self.scale.size != 1:
            raise ContractError('per-tensor spec with {} scale groups'.format(self.scale.size))
        if not np.all(np.isfinite(self.scale)) or np.any(self.scale <= 0):
            raise ContractError('scales must be positive and finite')
        if not self.scheme.has_zero_point and np.any(self.zero_point != 0):
            raise ContractError('{} quantizers have zero-point 0'.format(self.scheme.value))
        if self.scheme.has_zero_point:
            z = self.zero_point
            if self.frozen and np.any(z != np.rint(z)):
                raise ContractError('frozen zero-points must be integers')
            if np.any(np.rint(z) < 0) or np.any(np.rint(z) > 2 ** self.bitwidth - 1):
                raise ContractError('zero-point outside [0, {}]'.format(2 ** self.bitwidth - 1))
        if self.scheme is Scheme.POWER_OF_TWO:
            exponents = np.log2(self.scale)
            if np.any(exponents != np.rint(exponents)):
                raise ContractError('power-of-two scales must be exact powers of two')

    @classmethod
    def unfitted(cls, scheme, bitwidth, granularity='per-tensor', axis=0):
        return cls(scheme, bitwidth, granularity, axis)

    @property
    def fitted(self):
        return self.scale is not None

    @property
    def per_channel(self):
        return self.granularity is Granularity.PER_CHANNEL

    @property
    def groups(self):
        return None if self.scale is None else self.scale.size

    @property
    def storage_limits(self):
        return storage_range(self.scheme, self.bitwidth)

    @property
    def rounded_zero_point(self):
        return np.rint(self.zero_point)

    def with_params(self, scale, zero_point=None, frozen=None):
        return QuantizerSpec(
            self.scheme, self.bitwidth, self.granularity, self.axis or 0,
            scale, zero_point, self.frozen if frozen is None else frozen,
        )

    def with_bitwidth(self, bitwidth):
        return QuantizerSpec(self.scheme, bitwidth, self.granularity, self.axis or 0)

    def freeze(self):
        if not self.fitted:
            raise ContractError('cannot freeze an unfitted quantizer')
        lo, hi = 0, 2 ** self.bitwidth - 1
        zero_point = np.clip(np.rint(self.zero_point), lo, hi) if self.scheme.has_zero_point else self.zero_point
        return self.with_params(self.scale, zero_point, frozen=True)

    def broadcast(self, values, ndim):
        """ Reshape a per-group vector so it broadcasts against an `ndim` tensor """
        values = np.asarray(values, dtype=np.float64)
        if not self.per_channel:
            return values.reshape(())
        if self.axis >= ndim:
            raise DimensionError('per-channel axis {} missing in {}-D tensor'.format(self.axis, ndim))
        shape = [1] * ndim
        shape[self.axis] = values.size
        return values.reshape(shape)

    def group_sum(self, values):
        """ Reduce a full-shape array to one value per group """
        if not self.per_channel:
            return np.atleast_1d(values.sum())
        others = tuple(i for i in range(values.ndim) if i != self.axis)
        return values.sum(axis=others)

    def check_groups(self, shape):
        if self.per_channel:
            if self.axis >= len(shape):
                raise DimensionError('per-channel axis {} missing in shape {}'.format(self.axis, list(shape)))
            if shape[self.axis] != self.scale.size:
                raise DimensionError('{} scale groups for axis {} of size {}'.format(
                    self.scale.size, self.axis, shape[self.axis]))

    def as_dict(self):
        record = {
            'scheme': self.scheme.value,
            'bitwidth': self.bitwidth,
            'granularity': self.granularity.value,
            'frozen': self.frozen,
        }
        if self.per_channel:
            record['axis'] = self.axis
        if self.fitted:
            record['scale'] = [float(s) for s in self.scale]
            record['zero_point'] = [float(z) for z in self.zero_point]
        return record

    @classmethod
    def from_dict(cls, record):
        return cls(
            record['scheme'], record['bitwidth'], record.get('granularity', 'per-tensor'),
            record.get('axis', 0), record.get('scale'), record.get('zero_point'),
            record.get('frozen', True),
        )

    def __eq__(self, other):
        if not isinstance(other, QuantizerSpec):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __ne__(self, other):
        result = self.__eq__(other)
        return result if result is NotImplemented else not result

    __hash__ = None

    def __repr__(self):
        if not self.fitted:
            return '<QuantizerSpec {} b={} {} unfitted>'.format(
                self.scheme.value, self.bitwidth, self.granularity.value)
        return '<QuantizerSpec {} b={} {} groups={}>'.format(
            self.scheme.value, self.bitwidth, self.granularity.value, self.groups)


def _require_fitted(spec):
    if not spec.fitted:
        raise ContractError('quantizer spec is not fitted')


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _params(spec, ndim, scale=None, zero_point=None):
    """ Broadcast (s, rounded z, lo, hi) for an `ndim` tensor """
    s = spec.scale if scale is None else scale
    z = spec.zero_point if zero_point is None else zero_point
    lo, hi = spec.storage_limits
    return spec.broadcast(s, ndim), spec.broadcast(np.rint(z), ndim), lo, hi


def int_grid_limits(spec):
    """ IntGridLimits (n, p) per group: storage limits shifted by -z """
    _require_fitted(spec)
    lo, hi = spec.storage_limits
    z = spec.rounded_zero_point
    return IntGridLimits(lo - z, hi - z)


def grid_limits(spec):
    """ (q_min, q_max); floats for per-tensor specs, per-group arrays otherwise """
    _require_fitted(spec)
    limits = int_grid_limits(spec)
    q_min = spec.scale * limits.n
    q_max = spec.scale * limits.p
    if not spec.per_channel:
        return float(q_min[0]), float(q_max[0])
    return q_min, q_max


def quantize_int(x, spec):
    """ clamp(round(x / s) + z; storage limits), round-half-to-even """
    _require_fitted(spec)
    values = _values(x)
    spec.check_groups(values.shape)
    s, z, lo, hi = _params(spec, values.ndim)
    q = np.clip(np.rint(values / s) + z, lo, hi)
    return IntTensor(q, spec.bitwidth, spec.scheme.signed)


def _dequantize_data(q, spec, scale=None, zero_point=None):
    s, z, _, _ = _params(spec, q.ndim, scale, zero_point)
    return s * (q - z)


def dequantize(x_int, spec):
    """ s * (x_int - z) """
    _require_fitted(spec)
    values = x_int.values if isinstance(x_int, IntTensor) else np.asarray(x_int)
    lo, hi = spec.storage_limits
    if values.size and (values.min() < lo or values.max() > hi or np.any(values != np.rint(values))):
        raise ContractError('integer tensor outside the {}-bit grid [{}, {}]'.format(spec.bitwidth, lo, hi))
    spec.check_groups(values.shape)
    return Tensor.from_op(_dequantize_data(values.astype(np.float64), spec))


def fake_quant_data(values, spec, scale=None, zero_point=None):
    """ Quantize-dequantize on plain arrays """
    values = np.asarray(values, dtype=np.float64)
    s, z, lo, hi = _params(spec, values.ndim, scale, zero_point)
    q = np.clip(np.rint(values / s) + z, lo, hi)
    return s * (q - z)


def _inside(values, spec, s, z):
    lo, hi = spec.storage_limits
    q_min = s * (lo - z)
    q_max = s * (hi - z)
    return (values >= q_min) & (values <= q_max), values < q_min


def ste_grad_input(x, spec, upstream):
    """ Upstream gradient where q_min <= x <= q_max, zero elsewhere """
    _require_fitted(spec)
    values = _values(x)
    s, z, _, _ = _params(spec, values.ndim)
    inside, _ = _inside(values, spec, s, z)
    return np.asarray(upstream, dtype=np.float64) * inside


def _scale_term(values, spec, s, z):
    lo, hi = spec.storage_limits
    inside, below = _inside(values, spec, s, z)
    ratio = values / s
    return np.where(inside, np.rint(ratio) - ratio, np.where(below, lo - z, hi - z))


def ste_grad_scale(x, spec, upstream):
    """ Per-group d(fake_quant)/ds contracted with `upstream`

    Elementwise term: round(x/s) - x/s inside the grid, n below, p above.
    """
    _require_fitted(spec)
    values = _values(x)
    s, z, _, _ = _params(spec, values.ndim)
    return spec.group_sum(_scale_term(values, spec, s, z) * upstream)


def ste_grad_zero_point(x, spec, upstream):
    """ Per-group d(fake_quant)/dz contracted with `upstream`: 0 inside, -s outside """
    _require_fitted(spec)
    if not spec.scheme.has_zero_point:
        raise ContractError('{} quantizers have no zero-point gradient'.format(spec.scheme.value))
    values = _values(x)
    s, z, _, _ = _params(spec, values.ndim)
    inside, _ = _inside(values, spec, s, z)
    return spec.group_sum(np.where(inside, 0.0, -s * np.ones_like(values)) * upstream)


def fake_quant(x, spec, scale=None, zero_point=None):
    """ Differentiable quantize-dequantize

    `scale` / `zero_point` may be Tensors of shape [groups] holding learnable
    parameters; they then receive the STE gradients. Without them the
    spec's stored values are used and only `x` is differentiated.
    """
    _require_fitted(spec)
    spec.check_groups(x.shape)
    s_data = spec.scale if scale is None else scale.data
    z_data = spec.zero_point if zero_point is None else zero_point.data
    s, z, lo, hi = _params(spec, x.ndim, s_data, z_data)
    values = x.data
    q = np.clip(np.rint(values / s) + z, lo, hi)
    out = s * (q - z)

    inside, below = _inside(values, spec, s, z)

    def backward(g):
        grads = [g * inside]
        if scale is not None:
            ratio = values / s
            term = np.where(inside, np.rint(ratio) - ratio, np.where(below, lo - z, hi - z))
            grads.append(spec.group_sum(term * g).reshape(scale.shape))
        if zero_point is not None:
            term = np.where(inside, 0.0, -s * np.ones_like(values))
            grads.append(spec.group_sum(term * g).reshape(zero_point.shape))
        return tuple(grads)

    parents = [x]
    if scale is not None:
        parents.append(scale)
    if zero_point is not None:
        if not spec.scheme.has_zero_point:
            raise ContractError('{} quantizers have no learnable zero-point'.format(spec.scheme.value))
        parents.append(zero_point)
    return Tensor.from_op(out, parents, backward, 'fake_quant')


def power_of_two(scale):
    """ Nearest power of two, k = round(-log2 s), s = 2^-k """
    k = np.rint(-np.log2(np.asarray(scale, dtype=np.float64)))
    return np.power(2.0, -k)
