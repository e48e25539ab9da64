""" Adaptive rounding: learn per-weight up/down rounding layer by layer

The rounding of every weight is relaxed to a continuous variable V through
a rectified sigmoid h(V) in [0, 1]. The soft-quantized weights

    W~ = s clamp(floor(W / s) + h(V); n, p)

are fitted to reproduce the layer's full-precision output from its
quantized-path input, while an annealed regularizer pushes h(V) to {0, 1}.
"""
import collections
import logging

import numpy as np
from scipy import special

from . import tensor as T
from .configuration import ConfigurationError
from .exceptions import ContractError, NumericalError
from .graph import LayerKind, WEIGHTED, run_capture, weight_site
from .quantizer import int_grid_limits
from .tensor import Parameter, Tensor
from .utils import make_rng


__all__ = [
    'AdaroundConfig', 'AnnealSchedule', 'SoftQuantState', 'AdaroundResult', 'AdaroundDivergenceError',
    'h_rectified_sigmoid', 'soft_quant_weights', 'f_reg', 'adaround_layer', 'qubo_objective',
    'apply_adaround', 'ZETA', 'GAMMA',
]


# stretch of the rectified sigmoid, lets h reach exactly 0 and 1
ZETA = 1.1
GAMMA = -0.1

INIT_CLIP = 1e-4
TRACE_EVERY = 100


class AdaroundDivergenceError(NumericalError):
    pass


class AdaroundConfig(object):
    """ Optimization settings; built from a plain dict (`lambda` is the regularizer weight) """

    iterations = 2000
    reg_weight = 0.01
    beta_start = 20.0
    beta_end = 2.0
    warmup = 0.2
    lr = 1e-2
    batch_size = None
    seed = 0

    KEYS = {
        'iterations': 'iterations', 'lambda': 'reg_weight', 'reg_weight': 'reg_weight',
        'beta_start': 'beta_start', 'beta_end': 'beta_end', 'warmup': 'warmup',
        'lr': 'lr', 'batch_size': 'batch_size', 'seed': 'seed',
    }

    def __init__(self, **settings):
        for key, value in settings.items():
            if key not in self.KEYS:
                raise ConfigurationError('Unknown adaround setting {!r}'.format(key))
            setattr(self, self.KEYS[key], value)
        self.validate()

    @classmethod
    def from_dict(cls, settings):
        if isinstance(settings, AdaroundConfig):
            return settings
        return cls(**(settings or {}))

    def validate(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ConfigurationError('adaround iterations must be a non-negative integer')
        if self.reg_weight < 0:
            raise ConfigurationError('adaround lambda must be non-negative')
        if self.lr < 0:
            raise ConfigurationError('adaround lr must be non-negative')
        if not 0 <= self.warmup < 1:
            raise ConfigurationError('adaround warmup must be in [0, 1)')
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError('adaround batch_size must be positive')
        self.schedule()

    def schedule(self):
        try:
            return AnnealSchedule(self.beta_start, self.beta_end, self.warmup, self.iterations)
        except ContractError as e:
            raise ConfigurationError(str(e))

    def as_dict(self):
        return {
            'iterations': self.iterations, 'lambda': self.reg_weight, 'beta_start': self.beta_start,
            'beta_end': self.beta_end, 'warmup': self.warmup, 'lr': self.lr,
            'batch_size': self.batch_size, 'seed': self.seed,
        }


class AnnealSchedule(object):
    """ No regularization during warmup, then beta falls linearly start -> end """

    def __init__(self, beta_start, beta_end, warmup, iterations):
        if not beta_start > beta_end > 0:
            raise ContractError('anneal schedule needs beta_start > beta_end > 0')
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.warmup = float(warmup)
        self.iterations = int(iterations)

    def beta(self, iteration):
        """ Regularizer exponent at `iteration`, None while warming up """
        start = int(self.warmup * self.iterations)
        if iteration < start:
            return None
        span = max(self.iterations - start - 1, 1)
        progress = min(float(iteration - start) / span, 1.0)
        return self.beta_start + (self.beta_end - self.beta_start) * progress


def h_rectified_sigmoid(v):
    """ clamp(sigmoid(V) (zeta - gamma) + gamma; 0, 1) """
    if not isinstance(v, Tensor):
        v = Tensor.from_op(v)
    return T.clip(T.sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


class SoftQuantState(object):
    """ Rounding variables of one weight tensor against a fixed weight spec """

    def __init__(self, weight, spec, v=None):
        if not spec.fitted:
            raise ContractError('adaptive rounding needs a fitted weight quantizer')
        self.weight = np.asarray(weight, dtype=np.float64)
        self.spec = spec
        spec.check_groups(self.weight.shape)
        ndim = self.weight.ndim
        self.scale = spec.broadcast(spec.scale, ndim)
        limits = int_grid_limits(spec)
        self.n = spec.broadcast(limits.n, ndim)
        self.p = spec.broadcast(limits.p, ndim)

        ratio = self.weight / self.scale
        self.floor = np.floor(ratio)
        if v is None:
            rest = np.clip((ratio - self.floor - GAMMA) / (ZETA - GAMMA), INIT_CLIP, 1.0 - INIT_CLIP)
            v = special.logit(rest)
        self.v = Parameter(v)

    def h(self):
        return h_rectified_sigmoid(self.v)

    def mask(self):
        return (self.h().data >= 0.5).astype(np.float64)

    def nearest_mask(self):
        return np.rint(self.weight / self.scale) - self.floor

    def hard_weights(self, mask=None):
        mask = self.mask() if mask is None else np.asarray(mask, dtype=np.float64)
        return self.scale * np.clip(self.floor + mask, self.n, self.p)

    def _scaled(self, values):
        if self.spec.per_channel:
            return T.scale_channels(values, Tensor.from_op(self.spec.scale), axis=self.spec.axis)
        return values * float(self.spec.scale[0])


def soft_quant_weights(weight, state):
    """ s clamp(floor(W / s) + h(V); n, p) as a differentiable function of V """
    if np.shape(weight) != state.weight.shape:
        raise ContractError('weights of shape {} for a rounding state of shape {}'.format(
            list(np.shape(weight)), list(state.weight.shape)))
    grid = T.clip(state.h() + state.floor, state.n, state.p)
    return state._scaled(grid)


def f_reg(v, beta):
    """ sum(1 - |2 h(V) - 1| ** beta) """
    if not beta > 0:
        raise ContractError('regularizer exponent must be positive')
    h = h_rectified_sigmoid(v)
    return (1.0 - T.abs_pow(h * 2.0 + (-1.0), beta)).sum()


def _layer_output(layer, x, weight):
    """ Layer response to `x` (Tensor) with `weight` (Tensor), bias included """
    bias = Tensor.from_op(layer.params['bias'])
    if layer.kind is LayerKind.LINEAR:
        return T.add_bias(T.matmul(x, weight.T), bias, axis=1)
    groups = x.shape[1] if layer.kind is LayerKind.DEPTHWISE_CONV2D else 1
    return T.conv2d(x, weight, bias, layer.attrs.get('stride', 1), layer.attrs.get('padding', 0), groups)


def _activation_fn(graph, node):
    consumers = graph.consumers(node.name)
    if len(consumers) != 1 or node.name == graph.output:
        return None
    follower = consumers[0]
    if follower.kind is LayerKind.RELU:
        return T.relu
    if follower.kind is LayerKind.RELU6:
        ceiling = follower.layer.params.get('clip', follower.layer.attrs.get('clip', 6.0))

        def relu6(values):
            return T.clip(values, 0.0, np.reshape(ceiling, (-1,) + (1,) * (values.ndim - 2)) if np.ndim(ceiling) else ceiling)

        return relu6
    return None


def _reconstruction(prediction, target, per_element=False):
    """ Squared error summed per sample, averaged over samples

    With `per_element` the sum is averaged over every output element, which
    keeps the term on the regularizer's scale whatever the layer width.
    """
    diff = prediction - target
    count = prediction.size if per_element else prediction.shape[0]
    return (diff * diff).sum() * (1.0 / count)


def _hard_objective(layer, weights, x_hat, target, activation):
    with T.no_grad():
        out = _layer_output(layer, Tensor.from_op(x_hat), Tensor.from_op(weights))
        if activation is not None:
            out = activation(out)
        return float(_reconstruction(out, target).data)


AdaroundResult = collections.namedtuple(
    'AdaroundResult', 'mask weights trace fallback learned_objective nearest_objective'
)


def adaround_layer(layer, x_fp, x_hat, spec, config=None, activation=None):
    """ Learn the rounding mask of `layer`'s weights

    Minimizes ||f_a(W x_fp + b) - f_a(W~ x_hat + b)||^2 + lambda f_reg(V),
    the squared error taken as a mean over output elements. The reported
    objectives are per-sample sums averaged over samples. The hard mask is 1[h(V) >= 0.5]; when it reconstructs worse than
    round-to-nearest on the given inputs, the nearest mask is returned and
    `fallback` is set.
    """
    config = AdaroundConfig.from_dict(config)
    if layer.kind not in WEIGHTED:
        raise ContractError('adaptive rounding applies to Linear/Conv layers, not {}'.format(layer.kind.value))
    x_fp = np.asarray(x_fp, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_fp.shape != x_hat.shape or x_fp.shape[0] == 0:
        raise ContractError('x_fp and x_hat must be non-empty and of equal shape')

    weight = layer.params['weight']
    state = SoftQuantState(weight, spec)
    with T.no_grad():
        target = _layer_output(layer, Tensor.from_op(x_fp), Tensor.from_op(weight))
        if activation is not None:
            target = activation(target)
    target = target.data

    schedule = config.schedule()
    optimizer = T.Adam([{'params': [state.v], 'lr': config.lr}])
    rng = make_rng(config.seed)
    count = x_fp.shape[0]
    trace = []

    for iteration in range(int(config.iterations)):
        if config.batch_size and config.batch_size < count:
            index = rng.choice(count, size=config.batch_size, replace=False)
        else:
            index = slice(None)
        optimizer.zero_grad()
        out = _layer_output(layer, Tensor.from_op(x_hat[index]), soft_quant_weights(weight, state))
        if activation is not None:
            out = activation(out)
        recon = _reconstruction(out, target[index], per_element=True)
        beta = schedule.beta(iteration)
        reg = f_reg(state.v, beta) if beta is not None else None
        loss = recon + reg * config.reg_weight if reg is not None else recon

        if not np.isfinite(loss.data):
            raise AdaroundDivergenceError('adaptive rounding diverged at iteration {}'.format(iteration), trace)
        loss.backward()
        optimizer.step()

        if iteration % TRACE_EVERY == 0 or iteration == config.iterations - 1:
            h = state.h().data
            entry = {
                'iteration': iteration,
                'loss': float(loss.data),
                'reconstruction': float(recon.data),
                'f_reg': float(reg.data) if reg is not None else None,
                'beta': beta,
                'binary_fraction': float(np.mean((h < 1e-2) | (h > 1 - 1e-2))),
            }
            trace.append(entry)
            logging.debug('adaround it={iteration} loss={loss:.4g} binary={binary_fraction:.3f}'.format(**entry))

    mask = state.mask()
    nearest = state.nearest_mask()
    learned_objective = _hard_objective(layer, state.hard_weights(mask), x_hat, target, activation)
    nearest_objective = _hard_objective(layer, state.hard_weights(nearest), x_hat, target, activation)
    fallback = learned_objective > nearest_objective
    if fallback:
        logging.warning('Learned rounding reconstructs worse than nearest ({:.4g} > {:.4g}), keeping nearest'.format(
            learned_objective, nearest_objective))
        mask = nearest
    return AdaroundResult(
        mask, state.hard_weights(mask), trace, bool(fallback),
        min(learned_objective, nearest_objective) if fallback else learned_objective, nearest_objective,
    )


def qubo_objective(delta_w, x_samples):
    """ Mean over samples of ||dW x||^2 for a linear layer """
    delta_w = np.atleast_2d(np.asarray(delta_w, dtype=np.float64))
    x_samples = np.atleast_2d(np.asarray(x_samples, dtype=np.float64))
    if x_samples.shape[1] != delta_w.shape[1]:
        raise ContractError('samples of width {} for a perturbation of width {}'.format(
            x_samples.shape[1], delta_w.shape[1]))
    out = x_samples @ delta_w.T
    return float(np.mean(np.sum(out ** 2, axis=1)))


def apply_adaround(graph, calibration, config=None):
    """ Round every weighted layer in order, each against inputs from the already-rounded prefix

    Weights are replaced by their grid values; specs are left untouched.
    """
    config = AdaroundConfig.from_dict(config)
    if calibration is None or len(calibration) == 0:
        raise ContractError('adaptive rounding needs calibration data')
    result = graph.clone()
    layers = []
    for node in result.weighted_nodes():
        spec = result.spec(weight_site(node.name))
        if spec is None or not spec.fitted:
            raise ContractError('weight quantizer {} is not fitted'.format(weight_site(node.name)))

        source = node.inputs[0]
        active = [site for site in result.activation_sites()
                  if result.spec(site) is not None and result.spec(site).fitted]
        x_fp = np.concatenate([run_capture(graph, batch).values[source].data for batch in calibration], axis=0)
        x_hat = np.concatenate([
            run_capture(result, batch, quantize=True, active=active).values[source].data for batch in calibration
        ], axis=0)

        outcome = adaround_layer(node.layer, x_fp, x_hat, spec, config, _activation_fn(result, node))
        node.layer.params['weight'] = outcome.weights
        layers.append({
            'layer': node.name,
            'fallback': outcome.fallback,
            'learned_objective': outcome.learned_objective,
            'nearest_objective': outcome.nearest_objective,
            'rounded_up': float(np.mean(outcome.mask)),
            'trace': outcome.trace,
        })
        logging.info('AdaRound {}: objective {:.4g} (nearest {:.4g}){}'.format(
            node.name, outcome.learned_objective, outcome.nearest_objective,
            ', fallback' if outcome.fallback else ''))

    result.record('adaround', config=config.as_dict(), layers=layers)
    return result
