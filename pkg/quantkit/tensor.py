""" Dense float64 tensors with a define-by-run reverse-mode tape

Only the operations the graph executors, AdaRound and QAT need are provided.
Binary elementwise operations require equal shapes (or a python scalar);
the only broadcasting is `add_bias` and `scale_channels` along one axis.
"""
import contextlib
import numbers
import threading

import numpy as np

from .exceptions import ContractError, DimensionError, NumericalError


__all__ = [
    'Tensor', 'Parameter', 'no_grad', 'is_grad_enabled',
    'matmul', 'conv2d', 'avg_pool2d', 'max_pool2d', 'concat',
    'add_bias', 'scale_channels', 'relu', 'clip', 'sigmoid', 'exp', 'log',
    'abs_pow', 'cross_entropy', 'mse_loss',
    'AdamState', 'adam_step', 'sgd_step', 'Adam', 'SGD',
]


_tape = threading.local()


def is_grad_enabled():
    return getattr(_tape, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """ Evaluate without recording backward closures (this thread only) """
    previous = is_grad_enabled()
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = previous


class Tensor(object):
    """ Immutable dense array of float64 values, optionally on the tape

    Usage::

        x = Tensor([[1.0, -2.0]], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        x.grad  # array([[ 2., -4.]])

    """

    def __init__(self, data, requires_grad=False):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericalError('Tensor input holds NaN or Inf values')
        self._setup(array, requires_grad, (), None, 'leaf')

    def _setup(self, data, requires_grad, parents, backward, op):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.op = op

    @classmethod
    def from_op(cls, data, parents=(), backward=None, op=''):
        """ Build the result of an operation

        `backward(grad)` returns one gradient array (or None) per parent.
        Nothing is recorded when no parent requires a gradient or the tape
        is disabled.
        """
        out = Tensor.__new__(Tensor)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out._setup(
            np.asarray(data, dtype=np.float64),
            track,
            tuple(parents) if track else (),
            backward if track else None,
            op,
        )
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise DimensionError('item() needs a single element, got shape {}'.format(list(self.shape)))
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor.from_op(self.data)

    def __repr__(self):
        return '<Tensor shape={}{}>'.format(list(self.shape), ' grad' if self.requires_grad else '')

    def __len__(self):
        return self.data.shape[0]

    def backward(self):
        """ Accumulate d(self)/d(leaf) into `leaf.grad` for every tracked leaf """
        if self.data.size != 1:
            raise ContractError('backward() needs a scalar loss, got shape {}'.format(list(self.shape)))
        if not self.requires_grad:
            return

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue

            if node._backward is None:
                node.grad = grad if node.grad is None else node.grad + grad
                continue

            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=np.float64)
                if parent_grad.shape != parent.data.shape:
                    raise DimensionError('{} produced gradient of shape {} for operand of shape {}'.format(
                        node.op, parent_grad.shape, parent.data.shape))
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad

    def zero_grad(self):
        self.grad = None

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if isinstance(other, numbers.Number) else neg(_lift(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, numbers.Number):
            raise DimensionError('Tensor division is only defined by a scalar')
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        count = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tensor_sum(self, axis) * (1.0 / count)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """ Trainable leaf; the only kind of tensor whose data is ever replaced """

    def __init__(self, data):
        super(Parameter, self).__init__(data, requires_grad=True)

    def assign(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise DimensionError('Cannot assign shape {} to parameter of shape {}'.format(data.shape, self.data.shape))
        self.data = data.copy()


def _lift(value):
    if isinstance(value, Tensor):
        return value
    if isinstance(value, numbers.Number):
        return Tensor.from_op(np.float64(value))
    return Tensor.from_op(np.asarray(value, dtype=np.float64))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError('{}: shapes {} and {} differ'.format(op, list(a.shape), list(b.shape)))


def add(a, b):
    a = _lift(a)
    if isinstance(b, numbers.Number):
        return Tensor.from_op(a.data + b, (a,), lambda g: (g,), 'add')
    b = _lift(b)
    _same_shape('add', a, b)
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), 'add')


def neg(a):
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), 'neg')


def mul(a, b):
    a = _lift(a)
    if isinstance(b, numbers.Number):
        return Tensor.from_op(a.data * b, (a,), lambda g: (g * b,), 'mul')
    b = _lift(b)
    _same_shape('mul', a, b)
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), 'mul')


def power(a, exponent):
    if not isinstance(exponent, numbers.Number):
        raise ContractError('power() takes a scalar exponent')
    return Tensor.from_op(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),), 'pow'
    )


def matmul(a, b):
    """ [m, k] x [k, n] -> [m, n] """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError('matmul needs 2-D operands, got {} and {}'.format(list(a.shape), list(b.shape)))
    if a.shape[1] != b.shape[0]:
        raise DimensionError('matmul inner dimensions differ: {} vs {}'.format(list(a.shape), list(b.shape)))
    return Tensor.from_op(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g), 'matmul'
    )


def transpose(a):
    if a.ndim != 2:
        raise DimensionError('transpose needs a 2-D tensor')
    return Tensor.from_op(a.data.T.copy(), (a,), lambda g: (g.T,), 'transpose')


def reshape(a, shape):
    shape = tuple(int(d) for d in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError('Cannot reshape {} to {}'.format(list(a.shape), list(shape)))
    original = a.shape
    return Tensor.from_op(data, (a,), lambda g: (g.reshape(original),), 'reshape')


def tensor_sum(a, axis=None):
    original = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, original).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), original).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis), (a,), backward, 'sum')


def exp(a):
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), 'exp')


def log(a):
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def relu(a):
    return Tensor.from_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), 'relu')


def clip(a, low, high):
    """ Clamp to [low, high]; bounds are constants broadcastable to `a`

    The gradient passes where low <= a <= high (inclusive).
    """
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    inside = (a.data >= low) & (a.data <= high)
    return Tensor.from_op(np.minimum(np.maximum(a.data, low), high), (a,), lambda g: (g * inside,), 'clip')


def abs_pow(a, exponent):
    """ |a| ** exponent """
    magnitude = np.abs(a.data)

    def backward(g):
        with np.errstate(divide='ignore', invalid='ignore'):
            slope = exponent * magnitude ** (exponent - 1) * np.sign(a.data)
        return (g * np.where(magnitude > 0, slope, 0.0),)

    return Tensor.from_op(magnitude ** exponent, (a,), backward, 'abs_pow')


def _axis_shape(ndim, axis, length):
    shape = [1] * ndim
    shape[axis] = length
    return tuple(shape)


def add_bias(x, b, axis=1):
    """ x + b broadcast along `axis` (b is 1-D) """
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError('bias of shape {} does not match axis {} of {}'.format(list(b.shape), axis, list(x.shape)))
    view = b.data.reshape(_axis_shape(x.ndim, axis, b.shape[0]))
    others = tuple(i for i in range(x.ndim) if i != axis)
    return Tensor.from_op(x.data + view, (x, b), lambda g: (g, g.sum(axis=others)), 'add_bias')


def scale_channels(x, s, axis=1):
    """ x * s broadcast along `axis` (s is 1-D) """
    if s.ndim != 1 or s.shape[0] != x.shape[axis]:
        raise DimensionError('scale of shape {} does not match axis {} of {}'.format(list(s.shape), axis, list(x.shape)))
    view = s.data.reshape(_axis_shape(x.ndim, axis, s.shape[0]))
    others = tuple(i for i in range(x.ndim) if i != axis)
    return Tensor.from_op(
        x.data * view, (x, s),
        lambda g: (g * view, (g * x.data).sum(axis=others)), 'scale_channels'
    )


def concat(tensors, axis=1):
    tensors = [_lift(t) for t in tensors]
    if len(tensors) < 2:
        raise ContractError('concat needs at least two tensors')
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError('concat: {}'.format(e))
    cuts = np.cumsum(sizes)[:-1]
    return Tensor.from_op(data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), 'concat')


def output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError('kernel {} does not fit input {} with padding {}'.format(kernel, size, padding))
    if span % stride:
        raise DimensionError('stride {} does not divide padded span {} (input {}, kernel {}, padding {})'.format(
            stride, span, size, kernel, padding))
    return span // stride + 1


def _windows(x, kh, kw, stride):
    """ [..., H, W] -> [..., Ho, Wo, kh, kw] view """
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(-2, -1))
    return view[..., ::stride, ::stride, :, :]


def conv2d_data(x, w, stride=1, padding=0, groups=1):
    """ Grouped zero-padded cross-correlation on plain arrays, no bias """
    n, c, h, wd = x.shape
    k, cg, kh, kw = w.shape
    if c != cg * groups or k % groups:
        raise DimensionError('conv2d: input channels {} / kernel {} incompatible with groups={}'.format(
            c, list(w.shape), groups))
    ho = output_size(h, kh, stride, padding)
    wo = output_size(wd, kw, stride, padding)

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp = xp.reshape(n, groups, cg, h + 2 * padding, wd + 2 * padding)
    cols = _windows(xp, kh, kw, stride)
    wg = w.reshape(groups, k // groups, cg, kh, kw)
    out = np.einsum('ngchwij,gkcij->ngkhw', cols, wg, optimize=True)
    return out.reshape(n, k, ho, wo), (xp.shape, cols, wg)


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """ x: [N, C, H, W], w: [K, C/groups, kh, kw], b: [K] """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError('conv2d needs 4-D input and kernel, got {} and {}'.format(list(x.shape), list(w.shape)))
    data, (padded_shape, cols, wg) = conv2d_data(x.data, w.data, stride, padding, groups)
    n, k, ho, wo = data.shape
    kh, kw = w.shape[2:]
    h, wd = x.shape[2:]

    def backward(g):
        gg = g.reshape(n, groups, k // groups, ho, wo)
        dw = np.einsum('ngchwij,ngkhw->gkcij', cols, gg, optimize=True).reshape(w.shape)
        dcols = np.einsum('gkcij,ngkhw->ngchwij', wg, gg, optimize=True)
        dxp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[..., i, j]
        dx = dxp.reshape(n, -1, h + 2 * padding, wd + 2 * padding)[:, :, padding:padding + h, padding:padding + wd]
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        if b.shape != (k,):
            raise DimensionError('conv2d bias of shape {} for {} output channels'.format(list(b.shape), k))
        data = data + b.data.reshape(1, k, 1, 1)
    return Tensor.from_op(data, parents, backward, 'conv2d')


def _pool_windows(x, kernel, stride):
    n, c, h, w = x.shape
    ho = output_size(h, kernel, stride, 0)
    wo = output_size(w, kernel, stride, 0)
    return _windows(x, kernel, kernel, stride), ho, wo


def _scatter_windows(shape, dwin, kernel, stride, ho, wo):
    dx = np.zeros(shape)
    for i in range(kernel):
        for j in range(kernel):
            dx[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dwin[..., i, j]
    return dx


def avg_pool2d(x, kernel, stride=None):
    stride = stride or kernel
    windows, ho, wo = _pool_windows(x.data, kernel, stride)
    area = float(kernel * kernel)

    def backward(g):
        dwin = np.broadcast_to((g / area)[..., None, None], g.shape + (kernel, kernel))
        return (_scatter_windows(x.shape, dwin, kernel, stride, ho, wo),)

    return Tensor.from_op(windows.sum(axis=(-2, -1)) / area, (x,), backward, 'avg_pool2d')


def max_pool2d(x, kernel, stride=None):
    stride = stride or kernel
    windows, ho, wo = _pool_windows(x.data, kernel, stride)
    flat = windows.reshape(windows.shape[:4] + (kernel * kernel,))
    winner = flat.argmax(axis=-1)

    def backward(g):
        onehot = np.zeros(flat.shape)
        np.put_along_axis(onehot, winner[..., None], 1.0, axis=-1)
        dwin = (onehot * g[..., None]).reshape(windows.shape)
        return (_scatter_windows(x.shape, dwin, kernel, stride, ho, wo),)

    return Tensor.from_op(flat.max(axis=-1), (x,), backward, 'max_pool2d')


def log_softmax_data(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """ Mean negative log-likelihood of integer `labels` under softmax(logits) """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError('cross_entropy needs [N, C] logits and N labels')
    logp = log_softmax_data(logits.data)
    n = logits.shape[0]
    picked = logp[np.arange(n), labels]

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return Tensor.from_op(-picked.mean(), (logits,), backward, 'cross_entropy')


def mse_loss(prediction, target):
    """ Mean squared error; `target` may be a Tensor or a constant array """
    target = _lift(target)
    diff = add(prediction, neg(target))
    return (diff * diff).mean()


class AdamState(object):
    """ First/second moments per parameter and the step counter """

    def __init__(self, shapes=None, m=None, v=None, t=0):
        if m is None:
            m = [np.zeros(shape) for shape in shapes]
            v = [np.zeros(shape) for shape in shapes]
        self.m = m
        self.v = v
        self.t = t


def _check_step(params, grads):
    if len(params) != len(grads):
        raise DimensionError('{} parameters but {} gradients'.format(len(params), len(grads)))
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise DimensionError('parameter {} vs gradient {}'.format(np.shape(p), np.shape(g)))


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """ One bias-corrected adaptive-moment update, returns (params, state) """
    _check_step(params, grads)
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def sgd_step(params, grads, velocity, lr, momentum=0.0):
    """ Heavy-ball SGD, returns (params, velocity) """
    _check_step(params, grads)
    new_velocity = [momentum * u + g for u, g in zip(velocity, grads)]
    return [p - lr * u for p, u in zip(params, new_velocity)], new_velocity


class Optimizer(object):
    """ Parameter groups `[{'params': [...], 'lr': ...}, ...]` updated in place """

    def __init__(self, groups):
        self.groups = [dict(group) for group in groups if group['params']]

    def _grads(self, params):
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for group in self.groups:
            for p in group['params']:
                p.zero_grad()


class Adam(Optimizer):

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        super(Adam, self).__init__(groups)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        for group in self.groups:
            group['state'] = AdamState([p.shape for p in group['params']])

    def step(self):
        for group in self.groups:
            params = group['params']
            updated, group['state'] = adam_step(
                [p.data for p in params], self._grads(params), group['state'],
                group['lr'], self.beta1, self.beta2, self.eps,
            )
            for p, data in zip(params, updated):
                p.data = data


class SGD(Optimizer):

    def __init__(self, groups, momentum=0.9):
        super(SGD, self).__init__(groups)
        self.momentum = momentum
        for group in self.groups:
            group['velocity'] = [np.zeros(p.shape) for p in group['params']]

    def step(self):
        for group in self.groups:
            params = group['params']
            updated, group['velocity'] = sgd_step(
                [p.data for p in params], self._grads(params), group['velocity'], group['lr'], self.momentum,
            )
            for p, data in zip(params, updated):
                p.data = data
