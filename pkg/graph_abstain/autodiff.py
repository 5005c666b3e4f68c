import logging
import threading

import numpy as np
import scipy.sparse
import scipy.special

from .errors import ContractError, DimensionError, NumericFaultError, ParameterError


log = logging.getLogger('autodiff')

LOG_FLOOR = 1e-12
# Gradients smaller than this count as zero when comparing
GRAD_CHECK_FLOOR = 1e-6

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, 'tapes', None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:

    def __init__(self, values, requires_grad=False, name=None, copy=True):
        values = np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)
        if values.ndim == 0:
            values = values.reshape(1, 1)
        elif values.ndim == 1:
            values = values.reshape(-1, 1)
        elif values.ndim != 2:
            raise DimensionError(f'Tensors are matrices, got {values.ndim} dimensions')

        self._values = values
        self._requires_grad = bool(requires_grad)
        self._name = name
        self._grad = None
        self._tape = None

    def __repr__(self):
        name = f'{self._name!r}, ' if self._name else ''
        return f'Tensor({name}shape={self.shape}, requires_grad={self._requires_grad})'

    @property
    def shape(self):
        return self._values.shape

    @property
    def values(self):
        return self._values

    @property
    def requires_grad(self):
        return self._requires_grad

    @property
    def name(self):
        return self._name

    @property
    def tape(self):
        return self._tape

    @property
    def grad(self):
        if self._grad is None and self._requires_grad:
            return np.zeros_like(self._values)
        return self._grad

    def item(self):
        if self.shape != (1, 1):
            raise ContractError(f'item() needs a 1x1 tensor, got shape {self.shape}')
        return float(self._values[0, 0])

    def assign(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.shape:
            raise DimensionError(f'Cannot assign shape {values.shape} to tensor of shape {self.shape}')
        self._values[...] = values

    def zero_grad(self):
        self._grad = None

    def _accumulate_grad(self, grad):
        if self._grad is None:
            self._grad = np.array(grad, dtype=np.float64)
        else:
            self._grad = self._grad + grad


def parameter(values, name=None):
    return Tensor(values, requires_grad=True, name=name)


def constant(values):
    return Tensor(values, copy=False)


class Tape:

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self):
        return len(self._entries)

    @property
    def ops(self):
        return [entry[0] for entry in self._entries]

    def record(self, op, inputs, output, backward_fn):
        output._requires_grad = True
        output._tape = self
        self._entries.append((op, inputs, output, backward_fn))

    def backward(self, loss):
        if loss.shape != (1, 1):
            raise ContractError(f'Loss must be a scalar tensor, got shape {loss.shape}')
        if loss.tape is not self:
            raise ContractError('Loss was not recorded on this tape')

        pending = {id(loss): (loss, np.ones((1, 1)))}
        for op, inputs, output, backward_fn in reversed(self._entries):
            item = pending.pop(id(output), None)
            if item is None:
                continue
            grad_out = item[1]
            output._accumulate_grad(grad_out)

            input_grads = backward_fn(grad_out)
            for tensor, grad in zip(inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in pending:
                    pending[key] = (tensor, pending[key][1] + grad)
                else:
                    pending[key] = (tensor, grad)

        # Whatever is left was not produced on this tape: parameters and other leaves
        for tensor, grad in pending.values():
            tensor._accumulate_grad(grad)


def backward(loss):
    if loss.tape is None:
        raise ContractError('Loss is not connected to any tensor that requires gradients')
    loss.tape.backward(loss)


def _result(op, values, inputs, backward_fn):
    if not np.all(np.isfinite(values)):
        raise NumericFaultError(f"Non-finite values produced by '{op}'", term=op)
    output = Tensor(values, copy=False)
    tape = active_tape()
    if tape is not None and any(tensor.requires_grad for tensor in inputs):
        tape.record(op, inputs, output, backward_fn)
    return output


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f'{op}: shape mismatch {a.shape} vs {b.shape}')


def _check_scalar(op, s):
    if s.shape != (1, 1):
        raise DimensionError(f'{op}: expected a 1x1 tensor, got {s.shape}')


# Dense algebra

def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f'matmul: shape mismatch {a.shape} @ {b.shape}')
    av, bv = a.values, b.values

    def backward_fn(g):
        return (
            g @ bv.T if a.requires_grad else None,
            av.T @ g if b.requires_grad else None
        )

    return _result('matmul', av @ bv, (a, b), backward_fn)


def add_bias(x, bias):
    if bias.shape != (1, x.shape[1]):
        raise DimensionError(f'add_bias: bias shape {bias.shape} does not match {x.shape}')

    def backward_fn(g):
        return g, g.sum(axis=0, keepdims=True)

    return _result('add_bias', x.values + bias.values, (x, bias), backward_fn)


def add(a, b):
    _check_same_shape('add', a, b)

    def backward_fn(g):
        return g, g

    return _result('add', a.values + b.values, (a, b), backward_fn)


def sub(a, b):
    _check_same_shape('sub', a, b)

    def backward_fn(g):
        return g, -g

    return _result('sub', a.values - b.values, (a, b), backward_fn)


def mul(a, b):
    _check_same_shape('mul', a, b)
    av, bv = a.values, b.values

    def backward_fn(g):
        return g * bv, g * av

    return _result('mul', av * bv, (a, b), backward_fn)


def div_scalar(x, s):
    _check_scalar('div_scalar', s)
    xv = x.values
    sv = s.values[0, 0]

    def backward_fn(g):
        return g / sv, np.array([[-(g * xv).sum() / (sv * sv)]])

    return _result('div_scalar', xv / sv, (x, s), backward_fn)


def scale(x, factor):
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)

    return _result('scale', x.values * factor, (x,), backward_fn)


def add_scalar(x, value):
    def backward_fn(g):
        return (g,)

    return _result('add_scalar', x.values + float(value), (x,), backward_fn)


def neg(x):
    return scale(x, -1.0)


def square(x):
    xv = x.values

    def backward_fn(g):
        return (2.0 * xv * g,)

    return _result('square', xv * xv, (x,), backward_fn)


def log(x, floor=LOG_FLOOR):
    clamped = np.maximum(x.values, floor)
    active = x.values >= floor

    def backward_fn(g):
        return (np.where(active, g / clamped, 0.0),)

    return _result('log', np.log(clamped), (x,), backward_fn)


def sum_all(x):
    shape = x.shape

    def backward_fn(g):
        return (np.full(shape, g[0, 0]),)

    return _result('sum_all', np.array([[x.values.sum()]]), (x,), backward_fn)


def mean_all(x):
    shape = x.shape
    count = x.values.size
    if count == 0:
        raise ContractError('mean_all of an empty tensor')

    def backward_fn(g):
        return (np.full(shape, g[0, 0] / count),)

    return _result('mean_all', np.array([[x.values.mean()]]), (x,), backward_fn)


# Activations

def leaky_relu(x, slope):
    xv = x.values
    positive = xv > 0

    def backward_fn(g):
        return (np.where(positive, g, slope * g),)

    return _result('leaky_relu', np.where(positive, xv, slope * xv), (x,), backward_fn)


def relu(x):
    xv = x.values
    positive = xv > 0

    def backward_fn(g):
        return (np.where(positive, g, 0.0),)

    return _result('relu', np.where(positive, xv, 0.0), (x,), backward_fn)


def elu(x, alpha=1.0):
    xv = x.values
    positive = xv > 0
    out = np.where(positive, xv, alpha * np.expm1(np.minimum(xv, 0.0)))

    def backward_fn(g):
        return (np.where(positive, g, g * (out + alpha)),)

    return _result('elu', out, (x,), backward_fn)


def sigmoid(x):
    out = scipy.special.expit(x.values)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _result('sigmoid', out, (x,), backward_fn)


def row_softmax(x):
    xv = x.values
    shifted = xv - xv.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result('row_softmax', out, (x,), backward_fn)


# Shape manipulation

def concat_cols(tensors):
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError('concat_cols needs at least one tensor')
    rows = tensors[0].shape[0]
    for tensor in tensors:
        if tensor.shape[0] != rows:
            raise DimensionError(f'concat_cols: row mismatch {tensor.shape[0]} vs {rows}')
    bounds = np.cumsum([0] + [tensor.shape[1] for tensor in tensors])

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result('concat_cols', np.concatenate([t.values for t in tensors], axis=1), tensors, backward_fn)


def gather_rows(x, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) and (indices.min() < -x.shape[0] or indices.max() >= x.shape[0]):
        raise DimensionError(f'gather_rows: index out of range for {x.shape[0]} rows')
    shape = x.shape

    def backward_fn(g):
        grad = np.zeros(shape)
        np.add.at(grad, indices, g)
        return (grad,)

    return _result('gather_rows', x.values[indices], (x,), backward_fn)


def take_per_row(x, columns):
    columns = np.asarray(columns, dtype=np.int64)
    if columns.shape != (x.shape[0],):
        raise DimensionError(f'take_per_row: expected {x.shape[0]} column indices, got {columns.shape}')
    if len(columns) and (columns.min() < 0 or columns.max() >= x.shape[1]):
        raise DimensionError(f'take_per_row: column index out of range for {x.shape[1]} columns')
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward_fn(g):
        grad = np.zeros(shape)
        grad[rows, columns] = g[:, 0]
        return (grad,)

    return _result('take_per_row', x.values[rows, columns].reshape(-1, 1), (x,), backward_fn)


def column(x, index):
    if not 0 <= index < x.shape[1]:
        raise DimensionError(f'column: index {index} out of range for {x.shape[1]} columns')
    shape = x.shape

    def backward_fn(g):
        grad = np.zeros(shape)
        grad[:, index:index + 1] = g
        return (grad,)

    return _result('column', x.values[:, index:index + 1].copy(), (x,), backward_fn)


# CSR-segmented ops

def segment_ids(offsets):
    offsets = np.asarray(offsets, dtype=np.int64)
    return np.repeat(np.arange(len(offsets) - 1, dtype=np.int64), np.diff(offsets))


def _segment_reduce(ufunc, values, offsets):
    counts = np.diff(offsets)
    out = np.zeros((len(counts),) + values.shape[1:])
    nonempty = counts > 0
    if values.shape[0]:
        out[nonempty] = ufunc.reduceat(values, offsets[:-1][nonempty], axis=0)
    return out


def _check_segments(op, x, offsets):
    if x.shape != (offsets[-1], 1):
        raise DimensionError(f'{op}: expected shape ({offsets[-1]}, 1) for the CSR layout, got {x.shape}')


def segment_softmax(x, offsets):
    offsets = np.asarray(offsets, dtype=np.int64)
    _check_segments('segment_softmax', x, offsets)
    seg = segment_ids(offsets)
    xv = x.values

    maxima = _segment_reduce(np.maximum, xv, offsets)
    exp = np.exp(xv - maxima[seg])
    sums = _segment_reduce(np.add, exp, offsets)
    out = exp / sums[seg]

    def backward_fn(g):
        dots = _segment_reduce(np.add, out * g, offsets)
        return (out * (g - dots[seg]),)

    return _result('segment_softmax', out, (x,), backward_fn)


def segment_weighted_sum(weights, values, offsets, neighbors):
    offsets = np.asarray(offsets, dtype=np.int64)
    neighbors = np.asarray(neighbors, dtype=np.int64)
    _check_segments('segment_weighted_sum', weights, offsets)
    if len(neighbors) != offsets[-1]:
        raise DimensionError('segment_weighted_sum: neighbor count does not match the CSR offsets')
    if len(neighbors) and neighbors.max() >= values.shape[0]:
        raise DimensionError(f'segment_weighted_sum: neighbor index out of range for {values.shape[0]} rows')

    num_segments = len(offsets) - 1
    vv = values.values
    wv = weights.values
    matrix = scipy.sparse.csr_matrix((wv[:, 0], neighbors, offsets), shape=(num_segments, vv.shape[0]))

    def backward_fn(g):
        grad_weights = None
        grad_values = None
        if weights.requires_grad:
            seg = segment_ids(offsets)
            grad_weights = np.einsum('ij,ij->i', g[seg], vv[neighbors]).reshape(-1, 1)
        if values.requires_grad:
            grad_values = np.asarray(matrix.T @ g)
        return grad_weights, grad_values

    return _result('segment_weighted_sum', np.asarray(matrix @ vv), (weights, values), backward_fn)


# Regularization

def dropout(x, p, train_flag, rng=None):
    if not 0.0 <= p < 1.0:
        raise ParameterError(f'Dropout probability must be in [0, 1), got {p}')
    if not train_flag or p == 0.0:
        return x
    if rng is None:
        raise ContractError('Training-mode dropout needs a random generator')

    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward_fn(g):
        return (g * mask,)

    return _result('dropout', x.values * mask, (x,), backward_fn)


class BatchNormState:

    def __init__(self, num_features, momentum=0.9, eps=1e-5):
        self.running_mean = np.zeros((1, num_features))
        self.running_var = np.ones((1, num_features))
        self.momentum = momentum
        self.eps = eps

    def update(self, mean, var):
        self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
        self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var


def batch_norm_1d(x, gamma, beta, state, train_flag):
    width = x.shape[1]
    if gamma.shape != (1, width) or beta.shape != (1, width):
        raise DimensionError(f'batch_norm_1d: gamma/beta must have shape (1, {width})')

    xv = x.values
    gv = gamma.values
    n = xv.shape[0]

    if train_flag:
        if n < 2:
            raise ContractError('Training-mode batch norm needs at least two rows')
        mean = xv.mean(axis=0, keepdims=True)
        var = xv.var(axis=0, keepdims=True)
        state.update(mean, var * n / (n - 1))
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mean) * inv_std
    out = gv * xhat + beta.values

    def backward_fn(g):
        dxhat = g * gv
        if train_flag:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
        else:
            dx = dxhat * inv_std
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _result('batch_norm_1d', out, (x, gamma, beta), backward_fn)


# Losses

def negative_log_likelihood(probs, labels):
    return neg(log(take_per_row(probs, labels)))


# Gradient checking

def numeric_gradient(fn, tensor, step=1e-5):
    values = tensor.values
    grad = np.zeros_like(values)
    for index in np.ndindex(values.shape):
        original = values[index]
        values[index] = original + step
        upper = fn().item()
        values[index] = original - step
        lower = fn().item()
        values[index] = original
        grad[index] = (upper - lower) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=GRAD_CHECK_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale_ = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale_)


# Checkpoints

def save_parameters(path, arrays):
    payload = {}
    for name, value in arrays.items():
        payload[name] = value.values if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    np.savez(path, **payload)


def load_parameters(path):
    with np.load(path, allow_pickle=False) as data:
        return {name: data[name].copy() for name in data.files}
