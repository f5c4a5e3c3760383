"""Dense double-precision tensors with reverse-mode differentiation.

Operations executed inside a `Tape` context record themselves on the tape when
any input requires gradients; `backward` walks the tape in reverse order."""
import logging
import threading
import zlib
from typing import Callable
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy.special import expit

import multiscale_anomaly.utils as utils

logger = logging.getLogger('tensor')

# Probabilities are clamped into this range before taking logs.
PROB_MIN = 1e-7
PROB_MAX = 1.0 - 1e-7


class ShapeError(ValueError):
    pass


ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]


class Tensor(object):

    def __init__(self,
                 values,
                 requires_grad: bool = False,
                 name: Optional[str] = None):
        values = np.array(values, dtype=np.float64)
        values.setflags(write=False)
        self.values = values
        self.requires_grad = requires_grad
        self.name = name
        # False for outputs recorded on a tape.
        self.is_leaf = True

    @staticmethod
    def parameter(values, name: Optional[str] = None) -> 'Tensor':
        return Tensor(values, requires_grad=True, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.shape[0]

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f'item() of a tensor of shape {self.shape}')
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __str__(self):
        name = f'{self.name}:' if self.name else ''
        return f'Tensor({name}{list(self.shape)})'

    __repr__ = __str__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def stop_gradient(x: Tensor) -> Tensor:
    """Returns a constant copy of `x`; nothing flows back through it."""
    return Tensor(x.values, requires_grad=False, name=x.name)


BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Operation(object):

    def __init__(self, name: str, inputs: Tuple[Tensor, ...], output: Tensor,
                 backward: BackwardFn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __str__(self):
        inputs = ', '.join(str(list(t.shape)) for t in self.inputs)
        return f'{self.name}({inputs}) -> {list(self.output.shape)}'


class Tape(object):
    """Records operations in execution order, hence topologically sorted.

    The active tape is per thread."""
    _local = threading.local()

    def __init__(self):
        self.operations = []  # type: List[Operation]
        self._output_ids = set()
        self._saved = None

    def __enter__(self):
        self._saved = Tape.current()
        Tape._local.tape = self
        return self

    def __exit__(self, ex_type, ex_value, trace):
        Tape._local.tape = self._saved

    @staticmethod
    def current() -> Optional['Tape']:
        return getattr(Tape._local, 'tape', None)

    def __len__(self):
        return len(self.operations)

    def __contains__(self, tensor: Tensor):
        return id(tensor) in self._output_ids

    def record(self, operation: Operation):
        assert id(operation.output) not in self._output_ids
        self.operations.append(operation)
        self._output_ids.add(id(operation.output))
        if utils._log_tape_ops:
            logger.debug('tape[%d] %s', len(self.operations) - 1, operation)


def _result(name: str, values: np.ndarray, inputs: Tuple[Tensor, ...],
            backward: BackwardFn) -> Tensor:
    assert np.all(np.isfinite(values)), f'{name} produced non-finite values'
    tape = Tape.current()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    output = Tensor(values, requires_grad=requires_grad)
    if requires_grad:
        output.is_leaf = False
        tape.record(Operation(name, inputs, output, backward))
    return output


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        'add', a.values + b.values, (a, b), lambda g:
        (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        'sub', a.values - b.values, (a, b), lambda g:
        (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        'mul', a.values * b.values, (a, b), lambda g:
        (_unbroadcast(g * b.values, a.shape),
         _unbroadcast(g * a.values, b.shape)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product. `a` may be a vector, treated as a single row."""
    a, b = as_tensor(a), as_tensor(b)
    if (a.ndim not in (1, 2) or b.ndim != 2
            or a.shape[-1] != b.shape[0]):
        raise ShapeError(f'matmul: shapes {list(a.shape)} and '
                         f'{list(b.shape)} do not align')

    def backward(g):
        if a.ndim == 1:
            return g @ b.values.T, np.outer(a.values, g)
        return g @ b.values.T, a.values.T @ g

    return _result('matmul', a.values @ b.values, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    return _result('transpose', x.values.T, (x, ), lambda g: (g.T, ))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _result('reshape', x.values.reshape(shape), (x, ),
                   lambda g: (g.reshape(x.shape), ))


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(), )

    return _result('sum', x.values.sum(axis=axis, keepdims=keepdims), (x, ),
                   backward)


def reduce_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result('concat',
                   np.concatenate([t.values for t in tensors], axis=axis),
                   tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result('stack', np.stack([t.values for t in tensors], axis=axis),
                   tensors, backward)


def take(x: Tensor, index) -> Tensor:
    """Selects rows of `x`: the embedding lookup when `index` is an ID array."""
    if isinstance(index, list):
        index = np.asarray(index, dtype=np.int64)

    def backward(g):
        grad = np.zeros(x.shape)
        if isinstance(index, np.ndarray):
            # IDs may repeat within one lookup.
            np.add.at(grad, index, g)
        else:
            grad[index] = g
        return (grad, )

    return _result('take', x.values[index], (x, ), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _result('tanh', y, (x, ), lambda g: (g * (1.0 - y * y), ))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.values)
    return _result('sigmoid', y, (x, ), lambda g: (g * y * (1.0 - y), ))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    positive = x.values > 0
    return _result('leaky_relu', np.where(positive, x.values,
                                          slope * x.values), (x, ),
                   lambda g: (g * np.where(positive, 1.0, slope), ))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)), )

    return _result('softmax', y, (x, ), backward)


def log(x: Tensor) -> Tensor:
    assert np.all(x.values > 0), 'log of non-positive values; clamp first'
    return _result('log', np.log(x.values), (x, ), lambda g: (g / x.values, ))


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.values >= low) & (x.values <= high)
    return _result('clamp', np.clip(x.values, low, high), (x, ),
                   lambda g: (g * inside, ))


def clamp_probability(p: Tensor) -> Tensor:
    return clamp(p, PROB_MIN, PROB_MAX)


_ACTIVATIONS = {
    'tanh': tanh,
    'sigmoid': sigmoid,
    'leaky_relu': leaky_relu,
    'softmax': softmax,
    'log': log,
}


def activation(kind: str,
               x: Tensor,
               slope: float = 0.01,
               axis: int = -1) -> Tensor:
    if kind == 'leaky_relu':
        return leaky_relu(x, slope)
    if kind == 'softmax':
        return softmax(x, axis)
    func = _ACTIVATIONS.get(kind)
    if func is None:
        raise ValueError(f'Unknown activation "{kind}"')
    return func(x)


def batch_norm(x: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Standardizes each column with the batch mean and population variance.

    There is no learned scale or shift; a single-row batch yields zeros."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f'batch_norm: expected [batch, d], got {x.shape}')
    count = x.shape[0]
    centered = x.values - x.values.mean(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=0, keepdims=True) +
                            epsilon)
    normalized = centered * inv_std

    def backward(g):
        grad = (inv_std / count) * (count * g - g.sum(axis=0, keepdims=True) -
                                    normalized *
                                    (g * normalized).sum(axis=0, keepdims=True))
        return (grad, )

    return _result('batch_norm', normalized, (x, ), backward)


def segment_softmax(scores: Tensor, segment_ids: np.ndarray,
                    num_segments: int) -> Tensor:
    """Softmax of a flat score vector within each segment."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    maxes = np.full(num_segments, -np.inf)
    np.maximum.at(maxes, segment_ids, scores.values)
    exp = np.exp(scores.values - maxes[segment_ids])
    totals = np.zeros(num_segments)
    np.add.at(totals, segment_ids, exp)
    y = exp / totals[segment_ids]

    def backward(g):
        dots = np.zeros(num_segments)
        np.add.at(dots, segment_ids, g * y)
        return (y * (g - dots[segment_ids]), )

    return _result('segment_softmax', y, (scores, ), backward)


def segment_sum(values: Tensor, segment_ids: np.ndarray,
                num_segments: int) -> Tensor:
    """Sums rows of `values` by segment. Empty segments yield zero rows."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    totals = np.zeros((num_segments, ) + values.shape[1:])
    np.add.at(totals, segment_ids, values.values)
    return _result('segment_sum', totals, (values, ),
                   lambda g: (g[segment_ids], ))


class Gradients(object):
    """Gradients of a loss keyed by leaf tensor.

    Tensors the loss does not reach, including those behind `stop_gradient`,
    have zero gradients."""

    def __init__(self, grads: Dict[int, np.ndarray],
                 tensors: Dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._grads.get(id(tensor))
        if grad is None:
            return np.zeros(tensor.shape)
        return grad

    def __contains__(self, tensor: Tensor):
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)

    def for_names(self, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
        return {name: self[tensor] for name, tensor in params.items()}


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Gradients:
    if tape is None:
        tape = Tape.current()
    if loss.size != 1:
        raise ShapeError(f'backward: loss must be a scalar, got {loss.shape}')
    if not loss.requires_grad:
        return Gradients({}, {})
    if loss.is_leaf:
        return Gradients({id(loss): np.ones(loss.shape)}, {id(loss): loss})
    if tape is None or loss not in tape:
        raise ShapeError('backward: loss is not on the tape')

    grads = {id(loss): np.ones(loss.shape)}
    leaves = {}
    for operation in reversed(tape.operations):
        grad = grads.pop(id(operation.output), None)
        if grad is None:
            continue
        input_grads = operation.backward(grad)
        assert len(input_grads) == len(operation.inputs), operation.name
        for tensor, input_grad in zip(operation.inputs, input_grads):
            if input_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + input_grad
            else:
                grads[key] = input_grad
            if tensor not in tape:
                leaves[key] = tensor
    leaf_grads = {key: grads[key] for key in leaves}
    return Gradients(leaf_grads, leaves)


class Rng(object):
    """Named, splittable deterministic random streams.

    Identical `(seed, key)` pairs always produce identical sample streams."""

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def stream(self, name: str) -> 'Rng':
        return Rng(self.seed, self.key + (zlib.crc32(name.encode()), ))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    @property
    def state(self) -> dict:
        return self._generator.bit_generator.state

    @state.setter
    def state(self, state: dict):
        self._generator.bit_generator.state = state

    def normal(self, shape) -> np.ndarray:
        return self._generator.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._generator.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)


def gaussian_sample(shape, rng: Rng) -> Tensor:
    """I.i.d. standard normal entries."""
    return Tensor(rng.normal(shape))


class OptimizerState(object):
    """RMSProp running means of squared gradients, keyed by parameter name."""

    def __init__(self,
                 learning_rate: float = 0.01,
                 decay: float = 0.9,
                 epsilon: float = 1e-8,
                 clip: float = 0.0):
        assert 0.0 < decay < 1.0
        assert epsilon > 0.0
        assert learning_rate > 0.0
        self.learning_rate = learning_rate
        self.decay = decay
        self.epsilon = epsilon
        self.clip = clip
        self.accumulators = {}  # type: Dict[str, np.ndarray]

    def clone(self) -> 'OptimizerState':
        clone = OptimizerState(self.learning_rate, self.decay, self.epsilon,
                               self.clip)
        clone.accumulators = {
            name: acc.copy()
            for name, acc in self.accumulators.items()
        }
        return clone

    def accumulator(self, name: str, shape) -> np.ndarray:
        acc = self.accumulators.get(name)
        if acc is None:
            return np.zeros(shape)
        assert acc.shape == tuple(shape), name
        return acc


def rmsprop_step(
        params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
        state: OptimizerState
) -> Tuple[Dict[str, Tensor], OptimizerState]:
    """One RMSProp update of the parameters named in `grads`.

    acc <- decay * acc + (1 - decay) * g^2
    p <- p - lr * g / sqrt(acc + epsilon)
    Parameters without gradients and their accumulators are left unchanged."""
    new_params = dict(params)
    new_state = state.clone()
    for name in sorted(grads.keys()):
        param = params[name]
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f'rmsprop: gradient {list(grad.shape)} does not '
                             f'match parameter "{name}" {list(param.shape)}')
        if state.clip > 0:
            grad = np.clip(grad, -state.clip, state.clip)
        acc = state.accumulator(name, param.shape)
        acc = state.decay * acc + (1.0 - state.decay) * grad * grad
        new_state.accumulators[name] = acc
        values = param.values - state.learning_rate * grad / np.sqrt(
            acc + state.epsilon)
        new_params[name] = Tensor.parameter(values, name=name)
    return new_params, new_state


def gradient_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
