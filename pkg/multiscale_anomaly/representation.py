"""Multiscale representations: features, attributes, instances and blocks.

All instances of a block are encoded together. Feature IDs of the block are
flattened into one array; each (instance, attribute) pair is a segment, so
attention normalizes per segment and an empty attribute pools to zeros."""
import logging
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from multiscale_anomaly.dataset import DataError
from multiscale_anomaly.dataset import Instance
from multiscale_anomaly.tensor import ShapeError
from multiscale_anomaly.tensor import Tensor
from multiscale_anomaly.tensor import as_tensor
from multiscale_anomaly.tensor import batch_norm
from multiscale_anomaly.tensor import concat
from multiscale_anomaly.tensor import leaky_relu
from multiscale_anomaly.tensor import matmul
from multiscale_anomaly.tensor import mul
from multiscale_anomaly.tensor import reshape
from multiscale_anomaly.tensor import segment_softmax
from multiscale_anomaly.tensor import segment_sum
from multiscale_anomaly.tensor import sigmoid
from multiscale_anomaly.tensor import stack
from multiscale_anomaly.tensor import stop_gradient
from multiscale_anomaly.tensor import take
from multiscale_anomaly.tensor import tanh

logger = logging.getLogger('repr')

Params = Dict[str, Tensor]


class EmbeddingTable(object):

    def __init__(self, matrix: Tensor):
        assert matrix.ndim == 2
        self.matrix = matrix

    @staticmethod
    def from_params(params: Params) -> 'EmbeddingTable':
        return EmbeddingTable(params['embedding'])

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.matrix.shape[1]

    def lookup(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.dimension):
            bad = ids[(ids < 0) | (ids >= self.dimension)][0]
            raise DataError(f'Feature ID {bad} is out of the vocabulary '
                            f'[0, {self.dimension})')
        return take(self.matrix, ids)


class AttentionParams(object):
    """Additive attention: score(x) = u . tanh(x W + b)."""

    def __init__(self, W: Tensor, b: Tensor, u: Tensor):
        if W.ndim != 2 or b.shape != (W.shape[1], ) or u.shape != b.shape:
            raise ShapeError(f'attention: W {list(W.shape)}, b '
                             f'{list(b.shape)}, u {list(u.shape)}')
        self.W = W
        self.b = b
        self.u = u

    @staticmethod
    def from_params(params: Params, prefix: str) -> 'AttentionParams':
        return AttentionParams(params[f'{prefix}.W'], params[f'{prefix}.b'],
                               params[f'{prefix}.u'])

    @staticmethod
    def shapes(prefix: str, input_dim: int,
               attention_dim: int) -> Dict[str, Tuple[int, ...]]:
        return {
            f'{prefix}.W': (input_dim, attention_dim),
            f'{prefix}.b': (attention_dim, ),
            f'{prefix}.u': (attention_dim, ),
        }

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @property
    def attention_dim(self) -> int:
        return self.W.shape[1]

    def scores(self, keys: Tensor, shift: Optional[Tensor] = None) -> Tensor:
        """One score per row of `keys`. `shift` is added before the tanh."""
        hidden = matmul(keys, self.W) + self.b
        if shift is not None:
            hidden = hidden + shift
        scores = matmul(tanh(hidden), reshape(self.u,
                                              (self.attention_dim, 1)))
        return reshape(scores, (keys.shape[0], ))


def attention_pool(values: Tensor,
                   keys: Tensor,
                   segment_ids: np.ndarray,
                   num_segments: int,
                   params: AttentionParams,
                   shift: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Attention-weighted sums of `values` rows within each segment.

    Returns the pooled `[num_segments, width]` tensor and the weights."""
    weights = segment_softmax(params.scores(keys, shift), segment_ids,
                              num_segments)
    weighted = mul(values, reshape(weights, (values.shape[0], 1)))
    return segment_sum(weighted, segment_ids, num_segments), weights


def flatten_ids(instances: Sequence[Instance],
                attribute_count: int) -> Tuple[np.ndarray, np.ndarray]:
    """Feature IDs of all instances and their (instance, attribute) segment."""
    ids = []  # type: List[int]
    segments = []  # type: List[int]
    for i, instance in enumerate(instances):
        if instance.attribute_count != attribute_count:
            raise DataError(f'{instance}: expected {attribute_count} '
                            f'attributes, got {instance.attribute_count}')
        for j, attribute in enumerate(instance.attributes):
            ids.extend(attribute)
            segments.extend([i * attribute_count + j] * len(attribute))
    return (np.asarray(ids, dtype=np.int64),
            np.asarray(segments, dtype=np.int64))


def attend_attributes(ids: np.ndarray, segment_ids: np.ndarray,
                      num_segments: int, table: EmbeddingTable,
                      params: AttentionParams) -> Tuple[Tensor, Tensor]:
    features = table.lookup(ids)
    return attention_pool(features, features, segment_ids, num_segments,
                          params)


def attend_attribute(feature_ids: Sequence[int], table: EmbeddingTable,
                     params: AttentionParams) -> Tensor:
    """The attribute vector of one list of feature IDs."""
    ids = np.asarray(feature_ids, dtype=np.int64)
    pooled, _ = attend_attributes(ids, np.zeros(len(ids), dtype=np.int64), 1,
                                  table, params)
    return reshape(pooled, (table.embed_dim, ))


def _as_rows(vectors) -> Tensor:
    if isinstance(vectors, (list, tuple)):
        return stack([as_tensor(v) for v in vectors])
    return as_tensor(vectors)


def _instance_segments(count: int, attribute_count: int) -> np.ndarray:
    return np.repeat(np.arange(count, dtype=np.int64), attribute_count)


def attend_instances_self(attr_vectors: Tensor, attribute_count: int,
                          params: AttentionParams) -> Tuple[Tensor, Tensor]:
    """`attr_vectors` holds `attribute_count` consecutive rows per instance."""
    count = attr_vectors.shape[0] // attribute_count
    return attention_pool(attr_vectors, attr_vectors,
                          _instance_segments(count, attribute_count), count,
                          params)


def attend_instance_self(attr_vectors: Tensor,
                         params: AttentionParams) -> Tensor:
    attr_vectors = _as_rows(attr_vectors)
    pooled, _ = attend_instances_self(attr_vectors, attr_vectors.shape[0],
                                      params)
    return reshape(pooled, (attr_vectors.shape[1], ))


def attend_instances_relative(
        attr_vectors: Tensor,
        attribute_count: int,
        memory: Tensor,
        params: AttentionParams,
        slope: float = 0.01) -> Tuple[Tensor, Tensor]:
    """Weights from `[f(v_a), memory]`, applied to the raw attribute vectors.

    The weight matrix is split by rows into the attribute part and the
    memory part, so the memory term is computed once per block."""
    width = attr_vectors.shape[1]
    if params.input_dim != width + memory.shape[0]:
        raise ShapeError(f'relative attention: W has {params.input_dim} '
                         f'rows, inputs {width} + memory {memory.shape[0]}')
    count = attr_vectors.shape[0] // attribute_count
    memory_shift = matmul(memory, take(params.W, slice(width, None)))
    attr_params = AttentionParams(take(params.W, slice(0, width)), params.b,
                                  params.u)
    weights = segment_softmax(
        attr_params.scores(leaky_relu(attr_vectors, slope), memory_shift),
        _instance_segments(count, attribute_count), count)
    weighted = mul(attr_vectors, reshape(weights,
                                         (attr_vectors.shape[0], 1)))
    return segment_sum(weighted, _instance_segments(count, attribute_count),
                       count), weights


def attend_instance_relative(attr_vectors: Tensor,
                             v_mem: Tensor,
                             params: AttentionParams,
                             slope: float = 0.01) -> Tensor:
    attr_vectors = _as_rows(attr_vectors)
    pooled, _ = attend_instances_relative(attr_vectors, attr_vectors.shape[0],
                                          as_tensor(v_mem), params, slope)
    return reshape(pooled, (attr_vectors.shape[1], ))


def instance_vector(v_self: Tensor,
                    v_relative: Optional[Tensor],
                    epsilon: float = 1e-5,
                    statistics: Optional['NormStatistics'] = None) -> Tensor:
    """Normalized `[v_self, v_relative]`; rows are the block's instances.

    Columns are standardized with the block's own statistics, or with
    `statistics` when given. `v_relative` of `None` gives the ablated
    `batch_norm(v_self)`."""
    return normalize_instances(instance_features(v_self, v_relative), epsilon,
                               statistics)


def instance_features(v_self: Tensor, v_relative: Optional[Tensor]) -> Tensor:
    if v_relative is None:
        return v_self
    return concat([v_self, v_relative], axis=1)


def normalize_instances(features: Tensor,
                        epsilon: float = 1e-5,
                        statistics: Optional['NormStatistics'] = None
                        ) -> Tensor:
    if statistics is None:
        return batch_norm(features, epsilon)
    return statistics.normalize(features, epsilon)


class NormStatistics(object):
    """Running column means and variances of unnormalized instance vectors.

    Training updates them once per block; scoring can standardize with them
    instead of the statistics of the scored block, which are zeros for a
    single instance."""

    def __init__(self, mean: np.ndarray, var: np.ndarray, count: int = 0):
        mean = np.asarray(mean, dtype=np.float64)
        var = np.asarray(var, dtype=np.float64)
        if mean.ndim != 1 or var.shape != mean.shape:
            raise ShapeError(f'NormStatistics: mean {list(mean.shape)}, var '
                             f'{list(var.shape)}')
        self.mean = mean
        self.var = var
        self.count = count

    @staticmethod
    def initial(width: int) -> 'NormStatistics':
        return NormStatistics(np.zeros(width), np.ones(width))

    def __eq__(self, other):
        if not isinstance(other, NormStatistics):
            return NotImplemented
        return (self.count == other.count
                and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.var, other.var))

    def __str__(self):
        return (f'NormStatistics(count={self.count}, '
                f'mean={np.abs(self.mean).mean():.4g}, '
                f'var={self.var.mean():.4g})')

    @property
    def width(self) -> int:
        return self.mean.shape[0]

    def update(self, features: np.ndarray,
               momentum: float) -> 'NormStatistics':
        """Moves toward the statistics of `features`, one row per instance.

        The first update takes them as they are."""
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.width:
            raise ShapeError(f'NormStatistics.update: {list(features.shape)}'
                             f', width {self.width}')
        mean = features.mean(axis=0)
        var = ((features - mean)**2).mean(axis=0)
        if self.count:
            mean = momentum * self.mean + (1 - momentum) * mean
            var = momentum * self.var + (1 - momentum) * var
        return NormStatistics(mean, var, self.count + 1)

    def normalize(self, features: Tensor, epsilon: float = 1e-5) -> Tensor:
        if features.shape[-1] != self.width:
            raise ShapeError(f'NormStatistics.normalize: '
                             f'{list(features.shape)}, width {self.width}')
        inv_std = 1.0 / np.sqrt(self.var + epsilon)
        return (features - Tensor(self.mean)) * Tensor(inv_std)

    def to_json(self) -> dict:
        return {
            'mean': [float(v) for v in self.mean],
            'var': [float(v) for v in self.var],
            'count': self.count,
        }

    @staticmethod
    def from_json(data: dict) -> 'NormStatistics':
        return NormStatistics(data['mean'], data['var'], int(data['count']))


class InstanceEncoding(object):
    """Intermediate vectors of one block's instances, with attention weights."""

    def __init__(self, attributes: Tensor, feature_weights: Tensor,
                 self_vectors: Tensor, self_weights: Tensor,
                 relative_vectors: Optional[Tensor],
                 relative_weights: Optional[Tensor], features: Tensor,
                 vectors: Tensor):
        self.attributes = attributes
        self.feature_weights = feature_weights
        self.self_vectors = self_vectors
        self.self_weights = self_weights
        self.relative_vectors = relative_vectors
        self.relative_weights = relative_weights
        # Before normalization.
        self.features = features
        self.vectors = vectors

    def __len__(self):
        return self.vectors.shape[0]


def encode_instances(instances: Sequence[Instance],
                     params: Params,
                     memory: Tensor,
                     attribute_count: int,
                     no_relrep: bool = False,
                     slope: float = 0.01,
                     epsilon: float = 1e-5,
                     statistics: Optional[NormStatistics] = None
                     ) -> InstanceEncoding:
    """Instance vectors of one block, given the previous block's memory.

    Without `statistics`, the block is normalized with its own statistics."""
    count = len(instances)
    assert count > 0
    table = EmbeddingTable.from_params(params)
    ids, segments = flatten_ids(instances, attribute_count)
    attributes, feature_weights = attend_attributes(
        ids, segments, count * attribute_count, table,
        AttentionParams.from_params(params, 'attn_f'))
    self_vectors, self_weights = attend_instances_self(
        attributes, attribute_count,
        AttentionParams.from_params(params, 'attn_a'))
    if no_relrep:
        relative_vectors = relative_weights = None
    else:
        relative_vectors, relative_weights = attend_instances_relative(
            attributes, attribute_count, memory,
            AttentionParams.from_params(params, 'attn_r'), slope)
    features = instance_features(self_vectors, relative_vectors)
    vectors = normalize_instances(features, epsilon, statistics)
    return InstanceEncoding(attributes, feature_weights, self_vectors,
                            self_weights, relative_vectors, relative_weights,
                            features, vectors)


class RnnParams(object):
    """A single recurrent cell applied as `cell(x W_in + b, h W_rec)`.

    The tanh cell has `h` columns; the gated cell stacks update, reset and
    candidate columns, `3h` in total."""

    def __init__(self, W_in: Tensor, W_rec: Tensor, b: Tensor,
                 cell: str = 'tanh'):
        hidden = W_rec.shape[0]
        width = 3 * hidden if cell == 'gru' else hidden
        if cell not in ('tanh', 'gru'):
            raise ValueError(f'Unknown RNN cell "{cell}"')
        if (W_in.ndim != 2 or W_rec.shape != (hidden, width)
                or W_in.shape[1] != width or b.shape != (width, )):
            raise ShapeError(f'rnn[{cell}]: W_in {list(W_in.shape)}, W_rec '
                             f'{list(W_rec.shape)}, b {list(b.shape)}')
        self.W_in = W_in
        self.W_rec = W_rec
        self.b = b
        self.cell = cell

    @staticmethod
    def from_params(params: Params, cell: str = 'tanh') -> 'RnnParams':
        return RnnParams(params['rnn.W_in'], params['rnn.W_rec'],
                         params['rnn.b'], cell)

    @staticmethod
    def shapes(input_dim: int, hidden: int,
               cell: str = 'tanh') -> Dict[str, Tuple[int, ...]]:
        width = 3 * hidden if cell == 'gru' else hidden
        return {
            'rnn.W_in': (input_dim, width),
            'rnn.W_rec': (hidden, width),
            'rnn.b': (width, ),
        }

    @property
    def hidden_size(self) -> int:
        return self.W_rec.shape[0]

    def snapshot(self) -> 'RnnParams':
        """A value copy; no gradient flows back into these parameters."""
        return RnnParams(stop_gradient(self.W_in), stop_gradient(self.W_rec),
                         stop_gradient(self.b), self.cell)

    def step(self, projected: Tensor, state: Tensor) -> Tensor:
        recurrent = matmul(state, self.W_rec)
        if self.cell == 'tanh':
            return tanh(projected + recurrent)
        h = self.hidden_size
        update = sigmoid(projected[0:h] + recurrent[0:h])
        reset = sigmoid(projected[h:2 * h] + recurrent[h:2 * h])
        candidate = tanh(projected[2 * h:] + reset * recurrent[2 * h:])
        return (1.0 - update) * candidate + update * state


def run_rnn(inputs: Tensor,
            initial: Tensor,
            rnn: RnnParams,
            slope: float = 0.01) -> Tuple[Tensor, Tensor]:
    """Runs the cell over `f(inputs)` rows; returns all states and the last."""
    if initial.shape != (rnn.hidden_size, ):
        raise ShapeError(f'rnn: initial state {list(initial.shape)}, '
                         f'hidden size {rnn.hidden_size}')
    projected = matmul(leaky_relu(inputs, slope), rnn.W_in) + rnn.b
    state = initial
    states = []
    for t in range(inputs.shape[0]):
        state = rnn.step(projected[t], state)
        states.append(state)
    return stack(states), state


class BlockState(object):
    """Hidden states of one block, its final state and the memory it used."""

    def __init__(self, states: Tensor, final: Tensor, memory: Tensor):
        self.states = states
        self.final = final
        self.memory = memory

    @staticmethod
    def zeros(hidden: int) -> Tensor:
        """The memory before the first block."""
        return Tensor(np.zeros(hidden))

    def handoff(self) -> Tensor:
        """The memory and initial state of the next block."""
        return stop_gradient(self.final)


def block_forward(instance_vectors: Tensor,
                  prev_state: Tensor,
                  rnn: RnnParams,
                  slope: float = 0.01) -> BlockState:
    states, final = run_rnn(instance_vectors, prev_state, rnn, slope)
    return BlockState(states, final, prev_state)
