import hashlib
import logging
from typing import Dict
from typing import Iterable
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from multiscale_anomaly.adversarial import AutoencoderParams
from multiscale_anomaly.adversarial import DiscriminatorParams
from multiscale_anomaly.adversarial import generate_block
from multiscale_anomaly.adversarial import generate_instance
from multiscale_anomaly.config import Config
from multiscale_anomaly.config import ConfigError
from multiscale_anomaly.dataset import Instance
from multiscale_anomaly.representation import AttentionParams
from multiscale_anomaly.representation import BlockState
from multiscale_anomaly.representation import InstanceEncoding
from multiscale_anomaly.representation import NormStatistics
from multiscale_anomaly.representation import RnnParams
from multiscale_anomaly.representation import block_forward
from multiscale_anomaly.representation import encode_instances
from multiscale_anomaly.tensor import Gradients
from multiscale_anomaly.tensor import OptimizerState
from multiscale_anomaly.tensor import Rng
from multiscale_anomaly.tensor import ShapeError
from multiscale_anomaly.tensor import Tensor
from multiscale_anomaly.tensor import rmsprop_step

logger = logging.getLogger('model')

GENERATOR = 'generator'
DISCRIMINATOR = 'discriminator'


class ModelParameters(object):
    """All trainable tensors by name.

    Names starting with "disc." are the discriminator partition; every other
    tensor belongs to the generator side."""

    def __init__(self, params: Dict[str, Tensor], config: Config):
        self.params = dict(params)
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def __eq__(self, other):
        if not isinstance(other, ModelParameters):
            return NotImplemented
        return (self.names == other.names
                and all(np.array_equal(self[name].values, other[name].values)
                        for name in self.names))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(sorted(self.params.keys()))

    @staticmethod
    def shapes(config: Config) -> Dict[str, Tuple[int, ...]]:
        if config.dimension < 1 or config.attribute_count < 1:
            raise ConfigError('"dimension" and "attribute_count" must be '
                              'known before building a model')
        embed = config.embed_dim
        width = config.instance_dim
        shapes = {'embedding': (config.dimension, embed)}
        shapes.update(
            AttentionParams.shapes('attn_f', embed, config.attention_dim))
        shapes.update(
            AttentionParams.shapes('attn_a', embed, config.attention_dim))
        if not config.no_relrep:
            shapes.update(
                AttentionParams.shapes('attn_r', embed + config.hidden,
                                       config.attention_dim))
        shapes.update(RnnParams.shapes(width, config.hidden, config.rnn_cell))
        shapes.update(AutoencoderParams.shapes(width, config.encoder_width))
        shapes.update(DiscriminatorParams.shapes(width, config.hidden))
        return shapes

    @staticmethod
    def is_bias(name: str) -> bool:
        return name.rsplit('.', 1)[-1].startswith('b')

    @staticmethod
    def initialize(config: Config,
                   rng: Optional[Rng] = None) -> 'ModelParameters':
        """Weights uniform in +/-`init_scale`, biases zero.

        Weights are drawn in sorted name order from the "init" stream."""
        if rng is None:
            rng = Rng(config.seed)
        rng = rng.stream('init')
        params = {}
        for name, shape in sorted(ModelParameters.shapes(config).items()):
            if ModelParameters.is_bias(name):
                values = np.zeros(shape)
            else:
                values = rng.uniform(-config.init_scale, config.init_scale,
                                     shape)
            params[name] = Tensor.parameter(values, name=name)
        model = ModelParameters(params, config)
        logger.info('Initialized %d tensors, %d values', len(params),
                    model.value_count)
        return model

    @property
    def value_count(self) -> int:
        return sum(tensor.size for tensor in self.params.values())

    def partition_names(self, partition: str) -> Tuple[str, ...]:
        if partition == DISCRIMINATOR:
            return tuple(n for n in self.names if n.startswith('disc.'))
        if partition == GENERATOR:
            return tuple(n for n in self.names if not n.startswith('disc.'))
        raise ValueError(f'Unknown partition "{partition}"')

    def partition(self, partition: str) -> Dict[str, Tensor]:
        return {name: self[name] for name in self.partition_names(partition)}

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        """SHA-256 over names, shapes and exact values."""
        hasher = hashlib.sha256()
        for name in sorted(names if names is not None else self.names):
            tensor = self[name]
            hasher.update(name.encode())
            hasher.update(str(tensor.shape).encode())
            hasher.update(np.ascontiguousarray(tensor.values).tobytes())
        return hasher.hexdigest()

    def check_shapes(self, config: Config):
        expected = ModelParameters.shapes(config)
        if set(expected) != set(self.params):
            raise ConfigError('Parameter names do not match the config: ' +
                              ', '.join(sorted(set(expected) ^
                                               set(self.params))))
        for name, shape in expected.items():
            if self[name].shape != shape:
                raise ConfigError(f'"{name}" has shape '
                                  f'{list(self[name].shape)}, the config '
                                  f'expects {list(shape)}')

    def replace(self, params: Dict[str, Tensor]) -> 'ModelParameters':
        updated = dict(self.params)
        for name, tensor in params.items():
            if name not in updated:
                raise KeyError(name)
            if tensor.shape != updated[name].shape:
                raise ShapeError(f'replace: "{name}" {list(tensor.shape)} vs '
                                 f'{list(updated[name].shape)}')
            updated[name] = tensor
        return ModelParameters(updated, self.config)

    def apply_gradients(
        self, grads: Gradients, partition: str, optimizer: OptimizerState
    ) -> Tuple['ModelParameters', OptimizerState]:
        """One optimizer step on one partition; the other is untouched."""
        params = self.partition(partition)
        new_params, optimizer = rmsprop_step(params, grads.for_names(params),
                                             optimizer)
        return self.replace(new_params), optimizer

    @property
    def rnn(self) -> RnnParams:
        return RnnParams.from_params(self.params, self.config.rnn_cell)

    @property
    def autoencoder(self) -> AutoencoderParams:
        return AutoencoderParams.from_params(self.params)

    @property
    def discriminator(self) -> DiscriminatorParams:
        return DiscriminatorParams.from_params(self.params)


class BlockForward(object):
    """Both chains of one block: real vectors and their resembled copies."""

    def __init__(self, encoding: InstanceEncoding, real: BlockState,
                 resembled_instances: Tensor, noise: Tensor,
                 resembled: BlockState):
        self.encoding = encoding
        self.real = real
        self.resembled_instances = resembled_instances
        self.noise = noise
        self.resembled = resembled

    def __len__(self):
        return len(self.encoding)

    @property
    def instance_vectors(self) -> Tensor:
        return self.encoding.vectors

    @property
    def block_vector(self) -> Tensor:
        return self.real.final

    @property
    def resembled_block_vector(self) -> Tensor:
        return self.resembled.final


def forward_block(model: ModelParameters,
                  instances: Sequence[Instance],
                  memory: Tensor,
                  rng: Optional[Rng] = None,
                  statistics: Optional[NormStatistics] = None) -> BlockForward:
    """Encodes a block and generates its resembled counterpart.

    `memory` is the previous block's final state; it feeds the relative
    attention and starts both RNN chains. Noise is drawn from `rng` unless
    it is `None` or the config disables noise. Instance vectors are
    normalized with `statistics` if given, else with the block's own."""
    config = model.config
    slope = config.leaky_slope
    encoding = encode_instances(instances,
                                model.params,
                                memory,
                                config.attribute_count,
                                no_relrep=config.no_relrep,
                                slope=slope,
                                epsilon=config.norm_epsilon,
                                statistics=statistics)
    rnn = model.rnn
    real = block_forward(encoding.vectors, memory, rnn, slope)
    resembled_instances, noise = generate_instance(
        encoding.vectors,
        model.autoencoder,
        rng,
        noise_enabled=not config.no_noise,
        slope=slope,
        output=config.decoder_output)
    resembled = generate_block(resembled_instances, rnn, memory, slope)
    return BlockForward(encoding, real, resembled_instances, noise, resembled)
