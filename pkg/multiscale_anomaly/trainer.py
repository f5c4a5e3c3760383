#!/usr/bin/env python3
import argparse
import json
import logging
import pathlib
import time
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
import pandas as pd

from multiscale_anomaly.adversarial import DiscriminatorParams
from multiscale_anomaly.adversarial import discriminate
from multiscale_anomaly.config import Config
from multiscale_anomaly.config import ConfigError
from multiscale_anomaly.dataset import DataError
from multiscale_anomaly.dataset import Instance
from multiscale_anomaly.dataset import blockify
from multiscale_anomaly.dataset import config_from_args
from multiscale_anomaly.dataset import load_dataset
from multiscale_anomaly.model import DISCRIMINATOR
from multiscale_anomaly.model import GENERATOR
from multiscale_anomaly.model import BlockForward
from multiscale_anomaly.model import ModelParameters
from multiscale_anomaly.model import forward_block
from multiscale_anomaly.representation import BlockState
from multiscale_anomaly.representation import NormStatistics
from multiscale_anomaly.tensor import OptimizerState
from multiscale_anomaly.tensor import Rng
from multiscale_anomaly.tensor import Tape
from multiscale_anomaly.tensor import Tensor
from multiscale_anomaly.tensor import as_tensor
from multiscale_anomaly.tensor import backward
from multiscale_anomaly.tensor import clamp_probability
from multiscale_anomaly.tensor import gradient_norm
from multiscale_anomaly.tensor import log
from multiscale_anomaly.tensor import reduce_mean
from multiscale_anomaly.tensor import reduce_sum
from multiscale_anomaly.tensor import sigmoid
from multiscale_anomaly.tensor import stop_gradient
from multiscale_anomaly.utils import file_digest
from multiscale_anomaly.utils import init_logging

logger = logging.getLogger('train')


def soft_cross_entropy(target: Tensor, prediction: Tensor) -> Tensor:
    """Sigmoid cross entropy between a real and a resembled vector.

    -[s(t) . log s(p) + (1 - s(t)) . log(1 - s(p))], summed over the last
    axis; one value per row for matrices."""
    if target.shape != prediction.shape:
        raise ValueError(f'soft_cross_entropy: {list(target.shape)} vs '
                         f'{list(prediction.shape)}')
    t = clamp_probability(sigmoid(target))
    p = clamp_probability(sigmoid(prediction))
    terms = t * log(p) + (1.0 - t) * log(1.0 - p)
    return -reduce_sum(terms, axis=-1)


def soft_relative_entropy(target: Tensor, prediction: Tensor) -> Tensor:
    """`soft_cross_entropy` less the entropy of s(t): zero at t == p.

    Unlike the cross entropy, it does not fall when t moves away from 0
    with p on the same side."""
    if target.shape != prediction.shape:
        raise ValueError(f'soft_relative_entropy: {list(target.shape)} vs '
                         f'{list(prediction.shape)}')
    t = clamp_probability(sigmoid(target))
    p = clamp_probability(sigmoid(prediction))
    terms = (t * (log(t) - log(p)) + (1.0 - t) *
             (log(1.0 - t) - log(1.0 - p)))
    return reduce_sum(terms, axis=-1)


GENERATOR_LOSSES = {
    'cross_entropy': soft_cross_entropy,
    'relative_entropy': soft_relative_entropy,
}


def binary_cross_entropy(probability: Tensor, label: float) -> Tensor:
    """-[y log p + (1 - y) log(1 - p)], elementwise, with p clamped."""
    assert label in (0, 1)
    p = clamp_probability(as_tensor(probability))
    if label:
        return -log(p)
    return -log(1.0 - p)


class LossBundle(object):
    """Loss terms of one block.

    `instance_g` and `instance_d` hold one value per instance; the totals are
    their means plus the block terms."""

    def __init__(self, instance_g: Tensor, block_g: Tensor,
                 instance_d: Tensor, block_d: Tensor,
                 adversarial: Optional[Tensor] = None):
        self.instance_g = instance_g
        self.block_g = block_g
        self.instance_d = instance_d
        self.block_d = block_d
        self.total_g = reduce_mean(instance_g) + block_g
        if adversarial is not None:
            self.total_g = self.total_g + adversarial
        self.total_d = reduce_mean(instance_d) + block_d

    def __str__(self):
        return (f'L_G={self.total_g.item():.6g} '
                f'(instance={self.mean_instance_g:.6g}, '
                f'block={self.block_g.item():.6g}) '
                f'L_D={self.total_d.item():.6g} '
                f'(instance={self.mean_instance_d:.6g}, '
                f'block={self.block_d.item():.6g})')

    @property
    def mean_instance_g(self) -> float:
        return float(self.instance_g.values.mean())

    @property
    def mean_instance_d(self) -> float:
        return float(self.instance_d.values.mean())

    def to_row(self) -> Dict[str, float]:
        return {
            'loss_g_instance': self.mean_instance_g,
            'loss_g_block': self.block_g.item(),
            'loss_d_instance': self.mean_instance_d,
            'loss_d_block': self.block_d.item(),
        }


def discriminator_loss(real: Tensor,
                       resembled: Tensor,
                       params: DiscriminatorParams,
                       head: str,
                       terms: str = 'both') -> Tensor:
    """Averages the real (label 1) and resembled (label 0) terms.

    With `terms` of "real", only the real vector is scored."""
    real_loss = binary_cross_entropy(discriminate(real, params, head), 1)
    if terms == 'real':
        return real_loss
    assert terms == 'both'
    resembled_loss = binary_cross_entropy(
        discriminate(resembled, params, head), 0)
    return 0.5 * (real_loss + resembled_loss)


def block_losses(forward: BlockForward,
                 discriminator: DiscriminatorParams,
                 detach_generator: bool = False,
                 disc_terms: str = 'both',
                 adversarial_weight: float = 0.0,
                 generator_loss: str = 'cross_entropy') -> LossBundle:
    """Assembles the generator and discriminator losses of one block.

    `detach_generator` makes every generated vector a constant, for the
    discriminator step. A positive `adversarial_weight` adds the term where
    the resembled vectors try to be classified as real. `generator_loss`
    names the real-vs-resembled loss in `GENERATOR_LOSSES`."""
    generator_fn = GENERATOR_LOSSES[generator_loss]
    v_i = forward.instance_vectors
    v_i_star = forward.resembled_instances
    v_b = forward.block_vector
    v_b_star = forward.resembled_block_vector
    if detach_generator:
        v_i, v_i_star, v_b, v_b_star = (stop_gradient(t)
                                        for t in (v_i, v_i_star, v_b,
                                                  v_b_star))
    adversarial = None
    if adversarial_weight > 0:
        fooled = (reduce_mean(
            binary_cross_entropy(
                discriminate(v_i_star, discriminator, 'instance'), 1)) +
                  binary_cross_entropy(
                      discriminate(v_b_star, discriminator, 'block'), 1))
        adversarial = adversarial_weight * fooled
    return LossBundle(
        generator_fn(v_i, v_i_star), generator_fn(v_b, v_b_star),
        discriminator_loss(v_i, v_i_star, discriminator, 'instance',
                           disc_terms),
        discriminator_loss(v_b, v_b_star, discriminator, 'block',
                           disc_terms), adversarial)


class TrainingLog(object):
    columns = ('block_index', 'loss_g_instance', 'loss_g_block',
               'loss_d_instance', 'loss_d_block')

    def __init__(self, rows: Optional[List[Dict[str, Any]]] = None):
        self.rows = list(rows or [])

    def __len__(self):
        return len(self.rows)

    def append(self, block_index: int, losses: LossBundle):
        row = {'block_index': block_index}
        row.update(losses.to_row())
        self.rows.append(row)

    def total_g(self) -> np.ndarray:
        return np.array([
            row['loss_g_instance'] + row['loss_g_block'] for row in self.rows
        ])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.columns))

    def save(self, path: Union[pathlib.Path, str]) -> pathlib.Path:
        path = pathlib.Path(path)
        self.to_frame().to_csv(path, index=False)
        return path

    @staticmethod
    def load(path: Union[pathlib.Path, str]) -> 'TrainingLog':
        frame = pd.read_csv(path)
        missing = set(TrainingLog.columns) - set(frame.columns)
        if missing:
            raise DataError(f'{path}: missing columns {sorted(missing)}')
        rows = frame.to_dict('records')
        for row in rows:
            row['block_index'] = int(row['block_index'])
        return TrainingLog(rows)


class CheckpointError(DataError):
    pass


class Checkpoint(object):
    """Everything needed to resume training or to score."""
    FORMAT = 'multiscale-anomaly-checkpoint'
    VERSION = 2

    def __init__(self,
                 model: ModelParameters,
                 optimizer: OptimizerState,
                 memory: Tensor,
                 rng_state: dict,
                 epoch: int = 0,
                 block_index: int = 0,
                 log: Optional[TrainingLog] = None,
                 statistics: Optional[NormStatistics] = None):
        self.model = model
        self.optimizer = optimizer
        self.memory = memory
        self.rng_state = rng_state
        self.epoch = epoch
        self.block_index = block_index
        self.log = log or TrainingLog()
        self.statistics = statistics or NormStatistics.initial(
            model.config.instance_dim)

    @property
    def config(self) -> Config:
        return self.model.config

    @staticmethod
    def _array_to_json(values: np.ndarray) -> Dict[str, Any]:
        return {
            'shape': list(values.shape),
            'values': [float(v) for v in values.reshape(-1)]
        }

    @staticmethod
    def _array_from_json(value: Dict[str, Any], name: str) -> np.ndarray:
        try:
            array = np.array(value['values'], dtype=np.float64)
            return array.reshape(tuple(value['shape']))
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f'Corrupt tensor "{name}": {e}') from None

    def to_json(self) -> Dict[str, Any]:
        optimizer = self.optimizer
        return {
            'format': self.FORMAT,
            'version': self.VERSION,
            'config': {
                key: list(value) if isinstance(value, tuple) else value
                for key, value in self.config.items()
            },
            'params': {
                name: self._array_to_json(self.model[name].values)
                for name in self.model.names
            },
            'optimizer': {
                'learning_rate': optimizer.learning_rate,
                'decay': optimizer.decay,
                'epsilon': optimizer.epsilon,
                'clip': optimizer.clip,
                'accumulators': {
                    name: self._array_to_json(acc)
                    for name, acc in sorted(optimizer.accumulators.items())
                },
            },
            'memory': self._array_to_json(self.memory.values),
            'norm': self.statistics.to_json(),
            'rng': self.rng_state,
            'epoch': self.epoch,
            'block_index': self.block_index,
            'log': self.log.rows,
        }

    def save(self, path: Union[pathlib.Path, str]) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_json(), sort_keys=True, indent=1)
        path.write_text(text + '\n')
        logger.info('Saved checkpoint to "%s" sha256=%s', path,
                    file_digest(path))
        return path

    @staticmethod
    def from_json(data: Dict[str, Any], source: str = '') -> 'Checkpoint':
        if not isinstance(data, dict) or data.get('format') != Checkpoint.FORMAT:
            raise CheckpointError(f'{source}: not a checkpoint file')
        if data.get('version') != Checkpoint.VERSION:
            raise CheckpointError(f'{source}: checkpoint version '
                                  f'{data.get("version")} is not supported, '
                                  f'expected {Checkpoint.VERSION}')
        try:
            config = Config().update(data['config'])
            params = {
                name: Tensor.parameter(Checkpoint._array_from_json(value,
                                                                   name),
                                       name=name)
                for name, value in data['params'].items()
            }
            saved = data['optimizer']
            optimizer = OptimizerState(saved['learning_rate'],
                                       saved['decay'], saved['epsilon'],
                                       saved['clip'])
            optimizer.accumulators = {
                name: Checkpoint._array_from_json(value, name)
                for name, value in saved['accumulators'].items()
            }
            memory = Tensor(
                Checkpoint._array_from_json(data['memory'], 'memory'))
            checkpoint = Checkpoint(ModelParameters(params, config),
                                    optimizer,
                                    memory,
                                    data['rng'],
                                    epoch=int(data['epoch']),
                                    block_index=int(data['block_index']),
                                    log=TrainingLog(data['log']),
                                    statistics=NormStatistics.from_json(
                                        data['norm']))
        except KeyError as e:
            raise CheckpointError(f'{source}: missing {e}') from None
        except (ConfigError, TypeError, ValueError) as e:
            raise CheckpointError(f'{source}: {e}') from None
        try:
            checkpoint.model.check_shapes(config)
            if checkpoint.statistics.width != config.instance_dim:
                raise ConfigError(
                    f'"norm" has width {checkpoint.statistics.width}, the '
                    f'config expects {config.instance_dim}')
        except ConfigError as e:
            raise CheckpointError(f'{source}: {e}') from None
        return checkpoint

    @staticmethod
    def load(path: Union[pathlib.Path, str]) -> 'Checkpoint':
        path = pathlib.Path(path)
        if not path.is_file():
            raise CheckpointError(f'Checkpoint not found: "{path}"')
        try:
            data = json.loads(path.read_text())
        except ValueError as e:
            raise CheckpointError(f'{path}: corrupt checkpoint: {e}') from None
        return Checkpoint.from_json(data, str(path))


class Trainer(object):
    """Alternating generator/discriminator optimization over time-ordered
    blocks.

    The memory vector carries the last block's state to the next block; it
    is reset to zeros at the start of each epoch."""

    def __init__(self,
                 config: Config,
                 model: Optional[ModelParameters] = None,
                 optimizer: Optional[OptimizerState] = None):
        config.validate()
        self.config = config
        self.model = model or ModelParameters.initialize(config)
        self.model.check_shapes(config)
        self.optimizer = optimizer or OptimizerState(
            learning_rate=config.learning_rate,
            decay=config.rms_decay,
            epsilon=config.rms_epsilon,
            clip=config.grad_clip)
        self.rng = Rng(config.seed).stream('noise')
        self.memory = BlockState.zeros(config.hidden)
        self.epoch = 0
        self.block_index = 0
        self.log = TrainingLog()
        self.statistics = NormStatistics.initial(config.instance_dim)

    @staticmethod
    def from_checkpoint(checkpoint: Checkpoint,
                        config: Optional[Config] = None) -> 'Trainer':
        """Resumes from `checkpoint`. `config` may change training options
        but not the shapes of the model."""
        if config is None:
            config = checkpoint.config
        else:
            config.check_model_compatible(checkpoint.config)
        model = ModelParameters(checkpoint.model.params, config)
        trainer = Trainer(config, model, checkpoint.optimizer.clone())
        trainer.rng.state = checkpoint.rng_state
        trainer.memory = checkpoint.memory
        trainer.epoch = checkpoint.epoch
        trainer.block_index = checkpoint.block_index
        trainer.log = TrainingLog(checkpoint.log.rows)
        trainer.statistics = checkpoint.statistics
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.model, self.optimizer, self.memory,
                          self.rng.state, self.epoch, self.block_index,
                          TrainingLog(self.log.rows), self.statistics)

    @property
    def is_done(self) -> bool:
        return self.epoch >= self.config.epochs

    def generator_step(self, instances: Sequence[Instance]) -> LossBundle:
        config = self.config
        with Tape() as tape:
            forward = forward_block(self.model, instances, self.memory,
                                    self.rng)
            losses = block_losses(
                forward,
                self.model.discriminator,
                adversarial_weight=config.adversarial_weight,
                generator_loss=config.generator_loss)
            grads = backward(losses.total_g, tape)
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug('generator step: %s |g|=%.6g', losses,
                         gradient_norm(grads.for_names(
                             self.model.partition(GENERATOR)).values()))
        self.model, self.optimizer = self.model.apply_gradients(
            grads, GENERATOR, self.optimizer)
        return losses

    def discriminator_step(self, instances: Sequence[Instance]) -> LossBundle:
        # Generated vectors are computed off the tape, hence constants.
        forward = forward_block(self.model, instances, self.memory, self.rng)
        with Tape() as tape:
            losses = block_losses(forward,
                                  self.model.discriminator,
                                  detach_generator=True)
            grads = backward(losses.total_d, tape)
        self.model, self.optimizer = self.model.apply_gradients(
            grads, DISCRIMINATOR, self.optimizer)
        logger.debug('discriminator step: %s', losses)
        return losses

    def train_block(self, instances: Sequence[Instance]) -> LossBundle:
        config = self.config
        for _ in range(config.gen_steps_per_block):
            self.generator_step(instances)
        for _ in range(config.disc_steps_per_block):
            self.discriminator_step(instances)
        forward = forward_block(self.model, instances, self.memory)
        losses = block_losses(forward,
                              self.model.discriminator,
                              generator_loss=config.generator_loss)
        self.memory = forward.real.handoff()
        self.statistics = self.statistics.update(
            forward.encoding.features.values, config.norm_momentum)
        return losses

    def train_stream(self,
                     instances: Sequence[Instance],
                     stop_after: Optional[int] = None) -> TrainingLog:
        """Trains over `instances` block by block, resuming from the current
        position. Stops early after `stop_after` blocks when given."""
        if not instances:
            raise ConfigError('The training data is empty')
        config = self.config
        blocks = blockify(instances, config.block_size)
        logger.info('Training %d blocks x %d epochs, %s', len(blocks),
                    config.epochs, config)
        trained = 0
        while not self.is_done:
            if self.block_index == 0:
                self.memory = BlockState.zeros(config.hidden)
            while self.block_index < len(blocks):
                if stop_after is not None and trained >= stop_after:
                    return self.log
                block = blocks[self.block_index]
                losses = self.train_block(block.instances)
                self.log.append(len(self.log), losses)
                logger.info('epoch %d block %d/%d: %s', self.epoch,
                            self.block_index + 1, len(blocks), losses)
                self.block_index += 1
                trained += 1
            self.epoch += 1
            self.block_index = 0
        return self.log

    def save(self, output: Union[pathlib.Path, str]) -> Dict[str, pathlib.Path]:
        output = pathlib.Path(output)
        output.mkdir(parents=True, exist_ok=True)
        return {
            'checkpoint': self.checkpoint().save(output / 'checkpoint.json'),
            'log': self.log.save(output / 'train_log.csv'),
            'config': self.config.save(output),
        }

    @staticmethod
    def main(argv: Optional[List[str]] = None):
        parser = argparse.ArgumentParser(prog='train')
        parser.add_argument('train_data',
                            nargs='?',
                            help='training data file')
        parser.add_argument('-c', '--config', help='config file')
        parser.add_argument('-o',
                            '--output',
                            type=pathlib.Path,
                            help='output directory')
        parser.add_argument('--checkpoint',
                            type=pathlib.Path,
                            help='resume from this checkpoint')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--block-size', type=int)
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--learning-rate', type=float)
        parser.add_argument('--no-noise', action='store_true')
        parser.add_argument('--no-relrep', action='store_true')
        parser.add_argument('--no-blockloss', action='store_true')
        parser.add_argument('--stop-after',
                            type=int,
                            help='stop after this many blocks')
        parser.add_argument('--set',
                            action='append',
                            default=[],
                            help='override a config value, "key=value"')
        parser.add_argument('--debug', help='names of loggers to debug')
        parser.add_argument('-v',
                            '--verbose',
                            help='increase output verbosity',
                            action='count',
                            default=0)
        args = parser.parse_args(argv)
        init_logging(args.verbose, main=logger, debug=args.debug)
        config = config_from_args(args)
        if not config.train_data:
            raise ConfigError('No training data; specify a file or '
                              '"train_data" in the config')
        instances, manifest = load_dataset(config.train_data)
        config = config.with_values(
            dimension=config.dimension or manifest.dimension,
            attribute_count=config.attribute_count
            or manifest.attribute_count).validate()
        if config.checkpoint:
            trainer = Trainer.from_checkpoint(
                Checkpoint.load(config.checkpoint), config)
        else:
            trainer = Trainer(config)
        start_time = time.time()
        log = trainer.train_stream(instances, stop_after=args.stop_after)
        elapsed = time.time() - start_time
        paths = trainer.save(config.output)
        if len(log):
            total = log.total_g()
            print(f'Trained {len(log)} blocks in {elapsed:.1f}s, '
                  f'L_G first={total[0]:.4f} last={total[-1]:.4f}')
        print(paths['checkpoint'])
        return paths


def load_checkpoint(path: Union[pathlib.Path, str]) -> Checkpoint:
    return Checkpoint.load(path)


def save_checkpoint(checkpoint: Checkpoint,
                    path: Union[pathlib.Path, str]) -> pathlib.Path:
    return checkpoint.save(path)


if __name__ == '__main__':
    Trainer.main()
