#!/usr/bin/env python3
import argparse
import asyncio
import logging
import math
import pathlib
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd

from multiscale_anomaly.config import Config
from multiscale_anomaly.config import ConfigError
from multiscale_anomaly.dataset import Block
from multiscale_anomaly.dataset import DataError
from multiscale_anomaly.dataset import Instance
from multiscale_anomaly.dataset import Label
from multiscale_anomaly.dataset import blockify
from multiscale_anomaly.dataset import config_from_args
from multiscale_anomaly.dataset import label_block
from multiscale_anomaly.dataset import load_dataset
from multiscale_anomaly.evaluation import EvaluationError
from multiscale_anomaly.evaluation import auroc
from multiscale_anomaly.model import ModelParameters
from multiscale_anomaly.model import forward_block
from multiscale_anomaly.representation import NormStatistics
from multiscale_anomaly.tensor import Rng
from multiscale_anomaly.tensor import Tensor
from multiscale_anomaly.trainer import Checkpoint
from multiscale_anomaly.trainer import block_losses
from multiscale_anomaly.utils import init_logging
from multiscale_anomaly.utils import run_coros

logger = logging.getLogger('score')

LEVELS = ('instance', 'block')


class ScoreRecord(object):
    """An anomaly score with the loss terms it is composed of.

    `mean_instance` is the mean instance score of a block; it is `nan` for
    instance records."""

    def __init__(self,
                 level: str,
                 index: int,
                 z: float,
                 loss_g: float,
                 loss_d: float,
                 mean_instance: float = math.nan,
                 label: Label = Label.UNKNOWN):
        assert level in LEVELS
        self.level = level
        self.index = index
        self.z = z
        self.loss_g = loss_g
        self.loss_d = loss_d
        self.mean_instance = mean_instance
        self.label = label

    def __str__(self):
        return f'{self.level}#{self.index} z={self.z:.6g} {self.label}'

    __repr__ = __str__

    @property
    def is_labeled(self) -> bool:
        return self.label != Label.UNKNOWN

    @property
    def is_anomalous(self) -> bool:
        return self.label == Label.ANOMALOUS

    def recompute(self,
                  beta: float,
                  gamma: float = 0.0,
                  no_blockloss: bool = False) -> float:
        if self.level == 'instance':
            return score_instance(self.loss_g, self.loss_d, beta)
        return score_block(self.loss_g, self.loss_d, [self.mean_instance],
                           beta, gamma, no_blockloss)

    def to_row(self) -> dict:
        return {
            'level': self.level,
            'index': self.index,
            'z': self.z,
            'loss_g': self.loss_g,
            'loss_d': self.loss_d,
            'mean_instance': self.mean_instance,
            'label': '' if self.label == Label.UNKNOWN else str(self.label),
        }


def score_instance(loss_g, loss_d, beta: float):
    """z = L_G + beta L_D. Works elementwise on arrays."""
    return loss_g + beta * loss_d


def score_block(loss_g: float,
                loss_d: float,
                instance_scores: Sequence[float],
                beta: float,
                gamma: float,
                no_blockloss: bool = False) -> float:
    """z = L_G + beta L_D + gamma mean(instance z).

    With `no_blockloss`, just the mean instance score."""
    mean_instance = float(np.mean(instance_scores))
    if no_blockloss:
        return mean_instance
    return loss_g + beta * loss_d + gamma * mean_instance


class Scorer(object):
    """Scores a stream of instances and blocks with fixed parameters.

    Blocks are processed in order, each starting from the memory left by the
    previous one. Instance vectors are normalized with the running
    `statistics` of training unless the config asks for block statistics."""

    def __init__(self,
                 model: ModelParameters,
                 memory: Optional[Tensor] = None,
                 config: Optional[Config] = None,
                 statistics: Optional[NormStatistics] = None):
        self.config = config or model.config
        if config is not None:
            config.check_model_compatible(model.config)
            model = ModelParameters(model.params, config)
        self.model = model
        self.initial_memory = (memory if memory is not None else Tensor(
            np.zeros(self.config.hidden)))
        if self.config.score_norm == 'block':
            statistics = None
        elif statistics is None or not statistics.count:
            logger.warning('No running normalization statistics; each '
                           'block is normalized with its own')
            statistics = None
        self.statistics = statistics

    @staticmethod
    def from_checkpoint(checkpoint: Checkpoint,
                        config: Optional[Config] = None) -> 'Scorer':
        return Scorer(checkpoint.model, checkpoint.memory, config,
                      checkpoint.statistics)

    def _losses(self, instances: Sequence[Instance], memory: Tensor,
                rng: Optional[Rng]):
        config = self.config
        forward = forward_block(self.model, instances, memory, rng,
                                self.statistics)
        losses = block_losses(forward,
                              self.model.discriminator,
                              disc_terms=config.score_disc_terms,
                              generator_loss=config.generator_loss)
        return forward, (losses.instance_g.values, losses.block_g.item(),
                         losses.instance_d.values, losses.block_d.item())

    def score_block(
            self, block: Block, memory: Tensor, rng: Optional[Rng],
            first_index: int) -> Tuple[List[ScoreRecord], ScoreRecord, Tensor]:
        config = self.config
        forward, terms = self._losses(block.instances, memory, None)
        samples = config.score_noise_samples
        if samples and not config.no_noise:
            # Average the loss terms over noisy draws instead of zero noise.
            draws = [
                self._losses(block.instances, memory, rng)[1]
                for _ in range(samples)
            ]
            terms = tuple(
                sum(draw[i] for draw in draws) / samples for i in range(4))
        instance_g, block_g, instance_d, block_d = terms
        z = score_instance(instance_g, instance_d, config.beta)
        instance_records = [
            ScoreRecord('instance', first_index + i, float(z[i]),
                        float(instance_g[i]), float(instance_d[i]),
                        label=instance.label)
            for i, instance in enumerate(block.instances)
        ]
        block_z = score_block(block_g, block_d, z, config.beta, config.gamma,
                              config.no_blockloss)
        block_record = ScoreRecord('block',
                                   block.index,
                                   block_z,
                                   block_g,
                                   block_d,
                                   mean_instance=float(np.mean(z)),
                                   label=label_block(block).label)
        return instance_records, block_record, forward.real.handoff()

    def score_stream(self,
                     instances: Sequence[Instance],
                     block_size: Optional[int] = None) -> List[ScoreRecord]:
        """Instance records in stream order, then block records."""
        if not instances:
            raise DataError('No instances to score')
        block_size = block_size or self.config.block_size
        rng = Rng(self.config.seed).stream('score')
        memory = self.initial_memory
        instance_records = []
        block_records = []
        for block in blockify(instances, block_size):
            records, block_record, memory = self.score_block(
                block, memory, rng, len(instance_records))
            instance_records.extend(records)
            block_records.append(block_record)
        logger.info('Scored %d instances, %d blocks of size %d',
                    len(instance_records), len(block_records), block_size)
        return instance_records + block_records

    @staticmethod
    def main(argv: Optional[List[str]] = None):
        parser = argparse.ArgumentParser(prog='score')
        parser.add_argument('checkpoint', type=pathlib.Path)
        parser.add_argument('test_data', type=pathlib.Path)
        parser.add_argument('-c', '--config', help='config file')
        parser.add_argument('-o',
                            '--output',
                            type=pathlib.Path,
                            help='output directory, default "score" next to '
                            'the checkpoint')
        parser.add_argument('--block-size', type=int)
        parser.add_argument('--no-blockloss', action='store_true')
        parser.add_argument('--set',
                            action='append',
                            default=[],
                            help='override a config value, "key=value"')
        parser.add_argument('-v',
                            '--verbose',
                            help='increase output verbosity',
                            action='count',
                            default=0)
        args = parser.parse_args(argv)
        init_logging(args.verbose, main=logger)
        scorer, instances, config = _load_for_scoring(args, 'score')
        records = scorer.score_stream(instances)
        output = pathlib.Path(config.output)
        path = save_scores(records, output / 'scores.csv')
        config.save(output)
        print(path)
        return path


def _load_for_scoring(args,
                      subdir: str) -> Tuple[Scorer, List[Instance], Config]:
    """Without an explicit output, writes to `subdir` next to the checkpoint
    rather than into the training directory."""
    checkpoint = Checkpoint.load(args.checkpoint)
    base = checkpoint.config.with_values(
        output=str(pathlib.Path(args.checkpoint).parent / subdir))
    config = config_from_args(args, base=base)
    instances, manifest = load_dataset(config.test_data)
    if manifest.dimension > config.dimension:
        raise ConfigError(f'The test data has dimension {manifest.dimension}'
                          f', the model {config.dimension}')
    return Scorer.from_checkpoint(checkpoint, config), instances, config


_score_columns = ('level', 'index', 'z', 'loss_g', 'loss_d', 'mean_instance',
                  'label')


def save_scores(records: Iterable[ScoreRecord],
                path: Union[pathlib.Path, str]) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([record.to_row() for record in records],
                         columns=list(_score_columns))
    frame.to_csv(path, index=False)
    logger.info('Saved %d scores to "%s"', len(frame), path)
    return path


def _to_float(value) -> float:
    if isinstance(value, str) and not value.strip():
        return math.nan
    return float(value)


def load_scores(path: Union[pathlib.Path, str]) -> List[ScoreRecord]:
    path = pathlib.Path(path)
    if not path.is_file():
        raise DataError(f'Score file not found: "{path}"')
    frame = pd.read_csv(path, keep_default_na=False, dtype={'label': str})
    missing = set(_score_columns) - set(frame.columns)
    if missing:
        raise DataError(f'{path}: missing columns {sorted(missing)}')
    records = []
    for row in frame.to_dict('records'):
        try:
            records.append(
                ScoreRecord(row['level'],
                            int(row['index']),
                            _to_float(row['z']),
                            _to_float(row['loss_g']),
                            _to_float(row['loss_d']),
                            mean_instance=_to_float(row['mean_instance']),
                            label=Label.parse(row['label'])))
        except (AssertionError, ValueError) as e:
            raise DataError(f'{path}: cannot parse {row}: {e}') from None
    return records


def level_auroc(records: Sequence[ScoreRecord], level: str) -> float:
    labeled = [r for r in records if r.level == level and r.is_labeled]
    try:
        return auroc([r.z for r in labeled], [r.is_anomalous for r in labeled])
    except EvaluationError as e:
        logger.warning('%s AUROC is undefined: %s', level, e)
        return math.nan


sweep_columns = ('block_size', 'auroc', 'instance_auroc',
                 'reference_instance_auroc')


class Sweeper(object):
    """Block-level AUROC as a function of the scoring block size."""

    def __init__(self, scorer: Scorer, instances: Sequence[Instance]):
        self.scorer = scorer
        self.instances = instances

    def sweep_size(self, block_size: int) -> Tuple[int, float, float]:
        records = self.scorer.score_stream(self.instances, block_size)
        return (block_size, level_auroc(records, 'block'),
                level_auroc(records, 'instance'))

    async def sweep(self,
                    sizes: Iterable[int],
                    parallel: bool = True) -> pd.DataFrame:
        """Each size scores the stream in its own pass.

        `reference_instance_auroc` is the instance AUROC at the configured
        block size, the point the block AUROC of each size compares to."""
        sizes = list(sizes)
        reference_size = self.scorer.config.block_size
        passes = list(sizes)
        if reference_size not in passes:
            passes.append(reference_size)
        loop = asyncio.get_running_loop()
        coros = (loop.run_in_executor(None, self.sweep_size, size)
                 for size in passes)
        rows = await run_coros(coros, parallel=parallel)
        reference = rows[passes.index(reference_size)][2]
        frame = pd.DataFrame(rows[:len(sizes)],
                             columns=list(sweep_columns[:3]))
        frame[sweep_columns[3]] = reference
        logger.info('Reference instance AUROC at block size %d: %.4f',
                    reference_size, reference)
        return frame

    @staticmethod
    async def main(argv: Optional[List[str]] = None):
        parser = argparse.ArgumentParser(prog='sweep')
        parser.add_argument('checkpoint', type=pathlib.Path)
        parser.add_argument('test_data', type=pathlib.Path)
        parser.add_argument('-c', '--config', help='config file')
        parser.add_argument('-o',
                            '--output',
                            type=pathlib.Path,
                            help='output directory, default "sweep" next to '
                            'the checkpoint')
        parser.add_argument('--sizes',
                            dest='sweep_sizes',
                            help='comma-separated block sizes')
        parser.add_argument('--no-blockloss', action='store_true')
        parser.add_argument('--serial',
                            action='store_true',
                            help='score one size at a time')
        parser.add_argument('--set',
                            action='append',
                            default=[],
                            help='override a config value, "key=value"')
        parser.add_argument('-v',
                            '--verbose',
                            help='increase output verbosity',
                            action='count',
                            default=0)
        args = parser.parse_args(argv)
        init_logging(args.verbose, main=logger)
        scorer, instances, config = _load_for_scoring(args, 'sweep')
        frame = await Sweeper(scorer, instances).sweep(config.sweep_sizes,
                                                       parallel=not args.serial)
        output = pathlib.Path(config.output)
        output.mkdir(parents=True, exist_ok=True)
        path = output / 'sweep.csv'
        frame.to_csv(path, index=False)
        config.save(output)
        print(frame.to_string(index=False))
        return path


if __name__ == '__main__':
    Scorer.main()
