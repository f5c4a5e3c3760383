#!/usr/bin/env python3
import argparse
import enum
import logging
import pathlib
from typing import Dict
from typing import Iterable
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd

from multiscale_anomaly.config import ANOMALY_MODES
from multiscale_anomaly.config import Config
from multiscale_anomaly.config import ConfigError
from multiscale_anomaly.tensor import Rng
from multiscale_anomaly.utils import init_logging

logger = logging.getLogger('data')

SYNTHETIC_DIMENSION = 30
SYNTHETIC_START = (0, 10, 20)


class DataError(Exception):
    pass


class Label(enum.Enum):
    NORMAL = 'normal'
    ANOMALOUS = 'anomalous'
    UNKNOWN = 'unknown'

    def __str__(self):
        return self.value

    @staticmethod
    def parse(text: str) -> 'Label':
        text = text.strip().lower()
        if not text:
            return Label.UNKNOWN
        return Label(text)


class Instance(object):
    """A record of `attribute_count` attributes, each a list of feature IDs."""

    def __init__(self,
                 attributes: Iterable[Iterable[int]],
                 label: Label = Label.UNKNOWN,
                 timestamp_index: int = 0):
        self.attributes = tuple(
            tuple(int(i) for i in attribute) for attribute in attributes)
        self.label = label
        self.timestamp_index = timestamp_index

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.attributes == other.attributes
                and self.label == other.label
                and self.timestamp_index == other.timestamp_index)

    def __hash__(self):
        return hash((self.attributes, self.label, self.timestamp_index))

    def __str__(self):
        cells = ','.join(';'.join(str(i) for i in attribute)
                         for attribute in self.attributes)
        return f'#{self.timestamp_index}({cells}) {self.label}'

    __repr__ = __str__

    @property
    def attribute_count(self) -> int:
        return len(self.attributes)

    @property
    def is_anomalous(self) -> bool:
        return self.label == Label.ANOMALOUS

    @property
    def max_id(self) -> int:
        return max((max(a) for a in self.attributes if a), default=-1)

    def with_label(self, label: Label) -> 'Instance':
        if label == self.label:
            return self
        return Instance(self.attributes, label, self.timestamp_index)

    def with_attributes(self, attributes, label: Optional[Label] = None):
        return Instance(attributes, label or self.label, self.timestamp_index)

    def to_line(self) -> str:
        cells = (';'.join(str(i) for i in attribute)
                 for attribute in self.attributes)
        return ','.join([str(self.timestamp_index), str(self.label), *cells])


class Block(object):
    """A consecutive run of instances; the coarse detection unit."""

    def __init__(self,
                 instances: Sequence[Instance],
                 index: int = 0,
                 label: Label = Label.UNKNOWN):
        assert len(instances) > 0
        self.instances = tuple(instances)
        self.index = index
        self.label = label

    def __len__(self):
        return len(self.instances)

    def __iter__(self) -> Iterator[Instance]:
        return iter(self.instances)

    def __getitem__(self, item):
        return self.instances[item]

    def __str__(self):
        return f'Block#{self.index}[{len(self)}] {self.label}'

    @property
    def anomalous_count(self) -> int:
        return sum(1 for instance in self.instances if instance.is_anomalous)

    def with_label(self, label: Label) -> 'Block':
        return Block(self.instances, self.index, label)


class DatasetManifest(object):
    """Statistics of a serialized dataset, stored next to it as key=value."""

    _int_keys = ('dimension', 'attribute_count', 'normal_count',
                 'anomalous_count', 'unknown_count', 'train_count',
                 'test_count', 'seed')

    def __init__(self,
                 dimension: int = 0,
                 attribute_count: int = 0,
                 normal_count: int = 0,
                 anomalous_count: int = 0,
                 unknown_count: int = 0,
                 train_count: int = 0,
                 test_count: int = 0,
                 seed: int = 0,
                 recipe: str = ''):
        self.dimension = dimension
        self.attribute_count = attribute_count
        self.normal_count = normal_count
        self.anomalous_count = anomalous_count
        self.unknown_count = unknown_count
        self.train_count = train_count
        self.test_count = test_count
        self.seed = seed
        self.recipe = recipe

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return vars(self) == vars(other)

    def __str__(self):
        return (f'{self.recipe or "dataset"}: dimension={self.dimension}, '
                f'attributes={self.attribute_count}, '
                f'normal={self.normal_count}, '
                f'anomalous={self.anomalous_count}, '
                f'unknown={self.unknown_count}')

    @property
    def instance_count(self) -> int:
        return self.normal_count + self.anomalous_count + self.unknown_count

    @staticmethod
    def from_instances(instances: Sequence[Instance],
                       dimension: int = 0,
                       **kwargs) -> 'DatasetManifest':
        counts = {label: 0 for label in Label}
        for instance in instances:
            counts[instance.label] += 1
        if not dimension:
            dimension = 1 + max((i.max_id for i in instances), default=-1)
        attribute_count = instances[0].attribute_count if instances else 0
        return DatasetManifest(dimension=dimension,
                               attribute_count=attribute_count,
                               normal_count=counts[Label.NORMAL],
                               anomalous_count=counts[Label.ANOMALOUS],
                               unknown_count=counts[Label.UNKNOWN],
                               **kwargs)

    def check(self, instances: Sequence[Instance], source: str = ''):
        actual = DatasetManifest.from_instances(instances,
                                                dimension=self.dimension)
        for key in ('normal_count', 'anomalous_count', 'unknown_count'):
            if getattr(actual, key) != getattr(self, key):
                raise DataError(f'{source}: manifest {key}='
                                f'{getattr(self, key)} but the data has '
                                f'{getattr(actual, key)}')

    def save(self, path: pathlib.Path) -> pathlib.Path:
        with path.open('w') as file:
            for key in sorted(vars(self).keys()):
                file.write(f'{key}={getattr(self, key)}\n')
        return path

    @staticmethod
    def load(path: pathlib.Path) -> 'DatasetManifest':
        manifest = DatasetManifest()
        try:
            values = Config.parse_lines(path.read_text().splitlines(),
                                        str(path))
        except ConfigError as e:
            raise DataError(str(e)) from None
        for key, value in values.items():
            if key not in vars(manifest):
                raise DataError(f'{path}: unknown manifest key "{key}"')
            if key in DatasetManifest._int_keys:
                try:
                    value = int(value)
                except ValueError:
                    raise DataError(f'{path}: "{key}" is not an integer: '
                                    f'"{value}"') from None
            setattr(manifest, key, value)
        return manifest

    @staticmethod
    def path_for(data_path: pathlib.Path) -> pathlib.Path:
        return data_path.with_suffix('.manifest')


def generate_synthetic(n_periods: int = 220,
                       period: int = 50,
                       noise_frac: float = 0.10,
                       seed: int = 0,
                       restart_period: bool = False) -> List[Instance]:
    """Generates the zigzag categorical stream.

    Instance 0 is (0, 10, 20); each following instance adds 1 to every ID,
    wrapping into [0, 30). Then `noise_frac` of all ID slots, chosen without
    replacement, move by -1 or +1 (wrapping as well).
    With `restart_period`, the zigzag restarts at (0, 10, 20) every `period`.
    """
    count = n_periods * period
    steps = np.arange(count)
    if restart_period:
        steps = steps % period
    ids = (np.asarray(SYNTHETIC_START)[None, :] +
           steps[:, None]) % SYNTHETIC_DIMENSION

    rng = Rng(seed).stream('synthetic')
    slots = ids.size
    noise_count = int(round(noise_frac * slots))
    if noise_count:
        positions = rng.choice(slots, noise_count, replace=False)
        signs = rng.integers(0, 2, size=noise_count) * 2 - 1
        flat = ids.reshape(-1)
        flat[positions] = (flat[positions] + signs) % SYNTHETIC_DIMENSION
    logger.info('Generated %d synthetic instances, %d noisy IDs', count,
                noise_count)
    return [
        Instance(([int(i)] for i in row), Label.NORMAL, t)
        for t, row in enumerate(ids)
    ]


def _redraw(attribute: Sequence[int], rng: Rng, dimension: int,
            min_count: int = 0) -> List[int]:
    count = max(len(attribute), min_count)
    return [int(i) for i in rng.integers(0, dimension, size=count)]


def inject_anomalies(test: Sequence[Instance],
                     train_pool: Sequence[Instance],
                     mode: Union[str, Sequence[str]],
                     count: int,
                     seed: int = 0,
                     dimension: int = SYNTHETIC_DIMENSION) -> List[Instance]:
    """Replaces `count` uniformly chosen test instances with anomalies.

    When `mode` is a list, each replaced position draws its mode uniformly."""
    modes = (mode, ) if isinstance(mode, str) else tuple(mode)
    for name in modes:
        if name not in ANOMALY_MODES:
            raise ConfigError(f'Unknown anomaly mode "{name}"')
    if not 0 <= count <= len(test):
        raise ConfigError(f'Cannot inject {count} anomalies into '
                          f'{len(test)} instances')
    if 'copy_train' in modes and not train_pool:
        raise ConfigError('"copy_train" anomalies need a training pool')
    result = list(test)
    if count == 0:
        return result

    rng = Rng(seed).stream('inject')
    positions = np.sort(rng.choice(len(test), count, replace=False))
    for position in positions:
        original = result[position]
        name = modes[rng.integers(0, len(modes))] if len(modes) > 1 else modes[0]
        if name == 'random_ids':
            attributes = [
                _redraw(attribute, rng, dimension)
                for attribute in original.attributes
            ]
        elif name == 'copy_train':
            source = train_pool[rng.integers(0, len(train_pool))]
            attributes = source.attributes
        else:
            target = rng.integers(0, original.attribute_count)
            attributes = list(original.attributes)
            if name == 'delete_attribute':
                attributes[target] = []
            else:
                attributes[target] = _redraw(attributes[target],
                                             rng,
                                             dimension,
                                             min_count=1)
        result[position] = original.with_attributes(attributes,
                                                    Label.ANOMALOUS)
    logger.info('Injected %d anomalies (%s)', count, ','.join(modes))
    return result


class CsvSchema(object):
    """Maps columns of a categorical CSV file to attributes.

    Columns are header names or zero-based indices. With `symbolic`, every
    distinct (attribute, token) pair gets its own ID in first-seen order;
    otherwise tokens must be integer IDs."""

    def __init__(self,
                 attributes: Sequence[Tuple[str, Union[int, str]]],
                 label_column: Optional[Union[int, str]] = None,
                 timestamp_column: Optional[Union[int, str]] = None,
                 header: bool = False,
                 delimiter: str = ',',
                 list_delimiter: str = ';',
                 dimension: int = 0,
                 symbolic: bool = False,
                 normal_values: Iterable[str] = (),
                 anomalous_values: Iterable[str] = ()):
        assert len(attributes) > 0
        self.attributes = tuple(attributes)
        self.label_column = label_column
        self.timestamp_column = timestamp_column
        self.header = header
        self.delimiter = delimiter
        self.list_delimiter = list_delimiter
        self.dimension = dimension
        self.symbolic = symbolic
        self.normal_values = set(normal_values)
        self.anomalous_values = set(anomalous_values)

    @staticmethod
    def _column(text: str) -> Union[int, str]:
        text = text.strip()
        try:
            return int(text)
        except ValueError:
            return text

    @staticmethod
    def parse_attributes(text: str) -> List[Tuple[str, Union[int, str]]]:
        """Parses "name=column,name=column"; a bare column names itself."""
        attributes = []
        for item in text.split(','):
            item = item.strip()
            if not item:
                continue
            name, _, column = item.partition('=')
            if not column:
                column = name
            attributes.append((name.strip(), CsvSchema._column(column)))
        return attributes

    @staticmethod
    def for_dataset(attribute_count: int, dimension: int = 0) -> 'CsvSchema':
        """The schema of the serialized dataset format."""
        return CsvSchema([(f'a{i}', i + 2) for i in range(attribute_count)],
                         label_column=1,
                         timestamp_column=0,
                         dimension=dimension)

    def to_label(self, value: str, source: str) -> Label:
        if value in self.normal_values:
            return Label.NORMAL
        if value in self.anomalous_values:
            return Label.ANOMALOUS
        try:
            return Label.parse(value)
        except ValueError:
            raise DataError(f'{source}: unknown label "{value}"') from None


def _read_frame(path: pathlib.Path, schema: CsvSchema) -> pd.DataFrame:
    """Rows map one to one to the lines after the header, blank lines
    included."""
    if not path.is_file():
        raise DataError(f'Data file not found: "{path}"')
    try:
        return pd.read_csv(path,
                           sep=schema.delimiter,
                           header=0 if schema.header else None,
                           dtype=str,
                           keep_default_na=False,
                           skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except pd.errors.ParserError as e:
        raise DataError(f'{path}: {e}') from None


def load_categorical_csv(
        path: Union[pathlib.Path, str],
        schema: CsvSchema,
        list_delimiter: Optional[str] = None
) -> Tuple[List[Instance], DatasetManifest]:
    """Loads instances in file order and computes their manifest."""
    path = pathlib.Path(path)
    if list_delimiter is None:
        list_delimiter = schema.list_delimiter
    logger.info('Reading data file: "%s"', path)
    frame = _read_frame(path, schema)
    first_line = 2 if schema.header else 1
    lines = path.read_text().splitlines()[first_line - 1:]

    def column_index(column) -> int:
        if isinstance(column, int):
            if column >= len(frame.columns):
                raise DataError(f'{path}: column {column} does not exist')
            return column
        if column not in frame.columns:
            raise DataError(f'{path}: column "{column}" does not exist')
        return list(frame.columns).index(column)

    instances = []
    if len(frame) == 0 or not any(line.strip() for line in lines):
        return instances, DatasetManifest(
            dimension=schema.dimension,
            attribute_count=len(schema.attributes))
    attribute_indices = [column_index(c) for _, c in schema.attributes]
    label_index = (None if schema.label_column is None else column_index(
        schema.label_column))
    timestamp_index = (None if schema.timestamp_column is None else
                       column_index(schema.timestamp_column))
    vocabulary = {}  # type: Dict[Tuple[int, str], int]
    empty_cells = 0
    for row_number, row in enumerate(frame.itertuples(index=False,
                                                      name=None)):
        source = f'{path}:{row_number + first_line}'
        line = lines[row_number] if row_number < len(lines) else ''
        if not line.strip():
            continue
        # Short lines are padded by the reader.
        fields = len(line.split(schema.delimiter))
        if fields < len(row):
            raise DataError(
                f'{source}: expected {len(row)} fields, got {fields}')
        attributes = []
        for attribute_number, index in enumerate(attribute_indices):
            cell = row[index].strip()
            tokens = [t.strip() for t in cell.split(list_delimiter)
                      ] if cell else []
            if any(not t for t in tokens):
                raise DataError(f'{source}: cannot parse cell "{cell}"')
            if not tokens:
                empty_cells += 1
            if schema.symbolic:
                ids = [
                    vocabulary.setdefault((attribute_number, t),
                                          len(vocabulary)) for t in tokens
                ]
            else:
                try:
                    ids = [int(t) for t in tokens]
                except ValueError:
                    raise DataError(
                        f'{source}: cannot parse cell "{cell}"') from None
                if any(i < 0 for i in ids):
                    raise DataError(f'{source}: negative ID in "{cell}"')
            if schema.dimension and any(i >= schema.dimension for i in ids):
                raise DataError(f'{source}: ID in "{cell}" exceeds the '
                                f'dimension {schema.dimension}')
            attributes.append(ids)
        label = (Label.UNKNOWN if label_index is None else schema.to_label(
            row[label_index].strip(), source))
        if timestamp_index is None:
            timestamp = len(instances)
        else:
            try:
                timestamp = int(row[timestamp_index])
            except ValueError:
                raise DataError(f'{source}: cannot parse timestamp '
                                f'"{row[timestamp_index]}"') from None
        instances.append(Instance(attributes, label, timestamp))
    if empty_cells:
        logger.warning('%s: %d empty attribute cells', path, empty_cells)
    manifest = DatasetManifest.from_instances(instances,
                                              dimension=schema.dimension)
    logger.info('%s', manifest)
    return instances, manifest


def save_dataset(instances: Sequence[Instance],
                 path: Union[pathlib.Path, str],
                 manifest: Optional[DatasetManifest] = None) -> pathlib.Path:
    """Writes one instance per line: timestamp, label, then attribute cells.

    IDs within a cell are separated by ';'. The manifest is written next to
    the data file."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='\n') as file:
        for instance in instances:
            file.write(instance.to_line() + '\n')
    if manifest is None:
        manifest = DatasetManifest.from_instances(instances)
    manifest.save(DatasetManifest.path_for(path))
    logger.info('Saved %d instances to "%s"', len(instances), path)
    return path


def load_dataset(
    path: Union[pathlib.Path, str]
) -> Tuple[List[Instance], DatasetManifest]:
    path = pathlib.Path(path)
    manifest_path = DatasetManifest.path_for(path)
    if not manifest_path.is_file():
        raise DataError(f'Manifest not found: "{manifest_path}"')
    manifest = DatasetManifest.load(manifest_path)
    schema = CsvSchema.for_dataset(manifest.attribute_count,
                                   dimension=manifest.dimension)
    instances, _ = load_categorical_csv(path, schema)
    manifest.check(instances, str(path))
    return instances, manifest


def _check_train_count(instances: Sequence[Instance], train_count: int):
    if not 0 < train_count < len(instances):
        raise ConfigError(f'train_count must be in (0, {len(instances)}), '
                          f'got {train_count}')


def split_sequential(
        instances: Sequence[Instance],
        train_count: int) -> Tuple[List[Instance], List[Instance]]:
    _check_train_count(instances, train_count)
    return list(instances[:train_count]), list(instances[train_count:])


def split_random(instances: Sequence[Instance],
                 train_count: int,
                 seed: int = 0) -> Tuple[List[Instance], List[Instance]]:
    """Splits by a uniform permutation. Both parts keep the input order."""
    _check_train_count(instances, train_count)
    permutation = Rng(seed).stream('split').permutation(len(instances))
    train_indices = np.sort(permutation[:train_count])
    test_indices = np.sort(permutation[train_count:])
    return ([instances[i] for i in train_indices],
            [instances[i] for i in test_indices])


def label_block(block: Block) -> Block:
    """A block is anomalous iff strictly more than half its instances are."""
    if any(instance.label == Label.UNKNOWN for instance in block):
        return block.with_label(Label.UNKNOWN)
    if 2 * block.anomalous_count > len(block):
        return block.with_label(Label.ANOMALOUS)
    return block.with_label(Label.NORMAL)


def label_blocks(blocks: Iterable[Block]) -> List[Block]:
    return [label_block(block) for block in blocks]


def blockify(instances: Sequence[Instance], block_size: int) -> List[Block]:
    """Consecutive non-overlapping blocks; a final partial block is kept."""
    if block_size < 1:
        raise ConfigError(f'block_size must be positive, got {block_size}')
    return [
        Block(instances[start:start + block_size], index)
        for index, start in enumerate(range(0, len(instances), block_size))
    ]


def prepare_protocol(
    instances: Sequence[Instance], config: Config
) -> Tuple[List[Instance], List[Instance], DatasetManifest]:
    """Splits normal data and mixes anomalies into the test part."""
    if config.split == 'random':
        train, test = split_random(instances, config.train_count, config.seed)
    else:
        train, test = split_sequential(instances, config.train_count)
    dimension = config.dimension or DatasetManifest.from_instances(
        instances).dimension
    test = inject_anomalies(test,
                            train,
                            config.anomaly_modes,
                            config.anomaly_count,
                            seed=config.seed,
                            dimension=dimension)
    manifest = DatasetManifest.from_instances(train + test,
                                              dimension=dimension,
                                              train_count=len(train),
                                              test_count=len(test),
                                              seed=config.seed)
    return train, test, manifest


class DataGenerator(object):

    def __init__(self, config: Config = Config.default):
        self.config = config

    def generate(self) -> List[Instance]:
        config = self.config
        return generate_synthetic(config.periods,
                                  config.period,
                                  config.noise_frac,
                                  seed=config.seed,
                                  restart_period=config.restart_period)

    def save(self, output: pathlib.Path) -> Dict[str, pathlib.Path]:
        """Writes the synthetic stream and its train/test protocol files."""
        config = self.config
        output.mkdir(parents=True, exist_ok=True)
        instances = self.generate()
        config = config.with_values(dimension=config.dimension
                                    or SYNTHETIC_DIMENSION)
        train, test, manifest = prepare_protocol(instances, config)
        manifest.recipe = 'synthetic'
        paths = {}
        for name, part in (('train', train), ('test', test)):
            part_manifest = DatasetManifest.from_instances(
                part,
                dimension=manifest.dimension,
                seed=config.seed,
                recipe='synthetic')
            paths[name] = save_dataset(part, output / f'{name}.csv',
                                       part_manifest)
        paths['manifest'] = manifest.save(output / 'synthetic.manifest')
        config.save(output)
        print(f'{len(instances)} instances: {manifest}, '
              f'train={manifest.train_count}, test={manifest.test_count}')
        return paths

    @staticmethod
    def main(argv: Optional[List[str]] = None):
        parser = argparse.ArgumentParser(prog='gen-data')
        parser.add_argument('recipe', choices=['synthetic'])
        parser.add_argument('-c', '--config', help='config file')
        parser.add_argument('-o',
                            '--output',
                            '--out',
                            type=pathlib.Path,
                            help='output directory')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--periods', type=int)
        parser.add_argument('--period', type=int)
        parser.add_argument('--noise-frac', type=float)
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
        config = config_from_args(args)
        if config.train_count >= config.periods * config.period:
            # Small custom runs keep the default 9:2 proportion.
            train_count = config.periods * config.period * 9 // 11
            config = config.with_values(
                train_count=train_count,
                anomaly_count=min(config.anomaly_count,
                                  (config.periods * config.period -
                                   train_count) // 2))
        DataGenerator(config).save(pathlib.Path(config.output))


def config_from_args(args, base: Optional[Config] = None) -> Config:
    """Merges a config file, `--set` overrides and dedicated flags."""
    if getattr(args, 'config', None):
        config = Config.load(args.config, base=base)
    else:
        config = (base or Config.default).clone()
    for item in args.set:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(f'Expected "key=value", got "{item}"')
        config.set(key, value)
    for key, value in vars(args).items():
        if key in ('config', 'set', 'verbose', 'debug') or value is None:
            continue
        if key in vars(config):
            if isinstance(value, pathlib.Path):
                value = str(value)
            if isinstance(value, bool) and not value:
                continue
            config.set(key, value)
    return config.validate()


if __name__ == '__main__':
    DataGenerator.main()
