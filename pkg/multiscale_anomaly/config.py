import copy
import logging
import pathlib
from typing import Any
from typing import Dict
from typing import Iterable
from typing import Optional
from typing import Tuple
from typing import Union

logger = logging.getLogger('config')


class ConfigError(Exception):
    pass


ANOMALY_MODES = ('random_ids', 'copy_train', 'delete_attribute',
                 'replace_attribute')
RNN_CELLS = ('tanh', 'gru')
SPLITS = ('sequential', 'random')
DISC_TERMS = ('both', 'real')
DECODER_OUTPUTS = ('linear', 'leaky_relu')
NORM_MODES = ('running', 'block')
GENERATOR_LOSS_NAMES = ('relative_entropy', 'cross_entropy')


class Config(object):

    def __init__(self):
        # Stream and optimization.
        self.block_size = 100
        self.learning_rate = 0.01
        self.beta = 0.3
        self.gamma = 0.05
        self.gen_steps_per_block = 3
        self.disc_steps_per_block = 1
        self.epochs = 1
        self.seed = 0
        self.rms_decay = 0.9
        self.rms_epsilon = 1e-8
        # Clip gradients by value before the RMSProp update. 0 disables.
        self.grad_clip = 0.0

        # Model widths. `hidden` is the block RNN state size.
        self.embed_dim = 16
        self.hidden = 32
        self.attention_dim = 16
        # Encoder width of the instance autoencoder.
        # 0 means half the instance-vector width.
        self.encoder_dim = 0
        self.rnn_cell = 'tanh'
        self.leaky_slope = 0.01
        self.norm_epsilon = 1e-5
        # Weight of the old value when training updates the running
        # normalization statistics once per block.
        self.norm_momentum = 0.9
        self.init_scale = 0.05
        # Output layer of the instance decoder. "leaky_relu" bounds the
        # zero-noise output below by a small negative slope.
        self.decoder_output = 'linear'
        # Real-vs-resembled loss of the generator, also the reconstruction
        # term of the scores. "cross_entropy" includes the entropy of the
        # real vector.
        self.generator_loss = 'relative_entropy'
        # Weight of the optional term where the generator tries to fool the
        # discriminators. 0 keeps the generator loss reconstruction-only.
        self.adversarial_weight = 0.0

        # Ablations.
        self.no_noise = False
        self.no_relrep = False
        self.no_blockloss = False

        # Scoring. `score_noise_samples` > 0 averages that many noisy draws
        # instead of scoring with zero noise.
        self.score_noise_samples = 0
        self.score_disc_terms = 'both'
        # "running" normalizes scored instances with the statistics kept by
        # training, "block" with those of the scored block.
        self.score_norm = 'running'
        self.sweep_sizes = (1, 10, 50, 100, 200)

        # Data. `dimension` and `attribute_count` of 0 are taken from the
        # dataset manifest.
        self.dimension = 0
        self.attribute_count = 0
        self.periods = 220
        self.period = 50
        self.noise_frac = 0.10
        self.restart_period = False
        self.train_count = 9000
        self.anomaly_count = 1000
        self.anomaly_modes = ('random_ids', 'copy_train')
        self.split = 'sequential'

        # Paths.
        self.train_data = ''
        self.test_data = ''
        self.output = 'build'
        self.checkpoint = ''

    default = None  # This will be set later in this file.

    # Keys that determine parameter shapes or how the parameters are
    # applied. A checkpoint only loads onto a config that agrees on all of
    # them.
    model_keys = ('dimension', 'attribute_count', 'embed_dim', 'hidden',
                  'attention_dim', 'encoder_dim', 'rnn_cell', 'decoder_output',
                  'no_relrep')

    def __eq__(self, other):
        if not isinstance(other, Config):
            return NotImplemented
        return vars(self) == vars(other)

    def keys(self) -> Iterable[str]:
        return sorted(vars(self).keys())

    def items(self) -> Iterable[Tuple[str, Any]]:
        return ((key, getattr(self, key)) for key in self.keys())

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.items())

    def clone(self):
        return copy.deepcopy(self)

    @property
    def instance_dim(self) -> int:
        """Width of an instance vector."""
        if self.no_relrep:
            return self.embed_dim
        return 2 * self.embed_dim

    @property
    def encoder_width(self) -> int:
        if self.encoder_dim:
            return self.encoder_dim
        return max(1, self.instance_dim // 2)

    @staticmethod
    def _normalize_key(key: str) -> str:
        return key.strip().replace('-', '_')

    @staticmethod
    def _coerce(key: str, default: Any, value: Any) -> Any:
        if not isinstance(value, str):
            if isinstance(default, tuple) and isinstance(value, (list, tuple)):
                return tuple(value)
            if isinstance(default, float) and isinstance(value, int):
                return float(value)
            if isinstance(default, bool) != isinstance(value, bool):
                raise ConfigError(f'"{key}" expects {type(default).__name__}'
                                  f', got {value!r}')
            return value
        text = value.strip()
        try:
            if isinstance(default, bool):
                lower = text.lower()
                if lower in ('1', 'true', 'yes', 'on'):
                    return True
                if lower in ('0', 'false', 'no', 'off'):
                    return False
                raise ValueError(text)
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
            if isinstance(default, tuple):
                items = tuple(item.strip() for item in text.split(',')
                              if item.strip())
                if default and isinstance(default[0], int):
                    return tuple(int(item) for item in items)
                return items
        except ValueError:
            raise ConfigError(f'"{key}" expects {type(default).__name__}, '
                              f'got "{text}"') from None
        return text

    def set(self, key: str, value: Any) -> None:
        key = self._normalize_key(key)
        if key not in vars(self):
            raise ConfigError(f'Unknown config key "{key}"')
        default = getattr(Config.default, key, getattr(self, key))
        setattr(self, key, self._coerce(key, default, value))

    def update(self, values: Union[Dict[str, Any], Iterable[Tuple[str,
                                                                    Any]]]):
        items = values.items() if isinstance(values, dict) else values
        for key, value in items:
            self.set(key, value)
        return self

    def with_values(self, **kwargs):
        """Returns a copy with the specified values, or `self` if unchanged."""
        if all(getattr(self, self._normalize_key(key), None) == value
               for key, value in kwargs.items()):
            return self
        clone = self.clone()
        clone.update(kwargs)
        return clone

    def with_ablation(self,
                      no_noise: bool = False,
                      no_relrep: bool = False,
                      no_blockloss: bool = False):
        return self.with_values(no_noise=no_noise,
                                no_relrep=no_relrep,
                                no_blockloss=no_blockloss)

    def with_seed(self, seed: int):
        return self.with_values(seed=seed)

    def for_smoke_testing(self):
        """Returns a copy with small sizes, for quick runs and tests."""
        clone = self.clone()
        clone.embed_dim = 4
        clone.hidden = 8
        clone.attention_dim = 4
        clone.block_size = 10
        clone.periods = 4
        clone.period = 50
        clone.train_count = 150
        clone.anomaly_count = 25
        clone.sweep_sizes = (1, 10)
        return clone

    @staticmethod
    def parse_lines(lines: Iterable[str],
                    source: str = '<config>') -> Dict[str, str]:
        values = {}
        for line_number, line in enumerate(lines, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(
                    f'{source}:{line_number}: expected "key=value"')
            key, value = line.split('=', 1)
            values[Config._normalize_key(key)] = value.strip()
        return values

    @staticmethod
    def load(path: Union[pathlib.Path, str], base: Optional['Config'] = None):
        path = pathlib.Path(path)
        logger.info('Reading config: "%s"', path)
        if not path.is_file():
            raise ConfigError(f'Config file not found: "{path}"')
        config = (base or Config.default).clone()
        with path.open() as file:
            config.update(Config.parse_lines(file, str(path)))
        return config

    def format_lines(self) -> Iterable[str]:
        for key, value in self.items():
            if isinstance(value, tuple):
                value = ','.join(str(item) for item in value)
            elif isinstance(value, float):
                value = repr(value)
            yield f'{key}={value}'

    def save(self, path: Union[pathlib.Path, str]) -> pathlib.Path:
        path = pathlib.Path(path)
        if path.is_dir():
            path = path / 'config.txt'
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w') as file:
            for line in self.format_lines():
                file.write(line + '\n')
        logger.info('Saved config to "%s"', path)
        return path

    def validate(self):
        positives = ('block_size', 'embed_dim', 'hidden', 'attention_dim',
                     'epochs', 'periods', 'period')
        for key in positives:
            if getattr(self, key) < 1:
                raise ConfigError(f'"{key}" must be positive, '
                                  f'got {getattr(self, key)}')
        non_negatives = ('beta', 'gamma', 'gen_steps_per_block',
                         'disc_steps_per_block', 'encoder_dim',
                         'score_noise_samples', 'grad_clip',
                         'adversarial_weight', 'anomaly_count', 'seed',
                         'dimension', 'attribute_count')
        for key in non_negatives:
            if getattr(self, key) < 0:
                raise ConfigError(f'"{key}" must be non-negative, '
                                  f'got {getattr(self, key)}')
        if self.learning_rate <= 0:
            raise ConfigError('"learning_rate" must be positive')
        if not 0 < self.rms_decay < 1:
            raise ConfigError('"rms_decay" must be in (0, 1)')
        if self.rms_epsilon <= 0 or self.norm_epsilon < 0:
            raise ConfigError('epsilons must be positive')
        if not 0 <= self.norm_momentum < 1:
            raise ConfigError('"norm_momentum" must be in [0, 1)')
        if self.generator_loss not in GENERATOR_LOSS_NAMES:
            raise ConfigError(f'"generator_loss" must be one of '
                              f'{GENERATOR_LOSS_NAMES}')
        if self.score_norm not in NORM_MODES:
            raise ConfigError(f'"score_norm" must be one of {NORM_MODES}')
        if not 0 <= self.noise_frac <= 1:
            raise ConfigError('"noise_frac" must be in [0, 1]')
        if self.rnn_cell not in RNN_CELLS:
            raise ConfigError(f'"rnn_cell" must be one of {RNN_CELLS}')
        if self.decoder_output not in DECODER_OUTPUTS:
            raise ConfigError(f'"decoder_output" must be one of '
                              f'{DECODER_OUTPUTS}')
        if self.split not in SPLITS:
            raise ConfigError(f'"split" must be one of {SPLITS}')
        if self.score_disc_terms not in DISC_TERMS:
            raise ConfigError(f'"score_disc_terms" must be one of '
                              f'{DISC_TERMS}')
        for mode in self.anomaly_modes:
            if mode not in ANOMALY_MODES:
                raise ConfigError(f'Unknown anomaly mode "{mode}"')
        if any(size < 1 for size in self.sweep_sizes):
            raise ConfigError('"sweep_sizes" must be positive')
        return self

    def check_model_compatible(self, other: 'Config'):
        """Raises `ConfigError` if `other` defines different shapes."""
        diffs = [
            f'{key}={getattr(self, key)!r} vs {getattr(other, key)!r}'
            for key in self.model_keys
            if getattr(self, key) != getattr(other, key)
        ]
        if diffs:
            raise ConfigError('Config does not match the checkpoint: ' +
                              ', '.join(diffs))

    def __str__(self):
        flags = [
            name for name in ('no_noise', 'no_relrep', 'no_blockloss')
            if getattr(self, name)
        ]
        flags = f' {",".join(flags)}' if flags else ''
        return (f'block={self.block_size} lr={self.learning_rate} '
                f'beta={self.beta} gamma={self.gamma} seed={self.seed}'
                f'{flags}')


Config.default = Config()
