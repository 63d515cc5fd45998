# runs/config.py
"""
Run configuration: command-line flags > config file > settings.SMC_TRANSFORMER.

Config files are either a JSON object or flat `key = value` text:

    # Model I, ten particles
    particles = 10
    lag = 24
    em_targets = q,k,v,z,obs

Keys use the flag names with underscores (`batch_size`, `n_samples`, ...).
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings

from numkit.exceptions import ConfigError
from trainer.config import TrainConfig

# Checkpointed values that describe the machine, not the model
RUNTIME_KEYS = {'seed', 'threads'}
CONFIG_LITERALS = {'true': True, 'false': False, 'none': None, 'null': None}


def _coerce(text):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in '"\'':
        return text[1:-1]
    lowered = text.lower()
    if lowered in CONFIG_LITERALS:
        return CONFIG_LITERALS[lowered]
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_key_values(text, source='config'):
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'{source}, line {number}: expected key = value, got {line!r}')
        key, value = line.split('=', 1)
        key = key.strip().replace('-', '_')
        if not key:
            raise ConfigError(f'{source}, line {number}: missing key')
        values[key] = _coerce(value)
    return values


def load_config_file(path):
    """Read a JSON object or key = value text into a flat dict"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'Config file {path} does not exist')
    text = path.read_text(encoding='utf-8')
    if text.lstrip().startswith('{'):
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f'{path} is not valid JSON: {exc}') from exc
        if not isinstance(values, dict) or any(isinstance(value, dict) for value in values.values()):
            raise ConfigError(f'{path} must hold a flat JSON object')
        return {key.replace('-', '_'): value for key, value in values.items()}
    return parse_key_values(text, source=str(path))


def parse_ratios(value):
    """'0.8,0.1,0.1' (or a sequence) -> tuple of three floats"""
    if isinstance(value, str):
        value = [part for part in value.split(',') if part.strip()]
    try:
        ratios = tuple(float(part) for part in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'Split ratios must be three numbers, got {value!r}') from exc
    if len(ratios) != 3:
        raise ConfigError(f'Split ratios must be three numbers, got {value!r}')
    return ratios


@dataclass(frozen=True)
class RunConfig:
    """
    Fully resolved options of one CLI invocation.

    `values` holds every setting the command reads; it is what manifest.json records.
    """
    command: str
    seed: int
    values: dict = field(default_factory=dict)
    explicit: frozenset = frozenset()

    def get(self, key, default=None):
        value = self.values.get(key)
        return default if value is None else value

    def train_config(self, base=None, **overrides):
        """
        TrainConfig from the resolved values.

        `base` (the config stored in a checkpoint) replaces the settings
        defaults but not values given by flag or config file.
        """
        values = dict(self.values)
        if base:
            values.update({key: value for key, value in base.items() if key not in RUNTIME_KEYS and key not in self.explicit})
        values.update({key: value for key, value in overrides.items() if value is not None})
        known = TrainConfig.__dataclass_fields__
        return TrainConfig.from_settings(self.seed, **{key: value for key, value in values.items() if key in known})

    def as_dict(self):
        return {'command': self.command, 'seed': self.seed, **self.values}


def resolve_config(command, flags, allowed, config_path=None):
    """
    Merge settings defaults, the config file and the flags (None flags are unset).

    Args:
        command: subcommand name
        flags: parsed command-line options
        allowed: keys the command understands; config files may not name others

    Raises:
        ConfigError: unknown config keys, missing seed
    """
    values = dict(getattr(settings, 'SMC_TRANSFORMER', {}))
    explicit = set()
    if config_path:
        from_file = load_config_file(config_path)
        unknown = sorted(set(from_file) - set(allowed))
        if unknown:
            raise ConfigError(f'Unknown keys in {config_path}: {unknown}')
        values.update({key: value for key, value in from_file.items() if value is not None})
        explicit.update(key for key, value in from_file.items() if value is not None)
    values.update({key: value for key, value in flags.items() if key in allowed and value is not None})
    explicit.update(key for key, value in flags.items() if key in allowed and value is not None)
    seed = values.pop('seed', None)
    if seed is None:
        raise ConfigError('A seed is required (--seed or `seed` in the config file)')
    try:
        seed = int(seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'Seed must be an integer, got {seed!r}') from exc
    if 'split_ratios' in values and values['split_ratios'] is not None:
        values['split_ratios'] = list(parse_ratios(values['split_ratios']))
    return RunConfig(command=command, seed=seed, values=values, explicit=frozenset(explicit - {'seed'}))
