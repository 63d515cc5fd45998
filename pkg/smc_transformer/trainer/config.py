# trainer/config.py
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

from django.conf import settings

from attention.params import NOISE_TARGETS
from numkit.exceptions import ConfigError

MODEL_TYPES = ('smc', 'deterministic')
LR_SCHEDULES = ('constant', 'warmup')


def parse_targets(value):
    """'q,k,v,z,obs' (or an iterable) -> tuple of noise sources"""
    if isinstance(value, str):
        value = [part.strip() for part in value.split(',') if part.strip()]
    return tuple(value)


@dataclass(frozen=True)
class TrainConfig:
    """
    Everything `fit` needs besides the data.

    Defaults come from settings.SMC_TRANSFORMER through `from_settings`.
    """
    seed: int
    particles: int = 10
    lag: int = 24
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.001
    lr_schedule: str = 'constant'
    warmup_steps: int = 4000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_epsilon: float = 1e-9
    em_exponent: float = 0.6
    em_targets: tuple = ('q', 'k', 'v', 'z', 'obs')
    variance_floor: float = 1e-6
    initial_variance: float = 0.5
    patience: Optional[int] = None
    depth: int = 32
    ff_units: int = 32
    model_type: str = 'smc'
    threads: int = 1

    @classmethod
    def from_settings(cls, seed, **overrides):
        defaults = getattr(settings, 'SMC_TRANSFORMER', {})
        names = {item.name for item in fields(cls)}
        values = {key: value for key, value in defaults.items() if key in names}
        values.update({key: value for key, value in overrides.items() if value is not None})
        values['em_targets'] = parse_targets(values.get('em_targets', cls.em_targets))
        return cls(seed=seed, **values).validate()

    def validate(self):
        if self.seed is None:
            raise ConfigError('A seed is required')
        checks = [
            (self.particles >= 1, 'particles must be at least 1'),
            (self.lag >= 1, 'lag must be at least 1'),
            (self.epochs >= 0, 'epochs must be non-negative'),
            (self.batch_size >= 1, 'batch_size must be at least 1'),
            (self.learning_rate > 0, 'learning_rate must be positive'),
            (self.lr_schedule in LR_SCHEDULES, f'lr_schedule must be one of {LR_SCHEDULES}'),
            (self.warmup_steps >= 1, 'warmup_steps must be at least 1'),
            (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, 'Adam betas must lie in [0, 1)'),
            (self.adam_epsilon > 0, 'adam_epsilon must be positive'),
            (self.em_exponent > 0.5, 'em_exponent must exceed 0.5'),
            (set(self.em_targets) <= set(NOISE_TARGETS), f'em_targets must be drawn from {sorted(NOISE_TARGETS)}'),
            (self.variance_floor > 0, 'variance_floor must be positive'),
            (self.initial_variance >= self.variance_floor, 'initial_variance must be at least the variance floor'),
            (self.patience is None or self.patience >= 1, 'patience must be at least 1'),
            (self.depth >= 1 and self.ff_units >= 1, 'depth and ff_units must be at least 1'),
            (self.model_type in MODEL_TYPES, f'model_type must be one of {MODEL_TYPES}'),
            (self.threads >= 1, 'threads must be at least 1'),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def updated(self, **changes):
        return replace(self, **changes).validate()

    def as_dict(self):
        values = asdict(self)
        values['em_targets'] = ','.join(self.em_targets)
        return values
