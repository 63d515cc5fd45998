# dataio/synthetic.py
"""
Synthetic autoregressive generators with known conditional means.

Model I:  X_{t+1} = α X_t + σ ε_{t+1}
Model II: X_{t+1} = α U_{t+1} X_t + β (1 - U_{t+1}) X_t + σ ε_{t+1},  U ~ Bernoulli(p)

Both start from X_0 ~ N(0, 1) and emit X_1..X_T. Model II draws ε from the
same stream as Model I and U from its own stream, so p = 1 reproduces Model I
draw for draw.
"""
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from attention.simulate import sample_sequences
from numkit.exceptions import DomainError
from numkit.rng import SeededRng

from .datasets import SeriesDataset

MODEL_DEFAULTS = {
    'I': {'alpha': 0.8, 'beta': None, 'sigma2': 0.5, 'p': 1.0},
    'II': {'alpha': 0.9, 'beta': 0.54, 'sigma2': 0.3, 'p': 0.7},
}


@dataclass(frozen=True)
class SyntheticSpec:
    model_id: str = 'I'
    alpha: float = 0.8
    beta: Optional[float] = None
    sigma2: float = 0.5
    p: float = 1.0
    n_series: int = 1000
    length: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.model_id not in MODEL_DEFAULTS:
            raise DomainError(f'Unknown synthetic model {self.model_id!r}; expected one of {sorted(MODEL_DEFAULTS)}')
        if not self.sigma2 > 0:
            raise DomainError(f'sigma2 must be positive, got {self.sigma2}')
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f'p must lie in [0, 1], got {self.p}')
        if self.length < 2:
            raise DomainError('Synthetic sequences need at least two observations')
        if self.n_series < 1:
            raise DomainError('n_series must be at least 1')
        if self.model_id == 'II' and self.beta is None:
            raise DomainError('Model II needs beta')

    @classmethod
    def for_model(cls, model_id, **overrides):
        """Spec with the published defaults of a model, then explicit overrides (None values ignored)"""
        if model_id not in MODEL_DEFAULTS:
            raise DomainError(f'Unknown synthetic model {model_id!r}')
        values = dict(MODEL_DEFAULTS[model_id])
        if model_id == 'II' and overrides.get('alpha') is not None and overrides.get('beta') is None:
            values['beta'] = 0.6 * overrides['alpha']
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(model_id=model_id, **values)

    @property
    def sigma(self):
        return math.sqrt(self.sigma2)

    def modes(self):
        """(coefficients, probabilities) of the one-step conditional mean c·X_t"""
        if self.model_id == 'I':
            return (self.alpha,), (1.0,)
        return (self.alpha, self.beta), (self.p, 1.0 - self.p)

    def conditional_means(self, previous):
        """
        Conditional means of X_{t+1} given X_t for every mode.

        Returns:
            (means with a leading mode axis, mode probabilities)
        """
        coefficients, probabilities = self.modes()
        previous = np.asarray(previous, dtype=np.float64)
        return np.stack([c * previous for c in coefficients]), np.asarray(probabilities)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


def _simulate(spec, coefficients):
    rng = SeededRng(spec.seed)
    x = rng.child('x0').normal(spec.n_series)
    eps = rng.child('eps').normal((spec.n_series, spec.length))
    path = np.empty((spec.n_series, spec.length))
    for t in range(spec.length):
        x = coefficients[:, t] * x + spec.sigma * eps[:, t]
        path[:, t] = x
    return SeriesDataset(
        observations=path[:, :, None],
        series_ids=tuple(f's{index:05d}' for index in range(spec.n_series)),
        feature_names=('f0',),
        synthetic=spec,
        source=f'model {spec.model_id}',
    )


def gen_model_I(spec):
    if spec.model_id != 'I':
        raise DomainError(f'gen_model_I got a Model {spec.model_id} spec')
    return _simulate(spec, np.full((spec.n_series, spec.length), spec.alpha))


def gen_model_II(spec):
    if spec.model_id != 'II':
        raise DomainError(f'gen_model_II got a Model {spec.model_id} spec')
    regime = SeededRng(spec.seed).child('regime').bernoulli(spec.p, (spec.n_series, spec.length))
    return _simulate(spec, spec.alpha * regime + spec.beta * (1.0 - regime))


GENERATORS = {
    'I': gen_model_I,
    'II': gen_model_II,
}


def generate(spec):
    return GENERATORS[spec.model_id](spec)


def gen_from_model(params, n_series, length, lag, seed):
    """Sequences drawn from the attention model itself (raw scale, no synthetic ground truth)"""
    observations = sample_sequences(params, n_series, length, lag, SeededRng(seed).child('model'))
    return SeriesDataset(
        observations=observations,
        series_ids=tuple(f'm{index:05d}' for index in range(n_series)),
        feature_names=tuple(f'f{index}' for index in range(params.d_obs)),
        source='attention model',
    )
