# attention/params.py
"""
Learnable parameters of the stochastic attention cell.

Weights (projection matrices and the observation head) are trained by
gradient descent; the five noise variances are only ever changed by EM.
"""
import math
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from numkit.exceptions import DomainError

def _shape(item):
    return np.shape(getattr(item, 'value', item))


NOISE_FIELDS = ('var_q', 'var_k', 'var_v', 'var_z', 'var_obs')

# Short names used by config files and the training log
NOISE_TARGETS = {
    'q': 'var_q',
    'k': 'var_k',
    'v': 'var_v',
    'z': 'var_z',
    'obs': 'var_obs',
}


@dataclass(frozen=True)
class NoiseScales:
    """Isotropic variances of the q, κ, v, z and observation noises"""
    var_q: float = 0.5
    var_k: float = 0.5
    var_v: float = 0.5
    var_z: float = 0.5
    var_obs: float = 0.5

    def __post_init__(self):
        for name in NOISE_FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise DomainError(f'{name} must be a finite non-negative variance, got {value}')

    def std(self, name):
        return math.sqrt(getattr(self, name))

    def floored(self, floor):
        return NoiseScales(**{name: max(getattr(self, name), floor) for name in NOISE_FIELDS})

    def as_dict(self):
        return asdict(self)

    @classmethod
    def constant(cls, variance):
        return cls(**{name: variance for name in NOISE_FIELDS})


@dataclass(frozen=True, eq=False)
class ObservationHead:
    """
    G(z) = out_proj · LN(z + ffn_out · relu(ffn_in · z + ffn_in_bias) + ffn_out_bias) + out_bias

    With layer_norm=False the LN step is skipped, which makes G affine.
    """
    ffn_in: np.ndarray
    ffn_in_bias: np.ndarray
    ffn_out: np.ndarray
    ffn_out_bias: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    out_proj: np.ndarray
    out_bias: np.ndarray
    ln_epsilon: float = 1e-6
    layer_norm: bool = True

    @property
    def depth(self):
        return _shape(self.ffn_in)[1]

    @property
    def d_ff(self):
        return _shape(self.ffn_in)[0]

    @property
    def d_obs(self):
        return _shape(self.out_proj)[0]


HEAD_WEIGHTS = (
    'ffn_in', 'ffn_in_bias', 'ffn_out', 'ffn_out_bias',
    'ln_gain', 'ln_bias', 'out_proj', 'out_bias',
)
PROJECTION_WEIGHTS = ('W_q', 'W_k', 'W_v')
WEIGHT_NAMES = PROJECTION_WEIGHTS + HEAD_WEIGHTS


@dataclass(frozen=True, eq=False)
class ModelParams:
    """θ: projections W_q, W_k, W_v (depth x d_in), observation head, noise variances"""
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    head: ObservationHead
    noise: NoiseScales = field(default_factory=NoiseScales)

    @property
    def depth(self):
        return _shape(self.W_q)[0]

    @property
    def d_in(self):
        return _shape(self.W_q)[1]

    @property
    def d_obs(self):
        return self.head.d_obs

    def weights(self):
        """Learnable arrays by name (the parameter partition Adam sees)"""
        arrays = {name: getattr(self, name) for name in PROJECTION_WEIGHTS}
        arrays.update({name: getattr(self.head, name) for name in HEAD_WEIGHTS})
        return arrays

    def with_weights(self, mapping):
        """
        Copy with some weights replaced.

        The replacements may be tape nodes, which is how the loss evaluates the
        model on a tape.
        """
        projections = {name: mapping[name] for name in PROJECTION_WEIGHTS if name in mapping}
        head = {name: mapping[name] for name in HEAD_WEIGHTS if name in mapping}
        return replace(self, head=replace(self.head, **head), **projections)

    def with_noise(self, noise):
        return replace(self, noise=noise)

    def validate(self):
        depth, d_in = np.shape(self.W_q)
        if depth < 1 or d_in < 1:
            raise DomainError('Model depth and input dimension must be at least 1')
        for name in ('W_k', 'W_v'):
            if np.shape(getattr(self, name)) != (depth, d_in):
                raise DomainError(f'{name} has shape {np.shape(getattr(self, name))}, expected {(depth, d_in)}')
        head = self.head
        expected = {
            'ffn_in': (head.d_ff, depth),
            'ffn_in_bias': (head.d_ff,),
            'ffn_out': (depth, head.d_ff),
            'ffn_out_bias': (depth,),
            'ln_gain': (depth,),
            'ln_bias': (depth,),
            'out_proj': (head.d_obs, depth),
            'out_bias': (head.d_obs,),
        }
        for name, shape in expected.items():
            if np.shape(getattr(head, name)) != shape:
                raise DomainError(f'{name} has shape {np.shape(getattr(head, name))}, expected {shape}')
        for name, value in self.weights().items():
            if not np.all(np.isfinite(value)):
                raise DomainError(f'{name} contains non-finite values')
        if head.ln_epsilon <= 0:
            raise DomainError('ln_epsilon must be positive')
        return self


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return (2.0 * rng.uniform(shape) - 1.0) * bound


def init_params(d_in, d_obs, rng, depth=32, ff_units=32, initial_variance=0.5, layer_norm=True):
    """
    Fresh parameters: weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases 0,
    LN gain 1 and bias 0, all five variances = initial_variance.
    """
    if min(d_in, d_obs, depth, ff_units) < 1:
        raise DomainError('All model dimensions must be at least 1')
    head = ObservationHead(
        ffn_in=_uniform(rng.child('ffn_in'), (ff_units, depth), depth),
        ffn_in_bias=np.zeros(ff_units),
        ffn_out=_uniform(rng.child('ffn_out'), (depth, ff_units), ff_units),
        ffn_out_bias=np.zeros(depth),
        ln_gain=np.ones(depth),
        ln_bias=np.zeros(depth),
        out_proj=_uniform(rng.child('out_proj'), (d_obs, depth), depth),
        out_bias=np.zeros(d_obs),
        layer_norm=layer_norm,
    )
    return ModelParams(
        W_q=_uniform(rng.child('W_q'), (depth, d_in), d_in),
        W_k=_uniform(rng.child('W_k'), (depth, d_in), d_in),
        W_v=_uniform(rng.child('W_v'), (depth, d_in), d_in),
        head=head,
        noise=NoiseScales.constant(initial_variance),
    ).validate()
