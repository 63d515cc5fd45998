# attention/cell.py
"""
The stochastic self-attention cell.

Timing convention: (q, κ, v) at time t are projected from X_t once X_t is
known; z(t) is drawn from the window of earlier states only, before X_t is
scored. At t = 1 there is no window and no z.

Every function takes an `ops` namespace (numkit ArrayOps by default, or a
diffcore TapeOps) and works on any number of leading batch/particle axes.
"""
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from numkit.exceptions import DomainError
from numkit.kernels import ARRAY_OPS


def _shape(item):
    return np.shape(getattr(item, 'value', item))


def _child(rng, source):
    return None if rng is None else rng.child(source)


class Projection(NamedTuple):
    """Sampled (q, κ, v), their means W·X_t and the recorded noise"""
    q: object
    k: object
    v: object
    mean_q: object
    mean_k: object
    mean_v: object
    eps_q: np.ndarray
    eps_k: np.ndarray
    eps_v: np.ndarray


@dataclass(frozen=True, eq=False)
class LatentState:
    """ζ_t = (q, κ, v, z) for one particle (or a stack of particles) plus the noise that produced it"""
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    eps_q: np.ndarray
    eps_k: np.ndarray
    eps_v: np.ndarray
    z: Optional[np.ndarray] = None
    mu_z: Optional[np.ndarray] = None
    eps_z: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class AttentionWindow:
    """
    Ring buffer of the last min(t-1, Δ) states, most recent first.

    Arrays have shape (..., L, depth); latents holds z (zeros for the first state).
    """
    lag: int
    queries: Optional[np.ndarray] = None
    keys: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    latents: Optional[np.ndarray] = None

    @property
    def size(self):
        return 0 if self.keys is None else np.shape(self.keys)[-2]

    @property
    def q_prev(self):
        if self.size == 0:
            raise DomainError('Empty attention window has no previous query')
        return self.queries[..., 0, :]

    def push(self, state):
        z = state.z if state.z is not None else np.zeros(np.shape(state.q))
        return replace(
            self,
            queries=ARRAY_OPS.window_push(state.q, self.queries, self.lag),
            keys=ARRAY_OPS.window_push(state.k, self.keys, self.lag),
            values=ARRAY_OPS.window_push(state.v, self.values, self.lag),
            latents=ARRAY_OPS.window_push(z, self.latents, self.lag),
        )

    def take(self, index):
        """Windows of the selected particles: arrays (B, M, L, r) -> (B, K, L, r)"""
        if self.size == 0:
            return self
        return replace(
            self,
            queries=ARRAY_OPS.gather_particles(self.queries, index),
            keys=ARRAY_OPS.gather_particles(self.keys, index),
            values=ARRAY_OPS.gather_particles(self.values, index),
            latents=ARRAY_OPS.gather_particles(self.latents, index),
        )


def qkv_means(x_t, params, ops=ARRAY_OPS):
    """W_q X_t, W_κ X_t, W_v X_t"""
    if _shape(x_t)[-1] != params.d_in:
        raise DomainError(f'Input has {_shape(x_t)[-1]} features, model expects {params.d_in}')
    return (
        ops.linear(x_t, params.W_q),
        ops.linear(x_t, params.W_k),
        ops.linear(x_t, params.W_v),
    )


def project_qkv(x_t, params, rng=None, noise=None, ops=ARRAY_OPS):
    """
    Sample q = W_q X_t + sqrt(var_q)·ε_q (and likewise κ, v) with independent noises.

    Args:
        x_t: input (..., d_in)
        params: ModelParams
        rng: SeededRng, used when `noise` is not given
        noise: optional (eps_q, eps_k, eps_v) to replay recorded draws;
            their shape sets the particle axes

    Returns:
        Projection
    """
    means = qkv_means(x_t, params, ops)
    if noise is None:
        if rng is None:
            raise DomainError('project_qkv needs an rng or recorded noise')
        noise = (None, None, None)
    sampled = [
        ops.gaussian_sample(mean, params.noise.std(f'var_{source}'), _child(rng, source), eps)
        for mean, source, eps in zip(means, ('q', 'k', 'v'), noise)
    ]
    (q, eps_q), (k, eps_k), (v, eps_v) = sampled
    mean_q, mean_k, mean_v = means
    return Projection(
        q=q,
        k=k,
        v=v,
        mean_q=mean_q,
        mean_k=mean_k,
        mean_v=mean_v,
        eps_q=eps_q,
        eps_k=eps_k,
        eps_v=eps_v,
    )


def _window_part(window, name):
    if isinstance(window, AttentionWindow):
        if window.size == 0:
            raise DomainError('Attention over an empty window')
        return getattr(window, name)
    if window is None:
        raise DomainError('Attention over an empty window')
    return window


def attention_weights(q_prev, window, ops=ARRAY_OPS):
    """
    π = softmax(<q(t-1), κ(t-s)> / sqrt(depth)) over the window slots s.

    `window` is an AttentionWindow or a keys array/node (..., L, depth).
    """
    keys = _window_part(window, 'keys')
    if _shape(keys)[-2] == 0:
        raise DomainError('Attention over an empty window')
    depth = _shape(q_prev)[-1]
    scores = ops.attention_scores(q_prev, keys)
    return ops.softmax(ops.scale(scores, 1.0 / math.sqrt(depth)))


def attention_vector(pi, window, params, rng=None, eps=None, ops=ARRAY_OPS):
    """
    z = Σ_s π_s v(t-s) + sqrt(var_z)·ε_z.

    `window` is an AttentionWindow or a values array/node (..., L, depth).

    Returns:
        (z, mu, eps_z) where mu = Σ_s π_s v(t-s)
    """
    values = _window_part(window, 'values')
    if _shape(pi)[-1] != _shape(values)[-2]:
        raise DomainError(f'{_shape(pi)[-1]} attention weights for a window of {_shape(values)[-2]}')
    mu = ops.attend(pi, values)
    if eps is None:
        if rng is None:
            raise DomainError('attention_vector needs an rng or recorded noise')
    z, eps = ops.gaussian_sample(mu, params.noise.std('var_z'), _child(rng, 'z'), eps)
    return z, mu, eps


def observation_mean(z, head, ops=ARRAY_OPS):
    """G(z); deterministic, consumes no randomness"""
    if _shape(z)[-1] != head.depth:
        raise DomainError(f'Latent of size {_shape(z)[-1]} for a head of depth {head.depth}')
    hidden = ops.relu(ops.add(ops.linear(z, head.ffn_in), head.ffn_in_bias))
    residual = ops.add(z, ops.add(ops.linear(hidden, head.ffn_out), head.ffn_out_bias))
    if head.layer_norm:
        residual = ops.layer_norm(residual, head.ln_gain, head.ln_bias, head.ln_epsilon)
    return ops.add(ops.linear(residual, head.out_proj), head.out_bias)


def observation_logdensity(x_t, z, params, ops=ARRAY_OPS):
    """log N(X_t; G(z), var_obs·I)"""
    if params.noise.var_obs <= 0:
        raise DomainError('var_obs must be positive to score observations')
    return ops.log_gaussian_density(x_t, observation_mean(z, params.head, ops), params.noise.var_obs)


def transition_logdensity(state, mu_z, x_t, params, ops=ARRAY_OPS):
    """
    log p(ζ_t | window, X): q, κ, v about W·X_t and z about mu_z, each isotropic.

    `state` is any object with q, k, v and z attributes (LatentState or Projection plus z).
    """
    noise = params.noise
    for name in ('var_q', 'var_k', 'var_v', 'var_z'):
        if getattr(noise, name) <= 0:
            raise DomainError(f'{name} must be positive to score transitions')
    mean_q, mean_k, mean_v = qkv_means(x_t, params, ops)
    total = ops.log_gaussian_density(state.q, mean_q, noise.var_q)
    total = ops.add(total, ops.log_gaussian_density(state.k, mean_k, noise.var_k))
    total = ops.add(total, ops.log_gaussian_density(state.v, mean_v, noise.var_v))
    return ops.add(total, ops.log_gaussian_density(state.z, mu_z, noise.var_z))


def iter_deterministic(x, params, lag, ops=ARRAY_OPS):
    """
    Noise-free recursion: yields (t, G(μ(t))) for t = 1..T-1 (0-based).

    Args:
        x: observations (..., T, d_in), array or node
    """
    length = _shape(x)[-2]
    if length < 2:
        raise DomainError('A sequence needs at least two observations')
    if lag < 1:
        raise DomainError('The attention lag must be at least 1')
    values = getattr(x, 'value', x)
    keys = window_values = q_prev = None
    for t in range(length):
        x_t = values[..., t, :]
        if t > 0:
            pi = attention_weights(q_prev, keys, ops)
            yield t, observation_mean(ops.attend(pi, window_values), params.head, ops)
        q, k, v = qkv_means(x_t, params, ops)
        keys = ops.window_push(k, keys, lag)
        window_values = ops.window_push(v, window_values, lag)
        q_prev = q


def deterministic_forward(x, params, lag):
    """
    Standard single-head transformer predictions Ŷ_{2:T} (all variances treated as 0).

    Returns:
        array (..., T-1, d_obs)
    """
    predictions = [prediction for _, prediction in iter_deterministic(np.asarray(x, dtype=np.float64), params, lag)]
    return np.stack(predictions, axis=-2)
