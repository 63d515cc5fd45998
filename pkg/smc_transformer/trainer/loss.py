# trainer/loss.py
"""
Training losses written against an `ops` namespace.

smc_loss replays a finished filter pass: ancestors and noise draws are
constants, the model parameters flow through the reparametrised states, and
the final importance weights are wrapped in stop_gradient.
"""
import numpy as np

from attention.cell import (
    attention_vector, attention_weights, iter_deterministic,
    observation_logdensity, project_qkv, transition_logdensity,
)
from numkit.exceptions import DomainError
from numkit.kernels import ARRAY_OPS


class _ReplayedState:
    __slots__ = ('q', 'k', 'v', 'z')

    def __init__(self, projection, z):
        self.q, self.k, self.v, self.z = projection.q, projection.k, projection.v, z


def _normalised(weights):
    weights = np.asarray(weights, dtype=np.float64)
    return weights / weights.sum(axis=-1, keepdims=True)


def smc_loss(result, x, params, ops=ARRAY_OPS, final_weights=None):
    """
    −Σ_m ω_T^m Σ_{t=2..T} [log p(ζ_t^m | ·) + log p(X_t | ζ_t^m)], averaged over sequences.

    The per-trajectory sums follow the genealogy: the running sum of every
    particle is gathered with the ancestor indices at each selection step.

    Args:
        result: FilterResult of the same observations
        x: observations (B, T, d)
        params: ModelParams, weights may be tape nodes
        ops: ArrayOps or TapeOps
        final_weights: optional (B, M) weights replacing result.final_weights,
            renormalised per sequence

    Returns:
        scalar (array or node)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    noise = params.noise
    for name in ('var_q', 'var_k', 'var_v', 'var_z', 'var_obs'):
        if getattr(noise, name) <= 0:
            raise DomainError(f'{name} must be positive to evaluate the training loss')
    if x.shape[1] != result.length:
        raise DomainError(f'Filter result covers {result.length} steps, observations have {x.shape[1]}')
    weights = result.final_weights if final_weights is None else final_weights
    weights = ops.stop_gradient(ops.constant(_normalised(weights)))
    batch_size = x.shape[0]

    first = result.states[0]
    projection = project_qkv(x[:, None, 0], params, noise=(first.eps_q, first.eps_k, first.eps_v), ops=ops)
    q_latest = projection.q
    keys = ops.window_push(projection.k, None, result.lag)
    values = ops.window_push(projection.v, None, result.lag)
    running = None
    for t in range(1, result.length):
        ancestors = result.ancestors[t - 1]
        state = result.states[t]
        q_prev = ops.gather_particles(q_latest, ancestors)
        keys = ops.gather_particles(keys, ancestors)
        values = ops.gather_particles(values, ancestors)
        if running is not None:
            running = ops.gather_particles(running, ancestors)
        pi = attention_weights(q_prev, keys, ops)
        z, mu, _ = attention_vector(pi, values, params, eps=state.eps_z, ops=ops)
        x_t = x[:, None, t]
        projection = project_qkv(x_t, params, noise=(state.eps_q, state.eps_k, state.eps_v), ops=ops)
        term = ops.add(
            transition_logdensity(_ReplayedState(projection, z), mu, x_t, params, ops),
            observation_logdensity(x_t, z, params, ops),
        )
        running = term if running is None else ops.add(running, term)
        q_latest = projection.q
        keys = ops.window_push(projection.k, keys, result.lag)
        values = ops.window_push(projection.v, values, result.lag)
    return ops.scale(ops.sum(ops.mul(weights, running)), -1.0 / batch_size)


def deterministic_loss(x, params, lag, ops=ARRAY_OPS):
    """Mean squared error of the noise-free transformer over X_2..X_T"""
    x = np.asarray(x, dtype=np.float64)
    total = None
    for t, prediction in iter_deterministic(x, params, lag, ops):
        error = ops.sum(ops.square(ops.sub(prediction, x[..., t, :])))
        total = error if total is None else ops.add(total, error)
    count = x[..., 1:, :].size
    return ops.scale(total, 1.0 / count)
