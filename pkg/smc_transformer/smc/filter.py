# smc/filter.py
"""
Auxiliary particle filter over the latent attention states.

Per observation X_t (t >= 2): selection (multinomial resampling on the
previous weights), mutation (sample ζ_t from the model with the selected
windows), weighting by p(X_t | z_t). Resampling happens at every step.

Noise for sequence b at step t and source s comes from streams[b].child(t, s),
so results do not depend on how sequences are batched.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from attention.cell import (
    AttentionWindow, LatentState, attention_vector, attention_weights,
    observation_mean, project_qkv,
)
from numkit.exceptions import DomainError, NumericalError
from numkit.kernels import gather_particles, log_gaussian_density, logsumexp, squared_norm
from numkit.rng import as_streams, batch_normal

from .cloud import ParticleCloud, uniform_log_weights

logger = logging.getLogger(__name__)

NORMALISATION_TOLERANCE = 1e-6


def resample_indices(weights, rng):
    """
    M i.i.d. multinomial draws of particle indices with probabilities `weights`.

    Args:
        weights: probability array of length M
        rng: SeededRng

    Returns:
        int array of length M
    """
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if weights.ndim != 1 or abs(total - 1.0) > NORMALISATION_TOLERANCE or np.any(weights < 0):
        raise DomainError(f'Resampling needs normalised weights (sum = {total})')
    return rng.choice(weights.shape[0], size=weights.shape[0], p=weights / total)


def _batch_resample(weights, streams, step):
    return np.stack([
        resample_indices(row, stream.child(step, 'resample'))
        for row, stream in zip(weights, streams)
    ])


def _batch_inputs(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return x


def _sample_state(window, x_t, params, streams, step, n_particles):
    """Mutation: z from the (selected) window, then (q, κ, v) from X_t"""
    depth = params.depth
    if window.size > 0:
        pi = attention_weights(window.q_prev, window)
        eps_z = batch_normal(streams, (step, 'z'), (n_particles, depth))
        z, mu, _ = attention_vector(pi, window, params, eps=eps_z)
    else:
        z = mu = eps_z = None
    eps = tuple(batch_normal(streams, (step, source), (n_particles, depth)) for source in ('q', 'k', 'v'))
    projection = project_qkv(x_t[:, None, :], params, noise=eps)
    return LatentState(
        q=projection.q, k=projection.k, v=projection.v,
        eps_q=eps[0], eps_k=eps[1], eps_v=eps[2],
        z=z, mu_z=mu, eps_z=eps_z,
    )


def init_cloud(x_first, params, n_particles, lag, rng):
    """t = 1: sample (q, κ, v) from X_1 for every particle, uniform weights, no z"""
    if n_particles < 1 or lag < 1:
        raise DomainError('Need at least one particle and a lag of at least one')
    x_first = _batch_inputs(x_first)
    streams = as_streams(rng, x_first.shape[0])
    state = _sample_state(AttentionWindow(lag=lag), x_first, params, streams, 0, n_particles)
    return ParticleCloud(
        window=AttentionWindow(lag=lag).push(state),
        log_weights=uniform_log_weights(x_first.shape[0], n_particles),
        log_norm_const=np.zeros(x_first.shape[0]),
        step=0,
        latest=state,
    )


def select(cloud, rng):
    """Selection only: resample windows by the current weights and extend the genealogy"""
    streams = as_streams(rng, cloud.batch_size)
    step = cloud.step + 1
    ancestors = _batch_resample(cloud.weights, streams, step)
    return replace(
        cloud,
        window=cloud.window.take(ancestors),
        genealogy=cloud.genealogy + (ancestors,),
        step=step,
        log_weights=uniform_log_weights(cloud.batch_size, cloud.n_particles),
        latest=_take_state(cloud.latest, ancestors),
        obs_logdensity=None,
        obs_sq_residual=None,
    )


def _take_state(state, index):
    def take(values):
        return None if values is None else gather_particles(values, index)
    return LatentState(**{name: take(getattr(state, name)) for name in (
        'q', 'k', 'v', 'eps_q', 'eps_k', 'eps_v', 'z', 'mu_z', 'eps_z')})


def propagate(cloud, x_t, params, rng):
    """
    Selection then mutation for the next observation.

    Each particle's window is replaced by its resampled ancestor's window and
    extended with a freshly sampled state; weights become uniform until
    compute_weights scores X_t.
    """
    if cloud is None:
        raise DomainError('propagate needs a cloud initialised on a first observation')
    x_t = _batch_inputs(x_t)
    streams = as_streams(rng, cloud.batch_size)
    selected = select(cloud, streams)
    state = _sample_state(selected.window, x_t, params, streams, selected.step, cloud.n_particles)
    return replace(
        selected,
        window=selected.window.push(state),
        latest=state,
    )


def compute_weights(cloud, x_t, params):
    """
    ω_m ∝ N(X_t; G(z_m), var_obs·I), normalised in log space.

    Also adds log(mean unnormalised weight) to the running log-likelihood.

    Returns:
        the weighted cloud; cloud.weights is the probability array
    """
    if params.noise.var_obs <= 0:
        raise DomainError('var_obs must be positive to compute weights')
    if cloud.latest.z is None:
        raise DomainError('The first state has no attention vector to score')
    x_t = _batch_inputs(x_t)[:, None, :]
    prediction = observation_mean(cloud.latest.z, params.head)
    log_density = log_gaussian_density(x_t, prediction, params.noise.var_obs)
    with np.errstate(over='ignore', invalid='ignore'):
        total = logsumexp(log_density, axis=1)
    if not np.all(np.isfinite(total)):
        bad = np.flatnonzero(~np.isfinite(total)).tolist()
        error = NumericalError(f'All particle weights underflowed at step {cloud.step} for batch rows {bad}')
        error.rows = bad
        raise error
    log_weights = log_density - total[:, None]
    return replace(
        cloud,
        log_weights=log_weights,
        log_norm_const=cloud.log_norm_const + total - math.log(cloud.n_particles),
        obs_logdensity=log_density,
        obs_sq_residual=squared_norm(x_t - prediction),
    )


def point_prediction(cloud, params):
    """Σ_m ω_m G(μ_m(t+1)) from the current windows (no noise, no resampling)"""
    window = cloud.window
    mu = attention_vector(
        attention_weights(window.q_prev, window), window, params,
        eps=np.zeros(window.keys.shape[:-2] + (params.depth,)),
    )[1]
    predictions = observation_mean(mu, params.head)
    return np.einsum('bm,bmd->bd', cloud.weights, predictions)


@dataclass(frozen=True, eq=False)
class FilterResult:
    """
    Everything a filter pass leaves for the trainer and the evaluators.

    Step-indexed arrays use 0-based time. Selection steps are t = 1..T-1.

    Fields:
        cloud: final weighted cloud
        ancestors: (T-1, B, M) ancestor indices per selection step
        states: T LatentStates with arrays (B, M, depth)
        weights: (T, B, M) normalised weights after each step
        obs_logdensity: (T-1, B, M)
        sq_residuals: source -> (n_steps, B, M) squared residual norms
            (q, k, v over T steps; z, obs over T-1 steps)
        predictions: (B, T-1, d_obs) weighted point predictions of X_2..X_T
        log_likelihood: (B,) log-likelihood estimate
        ess: (T, B) effective sample sizes
    """
    cloud: ParticleCloud
    ancestors: np.ndarray
    states: tuple
    weights: np.ndarray
    obs_logdensity: np.ndarray
    sq_residuals: dict
    predictions: np.ndarray
    log_likelihood: np.ndarray
    ess: np.ndarray
    lag: int

    @property
    def length(self):
        return len(self.states)

    @property
    def final_weights(self):
        return self.weights[-1]

    def lineage(self):
        """
        For each step, the index of the ancestor of every final particle.

        Returns:
            (T, B, M) int array; lineage[T-1] is the identity
        """
        batch_size, n_particles = self.final_weights.shape
        lineage = [np.broadcast_to(np.arange(n_particles), (batch_size, n_particles))]
        for ancestors in self.ancestors[::-1]:
            lineage.append(np.take_along_axis(ancestors, lineage[-1], axis=1))
        return np.stack(lineage[::-1])


def _state_sq_residuals(state, noise):
    residuals = {
        'q': noise.var_q * squared_norm(state.eps_q),
        'k': noise.var_k * squared_norm(state.eps_k),
        'v': noise.var_v * squared_norm(state.eps_v),
    }
    if state.eps_z is not None:
        residuals['z'] = noise.var_z * squared_norm(state.eps_z)
    return residuals


def filter_sequence(x, params, n_particles, lag, rng):
    """
    Run the filter over X_{1:T}.

    Args:
        x: observations (T, d) or (B, T, d)
        params: ModelParams
        n_particles: M
        lag: Δ
        rng: SeededRng (split by batch position) or one stream per sequence

    Returns:
        FilterResult
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 2:
        raise DomainError('filter_sequence needs at least two observations per sequence')
    streams = as_streams(rng, x.shape[0])
    cloud = init_cloud(x[:, 0], params, n_particles, lag, streams)
    states = [cloud.latest]
    weights = [cloud.weights]
    ancestors, obs_logdensity, predictions = [], [], []
    residuals = {source: [value] for source, value in _state_sq_residuals(cloud.latest, params.noise).items()}
    residuals.update(z=[], obs=[])
    for t in range(1, x.shape[1]):
        predictions.append(point_prediction(cloud, params))
        cloud = propagate(cloud, x[:, t], params, streams)
        cloud = compute_weights(cloud, x[:, t], params)
        states.append(cloud.latest)
        weights.append(cloud.weights)
        ancestors.append(cloud.genealogy[-1])
        obs_logdensity.append(cloud.obs_logdensity)
        for source, value in _state_sq_residuals(cloud.latest, params.noise).items():
            residuals[source].append(value)
        residuals['obs'].append(cloud.obs_sq_residual)
    weights = np.stack(weights)
    logger.debug('Filtered %d sequences of length %d with %d particles', x.shape[0], x.shape[1], n_particles)
    return FilterResult(
        cloud=cloud,
        ancestors=np.stack(ancestors),
        states=tuple(states),
        weights=weights,
        obs_logdensity=np.stack(obs_logdensity),
        sq_residuals={source: np.stack(values) for source, values in residuals.items()},
        predictions=np.stack(predictions, axis=1),
        log_likelihood=cloud.log_norm_const,
        ess=1.0 / np.sum(weights * weights, axis=-1),
        lag=lag,
    )
