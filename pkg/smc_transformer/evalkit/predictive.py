# evalkit/predictive.py
"""
Predictive distributions of the SMC Transformer.

A draw of X_t picks a particle m with probability ω_{t-1}^m, samples ẑ_t from
the transition of that particle's window and adds observation noise to
G(ẑ_t). Unistep evaluation keeps filtering on the observed values; a
multistep forecast freezes the filter and feeds its own draws back in.

Keys used on each sequence stream:
    ('predictive', t)       unistep draws of X_t
    ('forecast', ...)       multistep rollout
"""
import logging
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from attention.cell import LatentState, attention_vector, attention_weights, deterministic_forward, observation_mean, project_qkv
from numkit.exceptions import DomainError
from numkit.rng import as_streams, batch_normal
from smc.filter import compute_weights, filter_sequence, init_cloud, point_prediction, propagate

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 32


@dataclass(frozen=True, eq=False)
class PredictiveSamples:
    """
    Draws of the target observations.

    Fields:
        draws: array (B, n_steps, n_samples, d_obs)
        steps: 1-based time index of each target step
    """
    draws: np.ndarray
    steps: tuple

    def __post_init__(self):
        self.validate()

    @property
    def n_samples(self):
        return self.draws.shape[2]

    def validate(self):
        if self.draws.ndim != 4:
            raise DomainError(f'Draws must be (series, step, sample, feature), got {self.draws.shape}')
        if self.n_samples < 1:
            raise DomainError('At least one predictive sample is required')
        if len(self.steps) != self.draws.shape[1]:
            raise DomainError('One time index per target step is required')
        if not np.all(np.isfinite(self.draws)):
            raise DomainError('Predictive samples contain non-finite values')
        return self

    def map(self, function):
        """Copy with `function` applied to the draws (e.g. denormalisation)"""
        return PredictiveSamples(draws=function(self.draws), steps=self.steps)


def _pick_particles(weights, streams, n_samples, key):
    picks = []
    for row, stream in zip(weights, streams):
        total = row.sum()
        if abs(total - 1.0) > 1e-6:
            raise DomainError(f'Particle weights sum to {total}, not 1')
        picks.append(stream.child(*key, 'pick').choice(row.shape[0], size=n_samples, p=row / total))
    return np.stack(picks)


def _draw_observation(window, params, streams, key, n_samples):
    """ẑ from each window, then x̂ ~ N(G(ẑ), var_obs·I)"""
    pi = attention_weights(window.q_prev, window)
    eps_z = batch_normal(streams, key + ('z',), (n_samples, params.depth))
    z, _, _ = attention_vector(pi, window, params, eps=eps_z)
    eps_obs = batch_normal(streams, key + ('obs',), (n_samples, params.d_obs))
    return z, observation_mean(z, params.head) + params.noise.std('var_obs') * eps_obs


def sample_predictive(cloud, params, n_samples, rng, key=()):
    """
    n_samples draws of the next observation from a weighted cloud.

    Args:
        cloud: ParticleCloud weighted on X_{t-1}
        params: ModelParams
        n_samples: draws per sequence
        rng: SeededRng (split by batch position) or one stream per sequence
        key: prefix of the stream keys, so successive steps draw independently

    Returns:
        array (B, n_samples, d_obs)
    """
    if n_samples < 1:
        raise DomainError('n_samples must be at least 1')
    streams = as_streams(rng, cloud.batch_size)
    picks = _pick_particles(cloud.weights, streams, n_samples, key)
    _, draws = _draw_observation(cloud.window.take(picks), params, streams, key, n_samples)
    return draws


def multistep_forecast(cloud, params, horizon, n_samples, rng):
    """
    Sample paths over the next `horizon` steps.

    Every path starts from a particle picked by the cloud weights and is rolled
    forward on its own draws; paths are never resampled.

    Returns:
        array (B, horizon, n_samples, d_obs)
    """
    if horizon < 1:
        raise DomainError('The forecast horizon must be at least 1')
    if n_samples < 1:
        raise DomainError('n_samples must be at least 1')
    streams = as_streams(rng, cloud.batch_size)
    window = cloud.window.take(_pick_particles(cloud.weights, streams, n_samples, ('forecast',)))
    paths = []
    for step in range(1, horizon + 1):
        key = ('forecast', step)
        z, draws = _draw_observation(window, params, streams, key, n_samples)
        paths.append(draws)
        eps = tuple(batch_normal(streams, key + (source,), (n_samples, params.depth)) for source in ('q', 'k', 'v'))
        projection = project_qkv(draws, params, noise=eps)
        window = window.push(LatentState(
            q=projection.q, k=projection.k, v=projection.v,
            eps_q=eps[0], eps_k=eps[1], eps_v=eps[2], z=z,
        ))
    return np.stack(paths, axis=1)


def unistep(x, params, n_particles, lag, n_samples, rng):
    """
    One-step-ahead predictions, filtering on the observed values, of X_2..X_T.

    Returns:
        (point predictions (B, T-1, d_obs), draws (B, T-1, n_samples, d_obs))
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] < 2:
        raise DomainError('Unistep evaluation needs at least two observations')
    streams = as_streams(rng, x.shape[0])
    cloud = init_cloud(x[:, 0], params, n_particles, lag, streams)
    predictions, draws = [], []
    for t in range(1, x.shape[1]):
        predictions.append(point_prediction(cloud, params))
        draws.append(sample_predictive(cloud, params, n_samples, streams, key=('predictive', t)))
        cloud = compute_weights(propagate(cloud, x[:, t], params, streams), x[:, t], params)
    return np.stack(predictions, axis=1), np.stack(draws, axis=1)


def filtered_cloud(x, params, n_particles, lag, rng):
    """Cloud weighted on the last observation of x (B, τ_H, d)"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] == 1:
        return init_cloud(x[:, 0], params, n_particles, lag, rng)
    return filter_sequence(x, params, n_particles, lag, rng).cloud


def forecast(x, params, n_particles, lag, history, horizon, n_samples, rng):
    """Filter X_1..X_{τ_H}, then roll out τ_F steps"""
    if history < 1:
        raise DomainError('The forecast history must hold at least one observation')
    x = np.asarray(x, dtype=np.float64)
    if history > x.shape[1]:
        raise DomainError(f'History of {history} steps for sequences of length {x.shape[1]}')
    streams = as_streams(rng, x.shape[0])
    cloud = filtered_cloud(x[:, :history], params, n_particles, lag, streams)
    return multistep_forecast(cloud, params, horizon, n_samples, streams)


def map_chunks(function, indices, threads=1, chunk_size=DEFAULT_CHUNK_SIZE):
    """
    Apply function(chunk of indices) over consecutive chunks, in parallel threads.

    Results come back in chunk order; each array-valued output is concatenated
    along axis 0, tuples element-wise.
    """
    indices = np.asarray(indices)
    chunks = [indices[start:start + chunk_size] for start in range(0, len(indices), chunk_size)]
    if not chunks:
        raise DomainError('No sequences to evaluate')
    results = Parallel(n_jobs=threads, prefer='threads')(delayed(function)(chunk) for chunk in chunks)
    if isinstance(results[0], tuple):
        return tuple(np.concatenate(parts, axis=0) for parts in zip(*results))
    return np.concatenate(results, axis=0)


def evaluate_unistep(dataset, split, params, config, n_samples, rng, threads=1):
    """
    Unistep point predictions and draws for every sequence of a split.

    Sequence i uses stream rng.child(i), so results do not depend on chunking
    or the thread count. The deterministic model yields no draws.

    Returns:
        (indices, predictions (n, T-1, d), PredictiveSamples or None)
    """
    indices = dataset.indices(split)
    steps = tuple(range(2, dataset.length + 1))
    if config.model_type == 'deterministic':
        predictions = map_chunks(
            lambda chunk: deterministic_forward(dataset.observations[chunk], params, config.lag),
            indices, threads,
        )
        return indices, predictions, None

    def run(chunk):
        return unistep(
            dataset.observations[chunk], params, config.particles, config.lag, n_samples,
            [rng.child(int(index)) for index in chunk],
        )

    predictions, draws = map_chunks(run, indices, threads)
    logger.info('Sampled %d draws for %d %s sequences', n_samples, len(indices), split)
    return indices, predictions, PredictiveSamples(draws=draws, steps=steps)


def forecast_split(dataset, split, params, config, history, horizon, n_samples, rng, threads=1):
    """
    Multistep forecasts for every sequence of a split.

    Returns:
        (indices, PredictiveSamples over steps τ_H+1..τ_H+τ_F)
    """
    indices = dataset.indices(split)

    def run(chunk):
        return forecast(
            dataset.observations[chunk], params, config.particles, config.lag,
            history, horizon, n_samples, [rng.child(int(index)) for index in chunk],
        )

    draws = map_chunks(run, indices, threads)
    return indices, PredictiveSamples(draws=draws, steps=tuple(range(history + 1, history + horizon + 1)))
