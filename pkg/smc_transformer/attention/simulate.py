# attention/simulate.py
"""
Draw sequences from the generative model itself.

Used to check that EM recovers known variances on data the model could have
produced.
"""
import numpy as np

from numkit.exceptions import DomainError
from numkit.rng import as_streams, batch_normal

from .cell import AttentionWindow, LatentState, attention_vector, attention_weights, observation_mean, project_qkv


def sample_sequences(params, n_series, length, lag, rng):
    """
    X_1 ~ N(0, I); for t >= 2: z(t) from the window, X_t = G(z(t)) + sqrt(var_obs)·ε,
    then (q, κ, v) from X_t.

    Returns:
        array (n_series, length, d_obs)
    """
    if params.d_in != params.d_obs:
        raise DomainError('Simulation feeds observations back as inputs, so d_in must equal d_obs')
    if length < 2 or n_series < 1:
        raise DomainError('Need at least one series of length two')
    streams = as_streams(rng, n_series)
    depth = params.depth
    x_t = batch_normal(streams, (0, 'input'), (params.d_obs,))
    window = AttentionWindow(lag=lag)
    observations = [x_t]
    for t in range(length):
        if t > 0:
            pi = attention_weights(window.q_prev, window)
            eps_z = batch_normal(streams, (t, 'z'), (depth,))
            z, mu, _ = attention_vector(pi, window, params, eps=eps_z)
            noise = batch_normal(streams, (t, 'obs'), (params.d_obs,))
            x_t = observation_mean(z, params.head) + params.noise.std('var_obs') * noise
            observations.append(x_t)
        else:
            z = mu = eps_z = None
        eps = tuple(batch_normal(streams, (t, source), (depth,)) for source in ('q', 'k', 'v'))
        projection = project_qkv(x_t, params, noise=eps)
        window = window.push(LatentState(
            q=projection.q, k=projection.k, v=projection.v,
            eps_q=eps[0], eps_k=eps[1], eps_v=eps[2],
            z=z, mu_z=mu, eps_z=eps_z,
        ))
    return np.stack(observations, axis=1)
