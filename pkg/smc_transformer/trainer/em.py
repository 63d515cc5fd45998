# trainer/em.py
"""
Stochastic-approximation EM for the five noise variances.

For each source the M-step target is the particle-weighted mean squared
residual along the surviving trajectories,

    Σ^p = Σ_m ω_T^m Σ_t ||residual_t^m||² / (n_steps · dim),

blended into the current value with η_p = p^-exponent.
"""
import logging

import numpy as np

from attention.params import NOISE_TARGETS, NoiseScales
from numkit.exceptions import DomainError

from .optim import em_step_size

logger = logging.getLogger(__name__)


def em_target_variance(sq_residuals, weights, dim=1):
    """
    Σ_m ω_m Σ_t r_t^m / (n_steps · dim).

    Args:
        sq_residuals: (n_steps, ..., M) squared residual norms, already aligned
            with the final particles
        weights: (..., M) final weights
        dim: dimension of the residual vectors

    Returns:
        array of shape (...)
    """
    sq_residuals = np.asarray(sq_residuals, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if sq_residuals.shape[1:] != weights.shape:
        raise DomainError(f'Residuals {sq_residuals.shape} do not match weights {weights.shape}')
    n_steps = sq_residuals.shape[0]
    if n_steps == 0:
        raise DomainError('No residuals to average')
    return np.sum(weights * sq_residuals.sum(axis=0), axis=-1) / (n_steps * dim)


def traced_residuals(result, source):
    """Squared residuals of a source along the lineage of every final particle"""
    residuals = result.sq_residuals[source]
    lineage = result.lineage()[-residuals.shape[0]:]
    return np.take_along_axis(residuals, lineage, axis=2)


def em_targets(result, params, targets=tuple(NOISE_TARGETS)):
    """Batch-averaged M-step targets, keyed by variance field name"""
    dims = {'q': params.depth, 'k': params.depth, 'v': params.depth, 'z': params.depth, 'obs': params.d_obs}
    return {
        NOISE_TARGETS[source]: float(np.mean(em_target_variance(
            traced_residuals(result, source), result.final_weights, dims[source],
        )))
        for source in targets
    }


def em_update_variances(result, params, p, exponent=0.6, floor=1e-6, targets=tuple(NOISE_TARGETS)):
    """
    var ← (1 − η_p)·var + η_p·Σ^p for every source in `targets`, floored.

    Sources outside `targets` keep their variance (still floored).

    Returns:
        NoiseScales
    """
    eta = em_step_size(p, exponent)
    current = params.noise.as_dict()
    for name, target in em_targets(result, params, targets).items():
        current[name] = (1.0 - eta) * current[name] + eta * target
    updated = NoiseScales(**current).floored(floor)
    logger.debug('EM step %d (eta %.4f): %s', p, eta, updated.as_dict())
    return updated
