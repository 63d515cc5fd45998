# smc/cloud.py
"""Weighted particle clouds over attention windows, for a batch of sequences"""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from attention.cell import AttentionWindow, LatentState
from numkit.exceptions import DomainError


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """
    M weighted trajectories per sequence.

    Only the Δ-window of each trajectory is kept; the genealogy holds one
    (B, M) array of ancestor indices per selection step.

    Fields:
        window: AttentionWindow with arrays (B, M, L, depth)
        log_weights: normalised log-weights (B, M)
        genealogy: ancestor index arrays, oldest first
        log_norm_const: running log-likelihood estimate per sequence (B,)
        step: 0-based index of the newest state
        latest: newest LatentState, arrays (B, M, depth)
        obs_logdensity: log N(X_step; G(z), var_obs) per particle, once weighted
        obs_sq_residual: ||X_step - G(z)||² per particle, once weighted
    """
    window: AttentionWindow
    log_weights: np.ndarray
    log_norm_const: np.ndarray
    step: int
    latest: LatentState
    genealogy: tuple = field(default_factory=tuple)
    obs_logdensity: Optional[np.ndarray] = None
    obs_sq_residual: Optional[np.ndarray] = None

    @property
    def batch_size(self):
        return self.log_weights.shape[0]

    @property
    def n_particles(self):
        return self.log_weights.shape[1]

    @property
    def lag(self):
        return self.window.lag

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def validate(self):
        weights = self.weights
        if np.any(weights < 0) or np.any(np.abs(weights.sum(axis=1) - 1.0) > 1e-10):
            raise DomainError('Cloud weights are not a probability vector')
        for ancestors in self.genealogy:
            if ancestors.min() < 0 or ancestors.max() >= self.n_particles:
                raise DomainError('Genealogy index out of range')
        if self.window.size > self.lag:
            raise DomainError('Attention window longer than the lag')
        return self


def uniform_log_weights(batch_size, n_particles):
    return np.full((batch_size, n_particles), -math.log(n_particles))
