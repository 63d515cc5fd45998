# smc/diagnostics.py
"""Genealogy and degeneracy diagnostics for particle clouds"""
from dataclasses import dataclass

import numpy as np
import pandas as pd

from numkit.exceptions import DomainError

ANCESTRY_COLUMNS = ['lag', 'mean_unique', 'ci_low', 'ci_high']


def effective_sample_size(weights):
    """1 / Σ ω², over the last axis"""
    weights = np.asarray(weights, dtype=np.float64)
    return 1.0 / np.sum(weights * weights, axis=-1)


@dataclass(frozen=True, eq=False)
class AncestryReport:
    """
    counts[b, l-1]: number of distinct ancestors, l steps back, of the
    particles in the cloud of sequence b.
    """
    counts: np.ndarray

    @property
    def n_lags(self):
        return self.counts.shape[1]

    def to_frame(self):
        """Mean over sequences with a 95% empirical band"""
        counts = self.counts.astype(np.float64)
        return pd.DataFrame({
            'lag': np.arange(1, self.n_lags + 1),
            'mean_unique': counts.mean(axis=0),
            'ci_low': np.percentile(counts, 2.5, axis=0),
            'ci_high': np.percentile(counts, 97.5, axis=0),
        }, columns=ANCESTRY_COLUMNS)

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        return path


def unique_ancestors(cloud, max_lag=None):
    """
    Count distinct ancestors at lags 1..L by walking the genealogy backwards.

    L defaults to the cloud's Δ and is capped by the number of selection steps
    recorded.

    Returns:
        AncestryReport
    """
    if max_lag is not None and max_lag < 1:
        raise DomainError('max_lag must be at least 1')
    depth = min(cloud.lag if max_lag is None else max_lag, len(cloud.genealogy))
    if depth == 0:
        raise DomainError('The cloud has no selection steps to trace')
    index = np.broadcast_to(np.arange(cloud.n_particles), (cloud.batch_size, cloud.n_particles))
    counts = np.zeros((cloud.batch_size, depth), dtype=np.int64)
    for lag in range(1, depth + 1):
        index = np.take_along_axis(cloud.genealogy[-lag], index, axis=1)
        counts[:, lag - 1] = [np.unique(row).size for row in index]
    return AncestryReport(counts=counts)
