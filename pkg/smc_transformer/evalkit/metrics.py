# evalkit/metrics.py
"""
Point and interval metrics.

Intervals come from empirical quantiles of the predictive draws with linear
interpolation between order statistics (numpy's 'linear' method): the
q-quantile of n sorted draws sits at position q·(n-1).
"""
import math
from dataclasses import dataclass

import numpy as np

from numkit.exceptions import DomainError


@dataclass(frozen=True, eq=False)
class IntervalBounds:
    """Lower and upper bounds per sequence, target step and feature"""
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise DomainError('Lower and upper bounds differ in shape')
        if np.any(self.lower > self.upper):
            raise DomainError('Lower bound above upper bound')

    @property
    def width(self):
        return self.upper - self.lower


def _check_shapes(a, b, what):
    if np.shape(a) != np.shape(b):
        raise DomainError(f'{what}: shapes {np.shape(a)} and {np.shape(b)} differ')


def mse(predictions, truth):
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_shapes(predictions, truth, 'mse')
    return float(np.mean((predictions - truth) ** 2))


def dist_mse(draws, previous, synthetic):
    """
    Σ_k p_k · mean[(x̂ − c_k X_t)²] over sequences, steps and draws.

    Args:
        draws: predictive draws (B, n_steps, n_samples, d) of X_{t+1}
        previous: observed X_t (B, n_steps, d), on the same scale as the draws
        synthetic: SyntheticSpec holding the true conditional-mean modes
    """
    if synthetic is None:
        raise DomainError('dist-mse needs the synthetic ground truth of the data')
    draws = np.asarray(draws, dtype=np.float64)
    previous = np.asarray(previous, dtype=np.float64)
    if draws.ndim != 4 or previous.shape != draws.shape[:2] + draws.shape[3:]:
        raise DomainError(f'Draws {draws.shape} do not match previous values {previous.shape}')
    means, probabilities = synthetic.conditional_means(previous)
    return float(sum(
        probability * np.mean((draws - mode[:, :, None, :]) ** 2)
        for mode, probability in zip(means, probabilities)
    ))


def min_samples(level):
    """Fewest draws whose extreme order statistics can bound a `level` interval"""
    return math.ceil(1.0 / (1.0 - level) - 1e-9)


def intervals_from_samples(draws, level=0.95):
    """
    Empirical (1−level)/2 and 1−(1−level)/2 quantiles over the sample axis.

    Args:
        draws: array (..., n_samples, d)

    Returns:
        IntervalBounds with arrays (..., d)
    """
    if not 0.0 < level < 1.0:
        raise DomainError(f'Coverage level must lie in (0, 1), got {level}')
    draws = np.asarray(draws, dtype=np.float64)
    needed = min_samples(level)
    if draws.ndim < 2 or draws.shape[-2] < needed:
        raise DomainError(f'A {level:.0%} interval needs at least {needed} samples per point')
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(draws, [tail, 1.0 - tail], axis=-2, method='linear')
    return IntervalBounds(lower=lower, upper=np.maximum(upper, lower), level=level)


def picp_mpiw(bounds, truth):
    """
    Coverage and width of the intervals, pooled over sequences, steps and features.

    k_i = 1 iff lower ≤ x ≤ upper (closed interval).

    Args:
        bounds: IntervalBounds with arrays (B, n_steps, d)
        truth: observed values (B, n_steps, d)

    Returns:
        (picp, mpiw, per-step picp (n_steps,), per-step count (n_steps,))
    """
    truth = np.asarray(truth, dtype=np.float64)
    _check_shapes(bounds.lower, truth, 'picp')
    if truth.ndim != 3:
        raise DomainError(f'Truth must be (series, step, feature), got {truth.shape}')
    covered = (bounds.lower <= truth) & (truth <= bounds.upper)
    per_step = covered.mean(axis=(0, 2))
    counts = np.full(truth.shape[1], truth.shape[0] * truth.shape[2])
    return float(covered.mean()), float(bounds.width.mean()), per_step, counts
