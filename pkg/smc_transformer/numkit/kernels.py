# numkit/kernels.py
"""
Dense kernels used by the attention cell, the filter and the tape.

All kernels act on the last axis (or the last two for windows) and accept any
number of leading batch axes, so the same code evaluates one particle, a cloud
of particles, or a batch of clouds.
"""
import math

import numpy as np

from .exceptions import DomainError

LOG_2PI = math.log(2.0 * math.pi)


def as_array(values):
    return np.asarray(values, dtype=np.float64)


def softmax(logits, axis=-1):
    """
    Numerically stable softmax.

    Equal logits give exactly equal probabilities; large logits do not overflow.
    """
    logits = as_array(logits)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DomainError('softmax of an empty array')
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    weights = np.exp(shifted)
    return weights / np.sum(weights, axis=axis, keepdims=True)


def logsumexp(values, axis=-1):
    values = as_array(values)
    peak = np.max(values, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    total = np.log(np.sum(np.exp(values - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(total, axis=axis)


def gaussian_sample(mean, std, rng, eps=None):
    """
    Draw mean + std * eps with eps ~ N(0, I).

    Returns:
        (sample, eps); eps is kept for reparametrised replay
    """
    if std < 0:
        raise DomainError(f'Standard deviation must be non-negative, got {std}')
    mean = as_array(mean)
    if eps is None:
        eps = rng.normal(mean.shape)
    return mean + std * eps, eps


def log_gaussian_density(x, mean, var):
    """Isotropic Gaussian log-density log N(x; mean, var * I), reduced over the last axis"""
    if var <= 0:
        raise DomainError(f'Variance must be positive, got {var}')
    residual = as_array(x) - as_array(mean)
    dim = residual.shape[-1]
    return -0.5 * dim * (LOG_2PI + math.log(var)) - np.sum(residual * residual, axis=-1) / (2.0 * var)


def squared_norm(values):
    values = as_array(values)
    return np.sum(values * values, axis=-1)


def linear(x, weight):
    """Affine map without bias: x @ W^T (W stored as out_features x in_features)"""
    x = as_array(x)
    weight = as_array(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise DomainError(f'Input of size {x.shape[-1]} does not match weight {weight.shape}')
    return x @ weight.T


def relu(x):
    return np.maximum(as_array(x), 0.0)


def layer_norm(x, gain, bias, epsilon):
    """Layer normalisation over the last axis; a constant input maps to `bias`"""
    x = as_array(x)
    centered = x - np.mean(x, axis=-1, keepdims=True)
    variance = np.mean(centered * centered, axis=-1, keepdims=True)
    return gain * (centered / np.sqrt(variance + epsilon)) + bias


def attention_scores(query, keys):
    """<q, κ_s> for every window slot s: (..., r) x (..., L, r) -> (..., L)"""
    return np.einsum('...r,...lr->...l', as_array(query), as_array(keys))


def attend(probabilities, values):
    """Σ_s π_s v_s: (..., L) x (..., L, r) -> (..., r)"""
    return np.einsum('...l,...lr->...r', as_array(probabilities), as_array(values))


def gather_particles(values, index):
    """
    Select particles per sequence.

    Args:
        values: array (B, M, ...)
        index: int array (B, K)

    Returns:
        array (B, K, ...) with out[b, k] = values[b, index[b, k]]
    """
    values = np.asarray(values)
    index = np.asarray(index)
    rows = np.arange(values.shape[0])[:, None]
    return values[rows, index]


def window_push(new, window, maxlen):
    """Prepend `new` (..., r) to a most-recent-first window (..., L, r), keeping `maxlen` slots"""
    new = as_array(new)[..., None, :]
    if window is None:
        return new
    return np.concatenate([new, as_array(window)], axis=-2)[..., :maxlen, :]


class ArrayOps:
    """
    Kernel namespace over plain arrays.

    diffcore.TapeOps exposes the same method names over tape nodes, so model
    code written against `ops` runs untaped or taped unchanged.
    """

    @staticmethod
    def constant(value):
        return as_array(value)

    @staticmethod
    def stop_gradient(value):
        return value

    @staticmethod
    def add(a, b):
        return np.add(a, b)

    @staticmethod
    def sub(a, b):
        return np.subtract(a, b)

    @staticmethod
    def mul(a, b):
        return np.multiply(a, b)

    @staticmethod
    def scale(a, factor):
        return np.multiply(a, factor)

    @staticmethod
    def square(a):
        return np.multiply(a, a)

    @staticmethod
    def sum(a):
        return np.sum(a)

    linear = staticmethod(linear)
    relu = staticmethod(relu)
    layer_norm = staticmethod(layer_norm)
    softmax = staticmethod(softmax)
    attention_scores = staticmethod(attention_scores)
    attend = staticmethod(attend)
    gaussian_sample = staticmethod(gaussian_sample)
    gather_particles = staticmethod(gather_particles)
    window_push = staticmethod(window_push)
    log_gaussian_density = staticmethod(log_gaussian_density)


ARRAY_OPS = ArrayOps()
