# numkit/rng.py
"""
Seeded, splittable random streams.

Every stream is a Philox counter-based generator keyed by (seed, key path).
Child streams are derived by extending the key path, never by drawing from the
parent, so resampling one particle cannot shift the noise of another.
"""
import zlib

import numpy as np

from .exceptions import DomainError

MASK64 = (1 << 64) - 1

# Stable integer ids for the noise sources of the attention cell
NOISE_SOURCES = {
    'resample': 0,
    'q': 1,
    'k': 2,
    'v': 3,
    'z': 4,
    'obs': 5,
    'select': 6,
    'input': 7,
}


def _key_part(part):
    """Map a key component to a non-negative int (strings through crc32, never hash())"""
    if isinstance(part, str):
        return NOISE_SOURCES.get(part, zlib.crc32(part.encode('utf-8')) + 1000)
    value = int(part)
    if value < 0:
        raise DomainError(f'Stream key components must be non-negative, got {value}')
    return value


class SeededRng:
    """
    Single-owner random stream.

    Args:
        seed: 64-bit unsigned seed
        key: key path identifying an independent sub-stream
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed) & MASK64
        self.key = tuple(_key_part(part) for part in key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self):
        return f'SeededRng(seed={self.seed}, key={self.key})'

    def child(self, *key):
        """Independent sub-stream for the given key path"""
        return SeededRng(self.seed, self.key + tuple(_key_part(part) for part in key))

    def normal(self, shape):
        return self._generator.standard_normal(shape)

    def uniform(self, shape=None):
        return self._generator.random(shape)

    def bernoulli(self, p, shape):
        return (self._generator.random(shape) < p).astype(np.float64)

    def choice(self, n, size, p=None):
        return self._generator.choice(n, size=size, p=p)

    def permutation(self, values):
        return self._generator.permutation(values)


def as_streams(rng, batch_size):
    """
    Per-sequence streams for a batch.

    A single SeededRng is split by batch position; a sequence of streams is
    passed through after a length check.
    """
    if isinstance(rng, SeededRng):
        return [rng.child(index) for index in range(batch_size)]
    streams = list(rng)
    if len(streams) != batch_size:
        raise DomainError(f'Expected {batch_size} random streams, got {len(streams)}')
    return streams


def batch_normal(streams, key, shape):
    """Stack standard normal draws of `shape`, one keyed child stream per sequence"""
    return np.stack([stream.child(*key).normal(shape) for stream in streams])
