# dataio/datasets.py
"""
Series datasets: observations, split assignment and normalisation statistics.

Datasets are immutable; every transformation returns a new instance.
"""
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from numkit.exceptions import DomainError, SchemaError
from numkit.rng import SeededRng

TRAIN = 'train'
VALIDATION = 'validation'
TEST = 'test'
SPLITS = (TRAIN, VALIDATION, TEST)
SPLIT_DTYPE = '<U10'

DEFAULT_SPLIT_RATIOS = (0.7, 0.15, 0.15)
SYNTHETIC_SPLIT_RATIOS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class NormStats:
    """Per-feature mean and standard deviation of the training rows"""
    mean: tuple
    std: tuple

    def normalize(self, values):
        return (np.asarray(values, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)

    def denormalize(self, values):
        return np.asarray(values, dtype=np.float64) * np.asarray(self.std) + np.asarray(self.mean)


@dataclass(frozen=True, eq=False)
class SeriesDataset:
    """
    n_series sequences of equal length T with d features.

    Fields:
        observations: array (n_series, T, d), normalised when norm_stats is set
        series_ids: one label per sequence
        feature_names: one label per feature
        split: per-sequence split label (train / validation / test)
        norm_stats: NormStats, or None for data kept on its raw scale
        synthetic: SyntheticSpec of the generator, when known
        dropped_rows: rows discarded for missing values while loading
    """
    observations: np.ndarray
    series_ids: tuple
    feature_names: tuple
    split: Optional[np.ndarray] = None
    norm_stats: Optional[NormStats] = None
    synthetic: Optional[object] = None
    dropped_rows: int = 0
    source: str = field(default='')

    def __post_init__(self):
        split = np.full(len(self.series_ids), TRAIN) if self.split is None else self.split
        object.__setattr__(self, 'split', np.asarray(split, dtype=SPLIT_DTYPE))
        self.validate()

    @property
    def n_series(self):
        return self.observations.shape[0]

    @property
    def length(self):
        return self.observations.shape[1]

    @property
    def n_features(self):
        return self.observations.shape[2]

    def validate(self):
        if self.observations.ndim != 3:
            raise SchemaError(f'Observations must be (series, time, features), got {self.observations.shape}')
        if len(self.series_ids) != self.n_series:
            raise SchemaError('One series id per sequence is required')
        if len(self.feature_names) != self.n_features:
            raise SchemaError('One feature name per feature is required')
        if len(self.split) != self.n_series or not set(np.unique(self.split)) <= set(SPLITS):
            raise SchemaError(f'Split labels must be one of {SPLITS} for every sequence')
        if not np.all(np.isfinite(self.observations)):
            raise SchemaError('Observations contain non-finite values')
        return self

    def indices(self, split):
        if split not in SPLITS:
            raise DomainError(f'Unknown split {split!r}')
        return np.flatnonzero(self.split == split)

    def subset(self, split):
        return self.observations[self.indices(split)]

    def with_split(self, split):
        return replace(self, split=np.asarray(split))

    def raw(self, values):
        """Values on the original scale"""
        return values if self.norm_stats is None else self.norm_stats.denormalize(values)


def split_sizes(n_series, ratios):
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DomainError(f'Split ratios must be three non-negative numbers summing to 1, got {ratios}')
    n_train = int(round(n_series * ratios[0]))
    n_validation = int(round(n_series * ratios[1]))
    sizes = (n_train, n_validation, n_series - n_train - n_validation)
    if min(sizes) <= 0:
        raise DomainError(f'Split of {n_series} series by {ratios} leaves an empty split {sizes}')
    return sizes


def split_normalize(dataset, ratios=DEFAULT_SPLIT_RATIOS, seed=0, normalize=None):
    """
    Shuffle series by seed into train / validation / test and standardise
    every feature with statistics of the training rows only.

    Synthetic datasets are not normalised unless `normalize` is True.
    """
    sizes = split_sizes(dataset.n_series, ratios)
    order = SeededRng(seed).child('split').permutation(dataset.n_series)
    split = np.empty(dataset.n_series, dtype=object)
    split[order[:sizes[0]]] = TRAIN
    split[order[sizes[0]:sizes[0] + sizes[1]]] = VALIDATION
    split[order[sizes[0] + sizes[1]:]] = TEST
    split = split.astype(str)
    if normalize is None:
        normalize = dataset.synthetic is None
    raw = dataset.raw(dataset.observations)
    if not normalize:
        return replace(dataset, observations=raw, split=split, norm_stats=None)
    train_rows = raw[split == TRAIN].reshape(-1, dataset.n_features)
    mean = train_rows.mean(axis=0)
    std = train_rows.std(axis=0)
    if np.any(std <= 0):
        constant = [name for name, value in zip(dataset.feature_names, std) if value <= 0]
        raise DomainError(f'Features {constant} are constant on the training split and cannot be normalised')
    stats = NormStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()))
    return replace(dataset, observations=stats.normalize(raw), split=split, norm_stats=stats)


def iter_batches(indices, batch_size, rng=None):
    """Yield index arrays of at most batch_size, shuffled when rng is given"""
    if batch_size < 1:
        raise DomainError('batch_size must be at least 1')
    indices = np.asarray(indices)
    if rng is not None:
        indices = rng.permutation(indices)
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def fold_assignment(indices, n_folds, rng):
    """Split indices into n_folds shuffled, near-equal folds"""
    indices = np.asarray(indices)
    if n_folds < 2 or n_folds > len(indices):
        raise DomainError(f'Cannot make {n_folds} folds from {len(indices)} series')
    return [np.sort(fold) for fold in np.array_split(rng.permutation(indices), n_folds)]
