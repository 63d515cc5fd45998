# evalkit/reports.py
"""CSV outputs of evaluation and forecasting runs"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from numkit.exceptions import DomainError

from .metrics import dist_mse, intervals_from_samples, mse, picp_mpiw
from .predictive import evaluate_unistep, forecast_split

METRICS_FILE = 'metrics.csv'
PICP_FILE = 'picp_per_timestep.csv'
SAMPLES_FILE = 'samples.csv'
INTERVALS_FILE = 'intervals.csv'

METRIC_COLUMNS = ['metric', 'value']
PICP_COLUMNS = ['t', 'picp', 'n']


@dataclass(frozen=True, eq=False)
class MetricsReport:
    """
    Scores of one evaluation. Metrics that do not apply stay None and are
    left out of the CSV (dist_mse without synthetic truth, interval metrics
    for the deterministic model).
    """
    mse: float
    dist_mse: Optional[float] = None
    picp: Optional[float] = None
    mpiw: Optional[float] = None
    picp_per_timestep: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    steps: tuple = ()
    n_series: int = 0

    def __post_init__(self):
        if self.picp is not None and not 0.0 <= self.picp <= 1.0:
            raise DomainError(f'PICP must lie in [0, 1], got {self.picp}')
        if self.mpiw is not None and self.mpiw < 0:
            raise DomainError(f'MPIW must be non-negative, got {self.mpiw}')

    def as_dict(self):
        values = {'mse': self.mse, 'dist_mse': self.dist_mse, 'picp': self.picp, 'mpiw': self.mpiw}
        return {name: value for name, value in values.items() if value is not None}

    def to_frame(self):
        rows = list(self.as_dict().items()) + [('n_series', self.n_series)]
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)

    def picp_frame(self):
        if self.picp_per_timestep is None:
            return None
        return pd.DataFrame({'t': list(self.steps), 'picp': self.picp_per_timestep, 'n': self.counts}, columns=PICP_COLUMNS)

    def write(self, output_dir):
        """Write metrics.csv (and picp_per_timestep.csv when intervals were scored)"""
        output_dir = Path(output_dir)
        paths = [output_dir / METRICS_FILE]
        self.to_frame().to_csv(paths[0], index=False)
        frame = self.picp_frame()
        if frame is not None:
            paths.append(output_dir / PICP_FILE)
            frame.to_csv(paths[1], index=False)
        return paths


def samples_frame(samples, series_ids, feature_names):
    """Long format: one row per (series, target step, draw)"""
    draws = samples.draws
    n_series, n_steps, n_samples, _ = draws.shape
    index = pd.MultiIndex.from_product(
        [list(series_ids), list(samples.steps), range(n_samples)],
        names=['series_id', 't', 'draw_id'],
    )
    frame = pd.DataFrame(draws.reshape(-1, draws.shape[-1]), index=index, columns=list(feature_names))
    return frame.reset_index()


def intervals_frame(bounds, series_ids, steps, feature_names, point=None):
    """One row per (series, target step): <feature>_lower, <feature>_upper and optionally <feature>_mean"""
    n_series, n_steps = bounds.lower.shape[:2]
    frame = pd.DataFrame({
        'series_id': np.repeat(list(series_ids), n_steps),
        't': np.tile(list(steps), n_series),
    })
    for position, name in enumerate(feature_names):
        if point is not None:
            frame[f'{name}_mean'] = point[..., position].reshape(-1)
        frame[f'{name}_lower'] = bounds.lower[..., position].reshape(-1)
        frame[f'{name}_upper'] = bounds.upper[..., position].reshape(-1)
    return frame


def write_frame(frame, path):
    frame.to_csv(path, index=False)
    return Path(path)


def unistep_report(dataset, split, params, config, n_samples, level, rng, threads=1):
    """
    Score one-step predictions (filtered on observed values) of a split on the original scale.

    Returns:
        (MetricsReport, indices of the scored sequences, raw PredictiveSamples or None)
    """
    indices, predictions, samples = evaluate_unistep(dataset, split, params, config, n_samples, rng, threads)
    observed = dataset.raw(dataset.observations[indices])
    truth = observed[:, 1:]
    scores = {'mse': mse(dataset.raw(predictions), truth)}
    if samples is not None:
        samples = samples.map(dataset.raw)
        if dataset.synthetic is not None:
            scores['dist_mse'] = dist_mse(samples.draws, observed[:, :-1], dataset.synthetic)
        picp, mpiw, per_step, counts = picp_mpiw(intervals_from_samples(samples.draws, level), truth)
        scores.update(picp=picp, mpiw=mpiw, picp_per_timestep=per_step, counts=counts)
    report = MetricsReport(steps=tuple(range(2, dataset.length + 1)), n_series=len(indices), **scores)
    return report, indices, samples


@dataclass(frozen=True, eq=False)
class ForecastOutput:
    indices: np.ndarray
    samples: object
    bounds: object
    report: Optional[MetricsReport] = None


def forecast_report(dataset, split, params, config, history, horizon, n_samples, level, rng, threads=1):
    """
    Multistep forecasts on the original scale, scored where the horizon is observed.

    Returns:
        ForecastOutput; report is None when τ_H + τ_F runs past the data
    """
    indices, samples = forecast_split(dataset, split, params, config, history, horizon, n_samples, rng, threads)
    samples = samples.map(dataset.raw)
    bounds = intervals_from_samples(samples.draws, level)
    report = None
    if history + horizon <= dataset.length:
        truth = dataset.raw(dataset.observations[indices])[:, history:history + horizon]
        picp, mpiw, per_step, counts = picp_mpiw(bounds, truth)
        report = MetricsReport(
            mse=mse(samples.draws.mean(axis=2), truth), picp=picp, mpiw=mpiw,
            picp_per_timestep=per_step, counts=counts, steps=samples.steps, n_series=len(indices),
        )
    return ForecastOutput(indices=indices, samples=samples, bounds=bounds, report=report)
