# dataio/csv_io.py
"""
Long-format CSV ingestion and export.

Schema: header `series_id,t,f0,f1,...`, one row per (series, timestep), rows
sorted by (series_id, t), UTF-8, `.` as the decimal separator. A synthetic
dataset is exported with a `<name>.synthetic.json` sidecar holding its
generator spec.
"""
import json
import logging
import re
from pathlib import Path

import numpy as np
import pandas as pd

from numkit.exceptions import CsvParseError, SchemaError

from .datasets import SeriesDataset
from .synthetic import SyntheticSpec

logger = logging.getLogger(__name__)

KEY_COLUMNS = ['series_id', 't']
MISSING_TOKENS = {'', 'na', 'nan', 'null'}


def sidecar_path(path):
    path = Path(path)
    return path.with_name(f'{path.stem}.synthetic.json')


def _read_frame(path):
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.EmptyDataError as exc:
        raise CsvParseError('File is empty', line=1) from exc
    except pd.errors.ParserError as exc:
        match = re.search(r'line (\d+)', str(exc))
        raise CsvParseError(f'Malformed row: {exc}', line=int(match.group(1)) if match else None) from exc


def _check_header(frame, columns):
    header = list(frame.columns)
    if header[:2] != KEY_COLUMNS or len(header) < 3:
        raise CsvParseError(f'Header must start with series_id,t and name at least one feature, got {header}', line=1)
    features = header[2:]
    if columns:
        unknown = [name for name in columns if name not in features]
        if unknown:
            raise SchemaError(f'Unknown feature columns {unknown}; file has {features}')
        features = list(columns)
    return features


def _parse_values(frame, features):
    """Numeric feature matrix and a mask of rows with missing cells"""
    values = np.empty((len(frame), len(features)))
    missing = np.zeros(len(frame), dtype=bool)
    for position, name in enumerate(features):
        cells = frame[name]
        if cells.isna().any():
            row = int(np.flatnonzero(cells.isna().to_numpy())[0])
            raise CsvParseError('Row has too few fields', line=row + 2, column=name)
        is_missing = cells.str.strip().str.lower().isin(MISSING_TOKENS).to_numpy()
        numbers = pd.to_numeric(cells.where(~is_missing), errors='coerce').to_numpy(dtype=np.float64)
        bad = ~is_missing & ~np.isfinite(numbers)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise CsvParseError(f'Unparsable value {cells.iloc[row]!r}', line=row + 2, column=name)
        values[:, position] = numbers
        missing |= is_missing
    return values, missing


def _check_contiguous(frame):
    ids = frame['series_id'].to_numpy()
    starts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
    seen = {ids[0]} if len(ids) else set()
    for start in starts:
        if ids[start] in seen:
            raise SchemaError(f'Rows of series {ids[start]!r} are not contiguous (line {frame.index[start] + 2})')
        seen.add(ids[start])


def _windows(total, length, stride):
    return list(range(0, total - length + 1, stride))


def load_csv(path, length=None, stride=None, columns=None):
    """
    Read a long-format CSV into a SeriesDataset.

    Args:
        path: CSV file
        length: window length; every series is cut into windows of this length
            (all series must share one length when omitted)
        stride: window stride, defaults to `length` (non-overlapping)
        columns: feature columns to keep, in order (all by default)

    Raises:
        CsvParseError: malformed header or row, unparsable cell (row and column named)
        SchemaError: inconsistent series lengths, unknown columns, unsorted time index,
            rows of one series split by another
    """
    frame = _read_frame(path)
    features = _check_header(frame, columns)
    times = pd.to_numeric(frame['t'], errors='coerce')
    if times.isna().any():
        row = int(np.flatnonzero(times.isna().to_numpy())[0])
        raise CsvParseError(f'Unparsable time index {frame["t"].iloc[row]!r}', line=row + 2, column='t')
    values, missing = _parse_values(frame, features)
    dropped = int(missing.sum())
    if dropped:
        logger.warning('Dropped %d rows with missing values from %s', dropped, path)
    frame = frame.assign(t=times)[~missing]
    values = values[~missing]
    _check_contiguous(frame)
    sequences, ids = [], []
    for series_id, rows in frame.groupby('series_id', sort=False).indices.items():
        if np.any(np.diff(frame['t'].to_numpy()[rows]) <= 0):
            raise SchemaError(f'Rows of series {series_id!r} are not sorted by t')
        sequences.append(values[rows])
        ids.append(str(series_id))
    if not sequences:
        raise SchemaError(f'{path} holds no complete rows')
    if length is None:
        lengths = {len(sequence) for sequence in sequences}
        if len(lengths) != 1:
            raise SchemaError(f'Series lengths differ {sorted(lengths)}; pass a window length')
        windows, window_ids = sequences, ids
    else:
        stride = stride or length
        if length < 2 or stride < 1:
            raise SchemaError('Window length must be at least 2 and stride at least 1')
        windows, window_ids = [], []
        for series_id, sequence in zip(ids, sequences):
            for start in _windows(len(sequence), length, stride):
                windows.append(sequence[start:start + length])
                window_ids.append(f'{series_id}@{start}')
        if not windows:
            raise SchemaError(f'No series is long enough for windows of length {length}')
    synthetic = None
    if sidecar_path(path).exists():
        synthetic = SyntheticSpec.from_dict(json.loads(sidecar_path(path).read_text()))
    return SeriesDataset(
        observations=np.stack(windows),
        series_ids=tuple(window_ids),
        feature_names=tuple(features),
        synthetic=synthetic,
        dropped_rows=dropped,
        source=str(path),
    )


def dataset_frame(dataset, observations=None):
    """Long-format frame of a dataset (raw scale), t counted from 1"""
    observations = dataset.raw(dataset.observations) if observations is None else observations
    n_series, length, _ = observations.shape
    frame = pd.DataFrame({
        'series_id': np.repeat(np.asarray(dataset.series_ids), length),
        't': np.tile(np.arange(1, length + 1), n_series),
    })
    for position, name in enumerate(dataset.feature_names):
        frame[name] = observations[:, :, position].reshape(-1)
    return frame


def export_csv(dataset, path):
    """Write the dataset in the CSV schema, plus the synthetic sidecar when known"""
    path = Path(path)
    dataset_frame(dataset).to_csv(path, index=False)
    if dataset.synthetic is not None:
        sidecar_path(path).write_text(json.dumps(dataset.synthetic.as_dict(), indent=2, sort_keys=True))
    return path
