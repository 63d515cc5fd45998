# runs/utils.py
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError
from django.utils import timezone

from dataio.csv_io import load_csv
from dataio.datasets import SYNTHETIC_SPLIT_RATIOS, TEST, split_normalize
from numkit.exceptions import ConfigError, SchemaError, SmcTransformerError
from trainer.checkpoint import FORMAT_VERSION
from trainer.config import TrainConfig

from .config import resolve_config
from .models import ExperimentRun

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
CSV_FORMAT_VERSION = 1

# Options every Django command has; they are not run settings
DJANGO_OPTIONS = {
    'verbosity', 'settings', 'pythonpath', 'traceback', 'no_color', 'force_color', 'skip_checks', 'config',
}


def write_manifest(output_dir, config, outputs):
    """manifest.json: resolved config, seed, format versions and the files written (no timestamps)"""
    manifest = {
        'command': config.command,
        'seed': config.seed,
        'config': config.values,
        'formats': {'checkpoint': FORMAT_VERSION, 'csv': CSV_FORMAT_VERSION},
        'outputs': sorted(str(name) for name in outputs),
    }
    path = Path(output_dir) / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + '\n', encoding='utf-8')
    return path


def start_run(config, output_dir):
    """Record the run; the registry is best effort"""
    try:
        return ExperimentRun.objects.create(
            command=config.command,
            seed=config.seed,
            output_dir=str(output_dir),
            config=json.loads(json.dumps(config.values, default=str)),
        )
    except DatabaseError as exc:
        logger.warning('Could not record the %s run: %s', config.command, exc)
        return None


def finish_run(run, status, message=''):
    if run is None:
        return
    run.status = status
    run.message = message
    run.finished_at = timezone.now()
    try:
        run.save(update_fields=['status', 'message', 'finished_at'])
    except DatabaseError as exc:
        logger.warning('Could not update run %s: %s', run.pk, exc)


def existing_path(value, what):
    if not value:
        raise ConfigError(f'{what} is required')
    path = Path(value)
    if not path.exists():
        raise ConfigError(f'{what} {path} does not exist')
    return path


def load_dataset(config):
    return load_csv(
        existing_path(config.get('data'), 'Data file'),
        length=config.get('length'),
        stride=config.get('stride'),
        columns=[name.strip() for name in config.get('columns').split(',')] if config.get('columns') else None,
    )


def split_ratios(config, dataset):
    """Explicit ratios win; otherwise synthetic data uses 0.8/0.1/0.1 and CSV data the settings default"""
    if 'split_ratios' in config.explicit or dataset.synthetic is None:
        return tuple(config.get('split_ratios'))
    return SYNTHETIC_SPLIT_RATIOS


def restore_dataset(dataset, checkpoint):
    """
    Put a freshly loaded dataset on the footing of the training run: the
    checkpoint's split assignment and normalisation statistics.

    Data with other series than the training data is scored as a whole
    (every series in the test split).
    """
    raw = dataset.raw(dataset.observations)
    if checkpoint.series_ids and tuple(checkpoint.series_ids) == tuple(dataset.series_ids):
        split = checkpoint.split
    else:
        logger.warning('Series of %s differ from the training data; all %d series are scored', dataset.source, dataset.n_series)
        split = np.full(dataset.n_series, TEST)
    stats = checkpoint.norm_stats
    if stats is not None and len(stats.mean) != dataset.n_features:
        raise SchemaError(f'Checkpoint was trained on {len(stats.mean)} features, data has {dataset.n_features}')
    observations = stats.normalize(raw) if stats is not None else raw
    return replace(dataset, observations=observations, split=split, norm_stats=stats)


def prepare_dataset(config):
    dataset = load_dataset(config)
    return split_normalize(dataset, split_ratios(config, dataset), seed=config.seed)


class RunCommand(BaseCommand):
    """
    Shared plumbing of the run commands: config resolution, output directory,
    manifest and run registry.

    Subclasses add their flags (default None, so unset flags fall through to
    the config file and settings) and implement run(config, output_dir),
    returning the names of the files written.
    """
    command_name = None

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=int, help='Random seed (required here or in the config file)')
        parser.add_argument('--config', help='JSON or key = value config file')
        parser.add_argument('--output-dir', help='Directory for the output files')
        parser.add_argument('--threads', type=int, help='Worker threads (falls back to SMCT_THREADS)')
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser):
        pass

    def add_model_arguments(self, parser):
        parser.add_argument('--particles', type=int, help='Number of particles M')
        parser.add_argument('--lag', type=int, help='Attention window Δ')

    def add_data_arguments(self, parser):
        parser.add_argument('--data', help='CSV file with columns series_id,t,f0,...')
        parser.add_argument('--length', type=int, help='Cut series into windows of this length')
        parser.add_argument('--stride', type=int, help='Window stride (defaults to the length)')
        parser.add_argument('--columns', help='Comma-separated feature columns to use')

    def run(self, config, output_dir):
        raise NotImplementedError

    def handle(self, *args, **options):
        flags = {key: value for key, value in options.items() if key not in DJANGO_OPTIONS}
        allowed = set(flags) | set(TrainConfig.__dataclass_fields__) | {'n_samples', 'coverage', 'split_ratios', 'output_dir'}
        try:
            config = resolve_config(self.command_name, flags, allowed, options.get('config'))
        except SmcTransformerError as exc:
            raise CommandError(str(exc)) from exc

        output_dir = Path(config.get('output_dir'))
        output_dir.mkdir(parents=True, exist_ok=True)
        run = start_run(config, output_dir)
        try:
            outputs = self.run(config, output_dir)
        except SmcTransformerError as exc:
            finish_run(run, ExperimentRun.Status.FAILED, str(exc))
            raise CommandError(str(exc)) from exc
        except Exception as exc:
            finish_run(run, ExperimentRun.Status.FAILED, repr(exc))
            raise

        write_manifest(output_dir, config, outputs)
        finish_run(run, ExperimentRun.Status.SUCCEEDED)
        self.stdout.write(self.style.SUCCESS(
            f'{self.command_name} finished: {", ".join(sorted(str(name) for name in outputs))} in {output_dir}'
        ))
