# runs/management/commands/diagnose.py
import logging

from attention.params import init_params
from dataio.datasets import split_normalize
from numkit.rng import SeededRng
from smc.diagnostics import unique_ancestors
from smc.filter import filter_sequence, select
from trainer.checkpoint import load_checkpoint
from runs.utils import RunCommand, existing_path, load_dataset, restore_dataset, split_ratios

logger = logging.getLogger(__name__)

ANCESTRY_FILE = 'ancestry.csv'


class Command(RunCommand):
    help = 'Count distinct particle ancestors per lag (particle degeneracy)'
    command_name = 'diagnose'

    def add_run_arguments(self, parser):
        self.add_data_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--checkpoint', help='Trained model; an untrained one is drawn from the seed otherwise')
        parser.add_argument('--max-lag', type=int, help='Deepest lag to trace (default the series length)')
        parser.add_argument('--depth', type=int, help='Latent dimension of the untrained model')
        parser.add_argument('--ff-units', type=int, help='Feed-forward units of the untrained model')

    def run(self, config, output_dir):
        dataset = load_dataset(config)
        if config.get('checkpoint'):
            checkpoint = load_checkpoint(existing_path(config.get('checkpoint'), 'Checkpoint'))
            dataset = restore_dataset(dataset, checkpoint)
            params = checkpoint.params
            train_config = config.train_config(base=checkpoint.config)
        else:
            logger.warning('No checkpoint given; tracing an untrained model drawn from seed %d', config.seed)
            if dataset.synthetic is None:
                dataset = split_normalize(dataset, split_ratios(config, dataset), seed=config.seed)
            train_config = config.train_config()
            params = init_params(
                dataset.n_features, dataset.n_features, SeededRng(config.seed).child('init'),
                depth=train_config.depth, ff_units=train_config.ff_units,
                initial_variance=train_config.initial_variance,
            )
        rng = SeededRng(config.seed).child('diagnose')
        streams = [rng.child(index) for index in range(dataset.n_series)]
        result = filter_sequence(dataset.observations, params, train_config.particles, train_config.lag, streams)
        # one more selection so the last step's ancestry is traced too
        cloud = select(result.cloud, streams)
        report = unique_ancestors(cloud, config.get('max_lag', dataset.length))
        report.write_csv(output_dir / ANCESTRY_FILE)
        frame = report.to_frame()
        self.stdout.write(
            f'{dataset.n_series} series, {train_config.particles} particles: '
            f'{frame["mean_unique"].iloc[0]:.1f} distinct ancestors at lag 1, '
            f'{frame["mean_unique"].iloc[-1]:.1f} at lag {report.n_lags}'
        )
        return [ANCESTRY_FILE]
