# runs/management/commands/eval.py
import logging

from dataio.datasets import SPLITS, TEST
from evalkit.reports import SAMPLES_FILE, samples_frame, unistep_report, write_frame
from numkit.rng import SeededRng
from trainer.checkpoint import load_checkpoint
from runs.utils import RunCommand, existing_path, load_dataset, restore_dataset

logger = logging.getLogger(__name__)


class Command(RunCommand):
    help = 'Score unistep predictions of a trained model: MSE, dist-MSE, PICP and MPIW'
    command_name = 'eval'

    def add_run_arguments(self, parser):
        self.add_data_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--checkpoint', help='checkpoint.npz written by train')
        parser.add_argument('--split', choices=SPLITS, help='Split to score (default test)')
        parser.add_argument('--n-samples', type=int, help='Predictive draws per step')
        parser.add_argument('--coverage', type=float, help='Nominal interval coverage (default 0.95)')
        parser.add_argument('--save-samples', action='store_true', default=None, help='Also write samples.csv')

    def run(self, config, output_dir):
        checkpoint = load_checkpoint(existing_path(config.get('checkpoint'), 'Checkpoint'))
        dataset = restore_dataset(load_dataset(config), checkpoint)
        train_config = config.train_config(base=checkpoint.config, model_type=checkpoint.model_type)
        split = config.get('split', TEST)
        report, indices, samples = unistep_report(
            dataset, split, checkpoint.params, train_config,
            n_samples=config.get('n_samples'), level=config.get('coverage'),
            rng=SeededRng(config.seed).child('eval'), threads=train_config.threads,
        )
        outputs = [path.name for path in report.write(output_dir)]
        if config.get('save_samples') and samples is not None:
            series_ids = [dataset.series_ids[index] for index in indices]
            write_frame(samples_frame(samples, series_ids, dataset.feature_names), output_dir / SAMPLES_FILE)
            outputs.append(SAMPLES_FILE)
        for name, value in report.as_dict().items():
            self.stdout.write(f'{name}: {value:.6f}')
        logger.info('Scored %d %s series of %s', report.n_series, split, dataset.source)
        return outputs
