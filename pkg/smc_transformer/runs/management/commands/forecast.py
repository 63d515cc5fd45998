# runs/management/commands/forecast.py
from dataio.datasets import SPLITS, TEST
from evalkit.reports import INTERVALS_FILE, SAMPLES_FILE, forecast_report, intervals_frame, samples_frame, write_frame
from numkit.exceptions import ConfigError
from numkit.rng import SeededRng
from trainer.checkpoint import load_checkpoint
from runs.utils import RunCommand, existing_path, load_dataset, restore_dataset


class Command(RunCommand):
    help = 'Multistep forecasts with predictive intervals from a trained SMC Transformer'
    command_name = 'forecast'

    def add_run_arguments(self, parser):
        self.add_data_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--checkpoint', help='checkpoint.npz written by train')
        parser.add_argument('--split', choices=SPLITS, help='Split to forecast (default test)')
        parser.add_argument('--history', type=int, help='Observed steps τ_H (default half the series)')
        parser.add_argument('--horizon', type=int, help='Forecast steps τ_F (default the rest of the series)')
        parser.add_argument('--n-samples', type=int, help='Sample paths per series')
        parser.add_argument('--coverage', type=float, help='Nominal interval coverage (default 0.95)')

    def run(self, config, output_dir):
        checkpoint = load_checkpoint(existing_path(config.get('checkpoint'), 'Checkpoint'))
        if checkpoint.model_type != 'smc':
            raise ConfigError('Forecast intervals need a stochastic (smc) checkpoint')
        dataset = restore_dataset(load_dataset(config), checkpoint)
        train_config = config.train_config(base=checkpoint.config, model_type=checkpoint.model_type)
        history = config.get('history', dataset.length // 2)
        horizon = config.get('horizon', dataset.length - history)
        output = forecast_report(
            dataset, config.get('split', TEST), checkpoint.params, train_config,
            history=history, horizon=horizon,
            n_samples=config.get('n_samples'), level=config.get('coverage'),
            rng=SeededRng(config.seed).child('forecast'), threads=train_config.threads,
        )
        series_ids = [dataset.series_ids[index] for index in output.indices]
        write_frame(samples_frame(output.samples, series_ids, dataset.feature_names), output_dir / SAMPLES_FILE)
        write_frame(
            intervals_frame(output.bounds, series_ids, output.samples.steps, dataset.feature_names,
                            point=output.samples.draws.mean(axis=2)),
            output_dir / INTERVALS_FILE,
        )
        outputs = [SAMPLES_FILE, INTERVALS_FILE]
        if output.report is None:
            self.stdout.write(self.style.WARNING('Horizon runs past the data; forecasts are not scored'))
        else:
            outputs += [path.name for path in output.report.write(output_dir)]
            for name, value in output.report.as_dict().items():
                self.stdout.write(f'{name}: {value:.6f}')
        return outputs
