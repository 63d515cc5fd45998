# runs/management/commands/generate.py
"""
Write a synthetic dataset in the CSV schema.

    python manage.py generate --model I --alpha 0.8 --sigma2 0.5 --n 1000 --T 24 --seed 1
"""
from dataio.csv_io import export_csv, sidecar_path
from dataio.synthetic import MODEL_DEFAULTS, SyntheticSpec, gen_from_model, generate
from trainer.checkpoint import load_checkpoint
from runs.utils import RunCommand, existing_path

MODEL_SOURCE = 'model'


class Command(RunCommand):
    help = 'Generate synthetic sequences (Model I, Model II, or a trained attention model)'
    command_name = 'generate'

    def add_run_arguments(self, parser):
        parser.add_argument('--model', choices=sorted(MODEL_DEFAULTS) + [MODEL_SOURCE], help='Data generating process')
        parser.add_argument('--alpha', type=float, help='Autoregressive coefficient α')
        parser.add_argument('--beta', type=float, help='Second regime coefficient β (Model II)')
        parser.add_argument('--sigma2', type=float, help='Noise variance σ²')
        parser.add_argument('--p', type=float, help='Probability of the α regime (Model II)')
        parser.add_argument('--n', dest='n_series', type=int, help='Number of sequences')
        parser.add_argument('--T', dest='length', type=int, help='Sequence length')
        parser.add_argument('--lag', type=int, help='Attention window for --model model')
        parser.add_argument('--checkpoint', help='Checkpoint to sample from with --model model')
        parser.add_argument('--output', help='CSV file name inside the output directory')

    def run(self, config, output_dir):
        model = config.get('model', 'I')
        n_series = config.get('n_series', 1000)
        length = config.get('length', 24)
        if model == MODEL_SOURCE:
            checkpoint = load_checkpoint(existing_path(config.get('checkpoint'), 'Checkpoint'))
            dataset = gen_from_model(checkpoint.params, n_series, length, config.get('lag', length), config.seed)
        else:
            spec = SyntheticSpec.for_model(
                model,
                alpha=config.get('alpha'), beta=config.get('beta'), sigma2=config.get('sigma2'), p=config.get('p'),
                n_series=n_series, length=length, seed=config.seed,
            )
            dataset = generate(spec)
        path = export_csv(dataset, output_dir / config.get('output', f'model_{model}.csv'))
        outputs = [path.name]
        if dataset.synthetic is not None:
            outputs.append(sidecar_path(path).name)
        self.stdout.write(f'Wrote {dataset.n_series} series of length {dataset.length} to {path}')
        return outputs
