# runs/management/commands/train.py
from dataio.datasets import TRAIN, VALIDATION
from trainer.checkpoint import save_checkpoint
from trainer.config import LR_SCHEDULES, MODEL_TYPES
from trainer.fit import cross_validate, fit
from runs.utils import RunCommand, prepare_dataset

CHECKPOINT_FILE = 'checkpoint.npz'
TRAINING_LOG_FILE = 'training_log.csv'
CROSSVAL_FILE = 'crossval.csv'


class Command(RunCommand):
    help = 'Train the SMC Transformer (or the deterministic baseline) on a CSV dataset'
    command_name = 'train'

    def add_run_arguments(self, parser):
        self.add_data_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--model-type', choices=MODEL_TYPES, help='smc (default) or deterministic')
        parser.add_argument('--depth', type=int, help='Latent dimension r')
        parser.add_argument('--ff-units', type=int, help='Feed-forward units of the observation head')
        parser.add_argument('--epochs', type=int, help='Training epochs')
        parser.add_argument('--batch-size', type=int, help='Sequences per batch')
        parser.add_argument('--learning-rate', type=float, help='Adam learning rate (constant schedule)')
        parser.add_argument('--lr-schedule', choices=LR_SCHEDULES, help='Learning-rate schedule')
        parser.add_argument('--warmup-steps', type=int, help='Warmup steps of the warmup schedule')
        parser.add_argument('--patience', type=int, help='Stop after this many epochs without improvement')
        parser.add_argument('--em-exponent', type=float, help='EM step size exponent κ in η_p = p^-κ')
        parser.add_argument('--em-targets', help='Comma-separated variances updated by EM (q,k,v,z,obs)')
        parser.add_argument('--initial-variance', type=float, help='Starting value of every noise variance')
        parser.add_argument('--split-ratios', help='Train, validation and test shares, e.g. 0.7,0.15,0.15')
        parser.add_argument('--folds', type=int, help='Also cross-validate over this many folds')

    def run(self, config, output_dir):
        dataset = prepare_dataset(config)
        train_config = config.train_config()
        self.stdout.write(
            f'Training {train_config.model_type} model on {dataset.indices(TRAIN).size} series '
            f'({dataset.indices(VALIDATION).size} validation), {train_config.epochs} epochs'
        )
        outputs = []
        if config.get('folds'):
            frame = cross_validate(dataset, train_config, n_folds=config.get('folds'))
            frame.to_csv(output_dir / CROSSVAL_FILE, index=False)
            outputs.append(CROSSVAL_FILE)
        result = fit(dataset, train_config)
        save_checkpoint(
            output_dir / CHECKPOINT_FILE, result.params,
            model_type=train_config.model_type, opt_state=result.opt_state,
            dataset=dataset, config=train_config.as_dict(),
        )
        result.log.write_csv(output_dir / TRAINING_LOG_FILE)
        if result.log.rows:
            self.stdout.write(f'Best {result.monitored_split} epoch: {result.best_epoch}')
        return outputs + [CHECKPOINT_FILE, TRAINING_LOG_FILE]
