# runs/tests.py
import json
import os
import tempfile
import unittest
from io import StringIO
from pathlib import Path
from unittest import mock

import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.db import DatabaseError
from django.test import SimpleTestCase, TestCase, override_settings

from numkit.exceptions import ConfigError, NumericalError

from .config import RunConfig, load_config_file, parse_key_values, parse_ratios, resolve_config
from .models import ExperimentRun
from .utils import MANIFEST_FILE

DEFAULTS = {'particles': 10, 'lag': 24, 'epochs': 50, 'n_samples': 1000, 'split_ratios': (0.7, 0.15, 0.15)}
SMALL_MODEL = ['--particles', '3', '--lag', '3', '--depth', '3', '--ff-units', '3']
SLOW_TESTS = os.getenv('SMCT_SLOW_TESTS') == '1'


class ConfigFileTest(SimpleTestCase):
    """Test config file parsing"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_key_values_are_typed(self):
        """Test typed parsing of key = value lines"""
        values = parse_key_values(
            '# Model I\nparticles = 10\nlearning-rate = 0.01\nem_targets = q,k\npatience = none\nname = "I"\n'
        )
        self.assertEqual(values, {
            'particles': 10, 'learning_rate': 0.01, 'em_targets': 'q,k', 'patience': None, 'name': 'I',
        })

    def test_line_without_equals(self):
        """Test that a malformed line names its number"""
        with self.assertRaisesMessage(ConfigError, 'line 2'):
            parse_key_values('seed = 1\nparticles 10\n')

    def test_json_file(self):
        """Test loading a JSON config"""
        path = self.dir / 'run.json'
        path.write_text(json.dumps({'seed': 3, 'batch-size': 8}))
        self.assertEqual(load_config_file(path), {'seed': 3, 'batch_size': 8})

    def test_nested_json_is_rejected(self):
        """Test rejection of nested JSON values"""
        path = self.dir / 'run.json'
        path.write_text(json.dumps({'model': {'particles': 10}}))
        with self.assertRaises(ConfigError):
            load_config_file(path)

    def test_missing_file(self):
        """Test rejection of a missing config file"""
        with self.assertRaises(ConfigError):
            load_config_file(self.dir / 'absent.cfg')

    def test_ratios(self):
        """Test parsing split ratios"""
        self.assertEqual(parse_ratios('0.8, 0.1, 0.1'), (0.8, 0.1, 0.1))
        with self.assertRaises(ConfigError):
            parse_ratios('0.5,0.5')


@override_settings(SMC_TRANSFORMER=DEFAULTS)
class ResolveConfigTest(SimpleTestCase):
    """Test flag > file > settings precedence"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'run.cfg'
        self.path.write_text('seed = 4\nparticles = 20\nlag = 12\n')
        self.allowed = {'seed', 'particles', 'lag', 'epochs', 'n_samples', 'split_ratios'}

    def test_precedence(self):
        """Test flag over file over settings"""
        config = resolve_config('train', {'particles': 30, 'lag': None}, self.allowed, self.path)
        self.assertEqual(config.seed, 4)
        self.assertEqual(config.get('particles'), 30)
        self.assertEqual(config.get('lag'), 12)
        self.assertEqual(config.get('epochs'), 50)
        self.assertEqual(config.explicit, {'particles', 'lag'})

    def test_flag_seed_wins(self):
        """Test that a seed flag beats the file"""
        self.assertEqual(resolve_config('train', {'seed': 9}, self.allowed, self.path).seed, 9)

    def test_missing_seed(self):
        """Test that a run without a seed is refused"""
        with self.assertRaisesMessage(ConfigError, 'seed'):
            resolve_config('train', {'particles': 3}, self.allowed)

    def test_unknown_file_key(self):
        """Test rejection of an unknown config key"""
        self.path.write_text('seed = 1\nparticels = 10\n')
        with self.assertRaisesMessage(ConfigError, 'particels'):
            resolve_config('train', {}, self.allowed, self.path)

    def test_split_ratios_become_a_list(self):
        """Test that split ratios are parsed from a string"""
        config = resolve_config('train', {'seed': 1, 'split_ratios': '0.6,0.2,0.2'}, self.allowed)
        self.assertEqual(config.get('split_ratios'), [0.6, 0.2, 0.2])

    def test_checkpoint_config_below_explicit_values(self):
        """Test that explicit values beat the checkpoint config"""
        config = RunConfig('eval', 1, values={'particles': 10, 'lag': 5}, explicit=frozenset({'lag'}))
        train_config = config.train_config(base={'particles': 7, 'lag': 9, 'seed': 99, 'depth': 4})
        self.assertEqual((train_config.particles, train_config.lag, train_config.depth), (7, 5, 4))
        self.assertEqual(train_config.seed, 1)


class CommandTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def call(self, name, *args, output='out'):
        stdout = StringIO()
        call_command(name, *args, '--output-dir', str(self.root / output), stdout=stdout)
        return stdout.getvalue()

    def generate(self, n=20, length=6, seed=1, output='data'):
        self.call('generate', '--model', 'I', '--n', str(n), '--T', str(length), '--seed', str(seed), output=output)
        return self.root / output / 'model_I.csv'


class GenerateCommandTest(CommandTestCase):
    """Test the generate command"""

    def test_writes_csv_and_sidecar(self):
        """Test the generated CSV and its sidecar"""
        path = self.generate(n=7, length=5)
        frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ['series_id', 't', 'f0'])
        self.assertEqual(len(frame), 35)
        sidecar = json.loads(path.with_name('model_I.synthetic.json').read_text())
        self.assertEqual((sidecar['alpha'], sidecar['sigma2']), (0.8, 0.5))

    def test_manifest(self):
        """Test the run manifest"""
        self.generate(n=3, length=4)
        manifest = json.loads((self.root / 'data' / MANIFEST_FILE).read_text())
        self.assertEqual(manifest['command'], 'generate')
        self.assertEqual(manifest['seed'], 1)
        self.assertEqual(manifest['outputs'], ['model_I.csv', 'model_I.synthetic.json'])
        self.assertIn('checkpoint', manifest['formats'])

    def test_model_two_overrides(self):
        """Test Model II parameter overrides"""
        self.call('generate', '--model', 'II', '--alpha', '0.5', '--n', '2', '--T', '3', '--seed', '2', output='two')
        sidecar = json.loads((self.root / 'two' / 'model_II.synthetic.json').read_text())
        self.assertEqual((sidecar['alpha'], sidecar['beta'], sidecar['p']), (0.5, 0.3, 0.7))

    def test_missing_seed(self):
        """Test that generate refuses to run without a seed"""
        with self.assertRaisesMessage(CommandError, 'seed'):
            call_command('generate', '--output-dir', str(self.root / 'x'), stdout=StringIO())

    def test_same_seed_same_file(self):
        """Test byte-identical output for the same seed"""
        first = self.generate(n=4, length=5, output='a').read_bytes()
        self.assertEqual(self.generate(n=4, length=5, output='b').read_bytes(), first)

    def test_registry(self):
        """Test that a run is recorded in the registry"""
        self.generate(n=2, length=3)
        run = ExperimentRun.objects.get()
        self.assertEqual(run.command, ExperimentRun.Command.GENERATE)
        self.assertEqual(run.status, ExperimentRun.Status.SUCCEEDED)
        self.assertIsNotNone(run.finished_at)

    def test_registry_is_best_effort(self):
        """Test that a registry failure does not fail the run"""
        with mock.patch.object(ExperimentRun.objects, 'create', side_effect=DatabaseError('read-only')):
            path = self.generate(n=2, length=3)
        self.assertTrue(path.exists())


class PipelineTest(CommandTestCase):
    """Test generate, train, eval and forecast end to end"""

    def setUp(self):
        super().setUp()
        self.data = self.generate(n=20, length=6)
        self.call('train', '--data', str(self.data), '--seed', '3', '--epochs', '1', '--batch-size', '4', *SMALL_MODEL, output='train')
        self.checkpoint = self.root / 'train' / 'checkpoint.npz'

    def evaluate(self, output):
        self.call(
            'eval', '--data', str(self.data), '--checkpoint', str(self.checkpoint),
            '--seed', '5', '--n-samples', '40', output=output,
        )
        return self.root / output

    def test_train_outputs(self):
        """Test the training log, checkpoint and manifest"""
        log = pd.read_csv(self.root / 'train' / 'training_log.csv')
        self.assertEqual(list(log['split']), ['train', 'validation'])
        manifest = json.loads((self.root / 'train' / MANIFEST_FILE).read_text())
        self.assertEqual(manifest['outputs'], ['checkpoint.npz', 'training_log.csv'])
        self.assertEqual(manifest['config']['particles'], 3)

    def test_eval_metrics(self):
        """Test the eval metrics and PICP files"""
        output = self.evaluate('eval')
        metrics = dict(pd.read_csv(output / 'metrics.csv').itertuples(index=False))
        self.assertEqual(set(metrics), {'mse', 'dist_mse', 'picp', 'mpiw', 'n_series'})
        self.assertEqual(metrics['n_series'], 2)
        self.assertTrue(0.0 <= metrics['picp'] <= 1.0)
        self.assertGreaterEqual(metrics['mpiw'], 0.0)
        per_step = pd.read_csv(output / 'picp_per_timestep.csv')
        self.assertEqual(list(per_step['t']), [2, 3, 4, 5, 6])
        self.assertEqual(set(per_step['n']), {2})

    def test_eval_is_reproducible(self):
        """Test byte-identical metrics for the same seed"""
        first = (self.evaluate('a') / 'metrics.csv').read_bytes()
        self.assertEqual((self.evaluate('b') / 'metrics.csv').read_bytes(), first)

    def test_eval_is_independent_of_threads(self):
        """Test that the thread count does not change metrics"""
        first = (self.evaluate('a') / 'metrics.csv').read_bytes()
        self.call(
            'eval', '--data', str(self.data), '--checkpoint', str(self.checkpoint),
            '--seed', '5', '--n-samples', '40', '--threads', '2', output='threaded',
        )
        self.assertEqual((self.root / 'threaded' / 'metrics.csv').read_bytes(), first)

    def test_saved_samples(self):
        """Test the saved samples CSV"""
        self.call(
            'eval', '--data', str(self.data), '--checkpoint', str(self.checkpoint),
            '--seed', '5', '--n-samples', '20', '--save-samples', output='samples',
        )
        samples = pd.read_csv(self.root / 'samples' / 'samples.csv')
        self.assertEqual(list(samples.columns), ['series_id', 't', 'draw_id', 'f0'])
        self.assertEqual(len(samples), 2 * 5 * 20)

    def test_too_few_samples(self):
        """Test refusal of too few samples for the interval level"""
        with self.assertRaisesMessage(CommandError, 'at least 20 samples'):
            self.call(
                'eval', '--data', str(self.data), '--checkpoint', str(self.checkpoint),
                '--seed', '5', '--n-samples', '10', output='few',
            )
        self.assertEqual(ExperimentRun.objects.get(command='eval').status, ExperimentRun.Status.FAILED)

    def test_missing_checkpoint(self):
        """Test refusal of a missing checkpoint"""
        with self.assertRaisesMessage(CommandError, 'does not exist'):
            self.call('eval', '--data', str(self.data), '--checkpoint', str(self.root / 'nope.npz'), '--seed', '5')

    def test_forecast(self):
        """Test the forecast outputs"""
        self.call(
            'forecast', '--data', str(self.data), '--checkpoint', str(self.checkpoint),
            '--seed', '5', '--history', '3', '--horizon', '3', '--n-samples', '20', output='forecast',
        )
        intervals = pd.read_csv(self.root / 'forecast' / 'intervals.csv')
        self.assertEqual(list(intervals.columns), ['series_id', 't', 'f0_mean', 'f0_lower', 'f0_upper'])
        self.assertEqual(len(intervals), 2 * 3)
        self.assertEqual(sorted(set(intervals['t'])), [4, 5, 6])
        self.assertTrue((intervals['f0_lower'] <= intervals['f0_upper']).all())
        self.assertTrue((self.root / 'forecast' / 'metrics.csv').exists())

    def test_forecast_past_the_data_is_not_scored(self):
        """Test that forecasts past the data are not scored"""
        self.call(
            'forecast', '--data', str(self.data), '--checkpoint', str(self.checkpoint),
            '--seed', '5', '--history', '6', '--horizon', '2', '--n-samples', '20', output='beyond',
        )
        self.assertTrue((self.root / 'beyond' / 'intervals.csv').exists())
        self.assertFalse((self.root / 'beyond' / 'metrics.csv').exists())

    def test_cross_validation(self):
        """Test the cross-validation output"""
        self.call(
            'train', '--data', str(self.data), '--seed', '3', '--epochs', '1', '--batch-size', '4',
            '--folds', '2', *SMALL_MODEL, output='cv',
        )
        frame = pd.read_csv(self.root / 'cv' / 'crossval.csv')
        self.assertEqual(list(frame['fold']), [1, 2])


class DeterministicPipelineTest(CommandTestCase):
    """Test the deterministic baseline through the commands"""

    def setUp(self):
        super().setUp()
        self.data = self.generate(n=20, length=6)
        self.call(
            'train', '--data', str(self.data), '--seed', '3', '--epochs', '1', '--model-type', 'deterministic',
            *SMALL_MODEL, output='train',
        )
        self.checkpoint = self.root / 'train' / 'checkpoint.npz'

    def test_eval_reports_mse_only(self):
        """Test that eval of the deterministic model reports mse only"""
        self.call('eval', '--data', str(self.data), '--checkpoint', str(self.checkpoint), '--seed', '5', output='eval')
        metrics = pd.read_csv(self.root / 'eval' / 'metrics.csv')
        self.assertEqual(list(metrics['metric']), ['mse', 'n_series'])
        self.assertFalse((self.root / 'eval' / 'picp_per_timestep.csv').exists())

    def test_forecast_is_refused(self):
        """Test that forecast needs the smc model"""
        with self.assertRaisesMessage(CommandError, 'smc'):
            self.call('forecast', '--data', str(self.data), '--checkpoint', str(self.checkpoint), '--seed', '5')


class TrainFailureTest(CommandTestCase):
    """Test failures surfacing from training"""

    def test_divergence(self):
        """Test the error and exit of a diverged training run"""
        data = self.generate(n=20, length=6)
        with mock.patch('trainer.fit.filter_sequence', side_effect=NumericalError('log-weights underflowed')):
            with self.assertRaisesMessage(CommandError, 'Non-finite loss'):
                self.call('train', '--data', str(data), '--seed', '3', '--epochs', '1', *SMALL_MODEL)
        run = ExperimentRun.objects.get(command='train')
        self.assertEqual(run.status, ExperimentRun.Status.FAILED)
        self.assertIn('Non-finite loss', run.message)
        self.assertFalse((self.root / 'out' / MANIFEST_FILE).exists())

    def test_bad_data_file(self):
        """Test the error of an unparsable data file"""
        path = self.root / 'bad.csv'
        path.write_text('series_id,t,f0\na,1,0.5\na,2,oops\n')
        with self.assertRaisesMessage(CommandError, 'line 3'):
            self.call('train', '--data', str(path), '--seed', '1', '--epochs', '1', *SMALL_MODEL)


class DiagnoseCommandTest(CommandTestCase):
    """Test the ancestry diagnostic"""

    def test_sixty_lags(self):
        """Test the ancestry report of an untrained model with 60 lags"""
        data = self.generate(n=3, length=60)
        self.call(
            'diagnose', '--data', str(data), '--seed', '2', '--particles', '60', '--lag', '60',
            '--depth', '4', '--ff-units', '4', output='ancestry',
        )
        frame = pd.read_csv(self.root / 'ancestry' / 'ancestry.csv')
        self.assertEqual(list(frame.columns), ['lag', 'mean_unique', 'ci_low', 'ci_high'])
        self.assertEqual(list(frame['lag']), list(range(1, 61)))
        for column in ('mean_unique', 'ci_low', 'ci_high'):
            self.assertTrue(frame[column].between(1, 60).all())
        self.assertTrue((frame['ci_low'] <= frame['ci_high']).all())
        self.assertTrue((frame['mean_unique'].diff().dropna() <= 1e-12).all())

    def test_max_lag(self):
        """Test that --max-lag caps the report"""
        data = self.generate(n=2, length=10)
        self.call(
            'diagnose', '--data', str(data), '--seed', '2', '--particles', '5', '--lag', '4',
            '--depth', '3', '--ff-units', '3', '--max-lag', '4', output='short',
        )
        self.assertEqual(len(pd.read_csv(self.root / 'short' / 'ancestry.csv')), 4)

    @unittest.skipUnless(SLOW_TESTS, 'set SMCT_SLOW_TESTS=1 to run')
    def test_trained_model_loses_ancestors(self):
        """Test that after training fewer than M distinct ancestors survive at the deepest lag"""
        data = self.generate(n=100, length=60, seed=4)
        self.call(
            'train', '--data', str(data), '--seed', '3', '--epochs', '5', '--batch-size', '16',
            '--particles', '10', '--lag', '24', '--depth', '8', '--ff-units', '8', output='trained',
        )
        self.call(
            'diagnose', '--data', str(data), '--checkpoint', str(self.root / 'trained' / 'checkpoint.npz'),
            '--seed', '5', '--particles', '60', '--lag', '60', output='ancestry',
        )
        frame = pd.read_csv(self.root / 'ancestry' / 'ancestry.csv')
        self.assertEqual(len(frame), 60)
        self.assertTrue((frame['mean_unique'].diff().dropna() <= 1e-12).all())
        self.assertLess(frame['mean_unique'].iloc[-1], 60)
        self.assertLess(frame['ci_high'].iloc[-1], 60)


FIXTURE = Path(__file__).resolve().parent / 'fixtures' / 'ar1_200.csv'


class BundledDatasetTest(CommandTestCase):
    """Test every command on the bundled 200-series AR(1) CSV"""

    def pipeline(self, prefix):
        data = ['--data', str(FIXTURE)]
        self.call('train', *data, '--seed', '11', '--epochs', '1', '--batch-size', '16', *SMALL_MODEL, output=f'{prefix}/train')
        checkpoint = ['--checkpoint', str(self.root / prefix / 'train' / 'checkpoint.npz')]
        self.call('eval', *data, *checkpoint, '--seed', '12', '--n-samples', '20', output=f'{prefix}/eval')
        self.call(
            'forecast', *data, *checkpoint, '--seed', '13', '--history', '12', '--horizon', '12',
            '--n-samples', '20', output=f'{prefix}/forecast',
        )
        self.call('diagnose', *data, *checkpoint, '--seed', '14', '--max-lag', '24', output=f'{prefix}/diagnose')
        return self.root / prefix

    def test_outputs_are_reproducible(self):
        """Test byte-identical outputs of two seeded pipelines"""
        first, second = self.pipeline('a'), self.pipeline('b')
        for name in (
            'train/training_log.csv', 'eval/metrics.csv', 'eval/picp_per_timestep.csv',
            'forecast/intervals.csv', 'forecast/metrics.csv', 'diagnose/ancestry.csv',
        ):
            with self.subTest(name=name):
                self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())

    def test_split_and_scale(self):
        """Test the stored split and scaling of the bundled CSV"""
        output = self.pipeline('a')
        metrics = dict(pd.read_csv(output / 'eval' / 'metrics.csv').itertuples(index=False))
        self.assertEqual(metrics['n_series'], 30)
        self.assertNotIn('dist_mse', metrics)
        self.assertEqual(len(pd.read_csv(output / 'diagnose' / 'ancestry.csv')), 24)
        self.assertEqual(
            ExperimentRun.objects.filter(status=ExperimentRun.Status.SUCCEEDED).count(), 4,
        )
