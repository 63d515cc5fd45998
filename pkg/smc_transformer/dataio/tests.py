# dataio/tests.py
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from numkit.exceptions import CsvParseError, DomainError, SchemaError
from numkit.rng import SeededRng

from .csv_io import export_csv, load_csv, sidecar_path
from .datasets import (
    SeriesDataset, TEST, TRAIN, VALIDATION, fold_assignment, iter_batches, split_normalize,
)
from .synthetic import SyntheticSpec, gen_model_I, gen_model_II


def make_dataset(observations, **kwargs):
    observations = np.asarray(observations, dtype=np.float64)
    return SeriesDataset(
        observations=observations,
        series_ids=tuple(f's{index}' for index in range(observations.shape[0])),
        feature_names=tuple(f'f{index}' for index in range(observations.shape[2])),
        **kwargs,
    )


class ModelOneTest(SimpleTestCase):
    """Test the Model I generator"""

    def test_zero_coefficient_vanishes(self):
        """Test that alpha = 0 without noise gives zeros after the first step"""
        dataset = gen_model_I(SyntheticSpec(model_id='I', alpha=0.0, sigma2=1e-12, n_series=5, length=6, seed=1))
        np.testing.assert_allclose(dataset.observations, 0.0, atol=1e-5)

    def test_unit_coefficient_is_constant(self):
        """Test that alpha = 1 without noise repeats the first value"""
        dataset = gen_model_I(SyntheticSpec(model_id='I', alpha=1.0, sigma2=1e-12, n_series=5, length=6, seed=2))
        first = dataset.observations[:, :1]
        np.testing.assert_allclose(dataset.observations, np.broadcast_to(first, dataset.observations.shape), atol=1e-4)

    def test_stationary_variance(self):
        """Test the stationary variance sigma2 / (1 - alpha^2)"""
        dataset = gen_model_I(SyntheticSpec(model_id='I', alpha=0.8, sigma2=0.5, n_series=100000, length=24, seed=3))
        stationary = 0.5 / (1 - 0.8 ** 2)
        self.assertAlmostEqual(float(dataset.observations[:, -1, 0].var()), stationary, delta=0.02 * stationary)

    def test_reproducible_by_seed(self):
        """Test that a seed fixes the generated data"""
        spec = SyntheticSpec(model_id='I', n_series=4, length=5, seed=9)
        np.testing.assert_array_equal(gen_model_I(spec).observations, gen_model_I(spec).observations)

    def test_invalid_spec(self):
        """Test rejection of out-of-range parameters"""
        with self.assertRaises(DomainError):
            SyntheticSpec(model_id='I', sigma2=0.0)
        with self.assertRaises(DomainError):
            gen_model_I(SyntheticSpec.for_model('II'))


class ModelTwoTest(SimpleTestCase):
    """Test the regime-switching Model II generator"""

    def test_always_alpha_regime_matches_model_one(self):
        """Test that p = 1 reduces to Model I with alpha"""
        two = gen_model_II(SyntheticSpec(model_id='II', alpha=0.9, beta=0.54, p=1.0, sigma2=0.3, n_series=6, length=8, seed=4))
        one = gen_model_I(SyntheticSpec(model_id='I', alpha=0.9, sigma2=0.3, n_series=6, length=8, seed=4))
        np.testing.assert_array_equal(two.observations, one.observations)

    def test_always_beta_regime_matches_model_one(self):
        """Test that p = 0 reduces to Model I with beta"""
        two = gen_model_II(SyntheticSpec(model_id='II', alpha=0.9, beta=0.54, p=0.0, sigma2=0.3, n_series=6, length=8, seed=5))
        one = gen_model_I(SyntheticSpec(model_id='I', alpha=0.54, sigma2=0.3, n_series=6, length=8, seed=5))
        np.testing.assert_array_equal(two.observations, one.observations)

    def test_conditional_mean(self):
        """Test the mixture conditional mean of the next value"""
        spec = SyntheticSpec.for_model('II', n_series=100000, length=2, seed=6)
        x = gen_model_II(spec).observations[:, :, 0]
        slope = float(np.sum(x[:, 0] * x[:, 1]) / np.sum(x[:, 0] ** 2))
        expected = 0.7 * 0.9 + 0.3 * 0.54
        standard_error = np.sqrt(0.3 / np.sum(x[:, 0] ** 2) + np.var(x[:, 1] - expected * x[:, 0]) / np.sum(x[:, 0] ** 2))
        self.assertLess(abs(slope - expected), 4 * standard_error)

    def test_defaults(self):
        """Test the published Model II defaults"""
        spec = SyntheticSpec.for_model('II')
        self.assertEqual((spec.alpha, spec.beta, spec.p, spec.sigma2), (0.9, 0.54, 0.7, 0.3))
        self.assertAlmostEqual(SyntheticSpec.for_model('II', alpha=0.5).beta, 0.3)
        means, probabilities = spec.conditional_means(np.array([1.0, 2.0]))
        np.testing.assert_allclose(means, [[0.9, 1.8], [0.54, 1.08]])
        np.testing.assert_allclose(probabilities, [0.7, 0.3])


class SplitNormalizeTest(SimpleTestCase):
    """Test splitting and train-only normalisation"""

    def setUp(self):
        self.dataset = make_dataset(SeededRng(7).normal((100, 5, 2)) * [1.0, 3.0] + [0.0, 10.0])

    def test_split_sizes(self):
        """Test the train, validation and test counts"""
        split = split_normalize(self.dataset, seed=1).split
        self.assertEqual([int(np.sum(split == name)) for name in (TRAIN, VALIDATION, TEST)], [70, 15, 15])

    def test_train_rows_are_standardised(self):
        """Test zero mean and unit variance over training rows"""
        dataset = split_normalize(self.dataset, seed=1)
        rows = dataset.subset(TRAIN).reshape(-1, 2)
        np.testing.assert_allclose(rows.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(rows.std(axis=0), 1.0, atol=1e-10)

    def test_same_seed_same_assignment(self):
        """Test that a seed fixes the split assignment"""
        np.testing.assert_array_equal(split_normalize(self.dataset, seed=3).split, split_normalize(self.dataset, seed=3).split)

    def test_denormalize_inverts(self):
        """Test that raw() undoes the normalisation"""
        dataset = split_normalize(self.dataset, seed=2)
        np.testing.assert_allclose(dataset.raw(dataset.observations), self.dataset.observations, atol=1e-12)

    def test_statistics_ignore_held_out_rows(self):
        """Test that held-out rows do not move the statistics"""
        dataset = split_normalize(self.dataset, seed=4)
        mutated = self.dataset.observations.copy()
        mutated[dataset.split != TRAIN] += 100.0
        other = split_normalize(make_dataset(mutated), seed=4)
        self.assertEqual(dataset.norm_stats, other.norm_stats)

    def test_synthetic_data_stays_raw(self):
        """Test that synthetic data is split but not rescaled"""
        dataset = gen_model_I(SyntheticSpec(n_series=20, length=4, seed=1))
        split = split_normalize(dataset, seed=1)
        self.assertIsNone(split.norm_stats)
        np.testing.assert_array_equal(split.observations, dataset.observations)

    def test_empty_split(self):
        """Test rejection of ratios that leave a split empty"""
        with self.assertRaises(DomainError):
            split_normalize(make_dataset(np.zeros((3, 4, 1))), ratios=(0.8, 0.1, 0.1), seed=0)

    def test_batches_and_folds(self):
        """Test shuffled batches and cross-validation folds"""
        batches = list(iter_batches(np.arange(10), 4, SeededRng(1)))
        self.assertEqual([len(batch) for batch in batches], [4, 4, 2])
        self.assertEqual(sorted(np.concatenate(batches).tolist()), list(range(10)))
        folds = fold_assignment(np.arange(10), 3, SeededRng(2))
        self.assertEqual(sorted(np.concatenate(folds).tolist()), list(range(10)))
        with self.assertRaises(DomainError):
            fold_assignment(np.arange(2), 3, SeededRng(2))


class CsvTest(SimpleTestCase):
    """Test CSV ingestion and export"""

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = Path(self.directory.name) / 'series.csv'

    def tearDown(self):
        self.directory.cleanup()

    def write(self, text):
        self.path.write_text(text)
        return self.path

    def test_small_file(self):
        """Test loading a two-series file"""
        dataset = load_csv(self.write('series_id,t,f0\na,1,0.5\na,2,1.5\na,3,2.5\nb,1,-1\nb,2,-2\nb,3,-3\n'))
        self.assertEqual(dataset.observations.shape, (2, 3, 1))
        np.testing.assert_array_equal(dataset.observations[:, :, 0], [[0.5, 1.5, 2.5], [-1, -2, -3]])
        self.assertEqual(dataset.series_ids, ('a', 'b'))

    def test_unparsable_cell_names_row_and_column(self):
        """Test that a bad cell reports its line and column"""
        with self.assertRaises(CsvParseError) as caught:
            load_csv(self.write('series_id,t,f0,f1\na,1,0.5,1\na,2,oops,2\n'))
        self.assertEqual(caught.exception.line, 3)
        self.assertEqual(caught.exception.column, 'f0')

    def test_extra_field_is_a_parse_error(self):
        """Test that a row with too many fields is rejected"""
        with self.assertRaises(CsvParseError):
            load_csv(self.write('series_id,t,f0\na,1,0.5\na,2,1.5,7\n'))

    def test_bad_header(self):
        """Test rejection of a header without series_id and t"""
        with self.assertRaises(CsvParseError):
            load_csv(self.write('id,time,f0\na,1,0.5\n'))

    def test_windowing(self):
        """Test cutting series into strided windows"""
        rows = ''.join(f'a,{t},{t * 0.1}\n' for t in range(1, 101))
        dataset = load_csv(self.write('series_id,t,f0\n' + rows), length=40, stride=40)
        self.assertEqual(dataset.observations.shape, (2, 40, 1))
        overlapping = load_csv(self.path, length=40, stride=20)
        self.assertEqual(overlapping.n_series, 4)

    def test_missing_rows_are_dropped_and_counted(self):
        """Test dropping and counting rows with missing values"""
        dataset = load_csv(self.write('series_id,t,f0\na,1,0.5\na,2,\na,3,1.0\na,4,2.0\n'), length=3)
        self.assertEqual(dataset.dropped_rows, 1)
        np.testing.assert_array_equal(dataset.observations[0, :, 0], [0.5, 1.0, 2.0])

    def test_unequal_lengths_need_a_window(self):
        """Test that ragged series need a window length"""
        with self.assertRaises(SchemaError):
            load_csv(self.write('series_id,t,f0\na,1,0.5\na,2,1.5\nb,1,2\n'))

    def test_interleaved_series_rows(self):
        """Test that a series resumed after another series is a schema error"""
        with self.assertRaises(SchemaError) as caught:
            load_csv(self.write('series_id,t,f0\na,1,0.5\na,2,1.5\nb,1,2\nb,2,3\na,3,2.5\n'), length=2)
        self.assertIn("'a'", str(caught.exception))

    def test_column_selection(self):
        """Test keeping a subset of feature columns"""
        dataset = load_csv(self.write('series_id,t,f0,f1\na,1,0.5,9\na,2,1.5,8\n'), columns=['f1'])
        np.testing.assert_array_equal(dataset.observations[0, :, 0], [9, 8])
        with self.assertRaises(SchemaError):
            load_csv(self.path, columns=['f7'])

    def test_export_round_trip_with_sidecar(self):
        """Test export and reload with the synthetic sidecar"""
        dataset = gen_model_II(SyntheticSpec.for_model('II', n_series=3, length=5, seed=8))
        export_csv(dataset, self.path)
        self.assertTrue(sidecar_path(self.path).exists())
        loaded = load_csv(self.path)
        np.testing.assert_array_equal(loaded.observations, dataset.observations)
        self.assertEqual(loaded.synthetic, dataset.synthetic)
