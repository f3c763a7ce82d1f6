from django.test import SimpleTestCase
from unittest.mock import patch
import json
import os
import tempfile
from pathlib import Path

from simulation.evaluation import EvaluationScheme, Prediction
from simulation.experiment import (
    HARMONIZATION_DIR, PREDICTIONS_FILE, RESULTS_FILE, ROUNDS_DIR, SUMMARY_FILE,
    ExperimentRunner, FoldOutcome, load_datasets, result_rows, subject_table,
)
from simulation.experiment_config import Cell, parse_config
from simulation.federation import Framework
from simulation.augmentation import AugmentationTier
from simulation.phantomdata import Prior
from simulation.results import POOLED_FOLD, TOTAL_CENTER, read_results_csv
from simulation.volume_io import write_dataset_tree

from .helpers import tiny_config_text, tiny_dataset

CENTERS = ('alpha', 'bravo', 'charlie', 'delta')
REPO_ROOT = Path(__file__).resolve().parents[3]


def tiny_config(data_dir, output_dir, **overrides):
    return parse_config(tiny_config_text(data_dir, output_dir, **overrides))


@patch.dict(os.environ, {}, clear=True)
class ExperimentRunnerTest(SimpleTestCase):
    """End-to-end runs over four tiny centers"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.data_dir = self.root / 'data'
        datasets = [tiny_dataset(center, 20, seed=i, offset=0.1 * i) for i, center in enumerate(CENTERS)]
        write_dataset_tree(datasets, self.data_dir)

    def tearDown(self):
        self.tmp.cleanup()

    def _run(self, name, jobs=1, **overrides):
        config = tiny_config(self.data_dir, self.root / name, **overrides)
        return config, ExperimentRunner(config, jobs=jobs).run()

    def test_result_files(self):
        """Test a run writes round logs and predictions"""
        config, result = self._run('files')
        out = config.output_dir
        for name in (RESULTS_FILE, SUMMARY_FILE, PREDICTIONS_FILE):
            self.assertTrue((out / name).exists(), name)
        self.assertEqual(len(list((out / ROUNDS_DIR).glob('*.jsonl'))), 4)

        frame = read_results_csv(out / RESULTS_FILE)
        pooled = frame[(frame['fold'] == POOLED_FOLD) & (frame['center'] == TOTAL_CENTER)]
        self.assertEqual(len(pooled), 1)
        self.assertTrue(0.0 <= pooled['auc'].iloc[0] <= 1.0)
        self.assertEqual(set(frame[frame['center'] != TOTAL_CENTER]['center']), set(CENTERS))

        document = json.loads((out / SUMMARY_FILE).read_text())
        self.assertEqual(document['name'], 'tiny')
        self.assertEqual(document['fingerprint'], config.fingerprint)
        self.assertEqual(len(document['rows']), 1)
        self.assertEqual(len(result.predictions), 4 * 20 * 2)

    def test_same_config_same_bytes(self):
        """Test repeat runs write identical bytes"""
        first, _ = self._run('first')
        second, _ = self._run('second')
        for name in (RESULTS_FILE, PREDICTIONS_FILE):
            self.assertEqual((first.output_dir / name).read_bytes(), (second.output_dir / name).read_bytes())

    def test_parallel_matches_serial(self):
        """Test parallel runs match serial runs"""
        serial, _ = self._run('serial', framework='["cds", "fl"]')
        parallel, _ = self._run('parallel', jobs=3, framework='["cds", "fl"]')
        self.assertEqual((serial.output_dir / RESULTS_FILE).read_bytes(),
                         (parallel.output_dir / RESULTS_FILE).read_bytes())

    def test_grid_summary_rows(self):
        """Test the grid gives one summary row per cell"""
        _, result = self._run('grid', framework='["cds", "fl", "fl-ev"]',
                              tier='["none", "basic", "shape", "shape-intensity"]')
        self.assertEqual(len(result.summary), 12)
        keys = {(r['framework'], r['tier']) for r in result.summary}
        self.assertIn(('fl-ev', 'shape-intensity'), keys)

    def test_reference_excludes_the_held_out_center(self):
        """Test the reference histogram leaves out the held-out center"""
        config, _ = self._run('reference')
        report_dir = config.output_dir / HARMONIZATION_DIR / Prior.MASKED.value
        for fold, held_out in enumerate(sorted(CENTERS)):
            document = json.loads((report_dir / f"lco_fold{fold}.json").read_text())
            expected = sorted(c for c in CENTERS if c != held_out)
            self.assertEqual(document['reference']['centers'], expected)
            self.assertEqual(sorted(document['before']), expected)
            self.assertLessEqual(document['mean_pairwise_l1_after'], document['mean_pairwise_l1_before'])

    def test_single_center_cds_equals_fl(self):
        """Test CDS and FL agree with one center"""
        single = self.root / 'single'
        write_dataset_tree([tiny_dataset('solo', 20)], single)
        for seed in range(3):
            config = tiny_config(single, self.root / f'solo{seed}', framework='["cds", "fl"]', scheme='"ccv"',
                                 seeds=f'[{seed}]')
            result = ExperimentRunner(config, write_outputs=False).run()
            scores = {}
            for row in result.predictions:
                scores.setdefault(row.framework, []).append((row.fold, row.subject_id, row.timepoint, row.score))
            self.assertEqual(sorted(scores['cds']), sorted(scores['fl']), seed)

    def test_describe_does_not_train(self):
        """Test describe reports the plan without training"""
        config = tiny_config(self.data_dir, self.root / 'dry', framework='["cds", "fl"]', scheme='["ccv", "lco"]')
        runner = ExperimentRunner(config, write_outputs=False)
        text = '\n'.join(runner.describe())
        self.assertIn('scheme ccv: 5 folds', text)
        self.assertIn('scheme lco: 4 folds', text)
        self.assertIn('cds: pooled', text)
        self.assertIn('batch sizes', text)
        self.assertFalse(config.output_dir.exists())

    def test_fold_plans_ignore_the_training_seed(self):
        """Test fold plans depend on split_seed only"""
        a = ExperimentRunner(tiny_config(self.data_dir, self.root / 'a', seeds='[0]'), write_outputs=False)
        b = ExperimentRunner(tiny_config(self.data_dir, self.root / 'b', seeds='[5]'), write_outputs=False)
        self.assertEqual(a.plan(EvaluationScheme.LCO), b.plan(EvaluationScheme.LCO))
        self.assertEqual(len(a.jobs_list()), 4)


class ResultRowsTest(SimpleTestCase):

    def test_single_class_fold_has_no_total(self):
        """Test single-class folds write no total row"""
        cell = Cell(Framework.FL, EvaluationScheme.LCO, AugmentationTier.NONE, Prior.MASKED)
        outcomes = [
            FoldOutcome(cell, 0, 0, [Prediction('a', 'a-0', 'ED', 0, 0.2), Prediction('a', 'a-1', 'ED', 0, 0.4)],
                        3, 1, 0.8),
            FoldOutcome(cell, 0, 1, [Prediction('b', 'b-0', 'ED', 1, 0.9), Prediction('b', 'b-1', 'ED', 0, 0.1)],
                        3, 1, 0.8),
        ]
        rows = result_rows(cell, 0, outcomes)
        keys = {(r.fold, r.center) for r in rows}
        self.assertNotIn(('0', TOTAL_CENTER), keys)
        self.assertNotIn(('0', 'a'), keys)
        self.assertIn(('1', 'b'), keys)
        pooled = [r for r in rows if r.fold == POOLED_FOLD and r.center == TOTAL_CENTER]
        self.assertEqual(len(pooled), 1)
        self.assertEqual(pooled[0].auc, 1.0)


@patch.dict(os.environ, {}, clear=True)
class LoadDatasetsTest(SimpleTestCase):

    def test_profiles_file(self):
        """Test datasets generated from a profiles file"""
        config = parse_config(f'[dataset]\nprofiles = "{REPO_ROOT / "configs" / "profiles.toml"}"\n')
        datasets = load_datasets(config)
        table = subject_table(datasets)
        self.assertEqual(sorted(table), ['north', 'south'])
        self.assertEqual(len(table['south']), 12)
