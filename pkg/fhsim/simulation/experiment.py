"""
Experiment pipeline.

For every grid cell (framework, scheme, tier, prior), seed and fold:

1. resample and crop every volume (once per run, shared by all cells)
2. build one ``CenterNode`` per center holding its train/validation/test volumes
3. agree on histogram bins from the centers' intensity bounds, average their
   histogram aggregates into a reference and standardize every center
4. train with CDS or FL and predict the test centers with the best model

Fold plans depend only on ``split_seed``, so every framework and seed sees the
same folds; the seed only changes model initialization, shuffling and
augmentation draws.
"""

import dataclasses
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Dict, List, Optional, Sequence, Tuple

from core.logging_config import get_logger

from .evaluation import (
    EvaluationScheme,
    Fold,
    FoldPlan,
    Prediction,
    SubjectTable,
    auc_by_center,
    auc_of,
    plan_folds,
    validate_plan,
)
from .experiment_config import Cell, ExperimentConfig, load_profiles
from .federation import (
    CenterNode,
    Federation,
    FederatedTrainer,
    Framework,
    InputPipeline,
    RoundLogWriter,
    batch_size_for,
    cds_batch_size,
)
from .harmonization import HarmonizationReport, average_histogram, histogram_edges
from .phantomdata import CenterDataset, PhantomConstants, Prior, Volume, default_profiles, generate_center, prepare
from .results import (
    POOLED_FOLD,
    TOTAL_CENTER,
    PredictionRow,
    ResultRow,
    read_results_csv,
    results_frame,
    summarize,
    write_predictions_csv,
    write_results_csv,
    write_summary_json,
)
from .volume_io import read_dataset_tree

logger = get_logger(__name__)

RESULTS_FILE = 'results.csv'
SUMMARY_FILE = 'summary.json'
PREDICTIONS_FILE = 'predictions.csv'
ROUNDS_DIR = 'rounds'
HARMONIZATION_DIR = 'harmonization'


def load_datasets(config: ExperimentConfig) -> List[CenterDataset]:
    """Read the configured dataset tree or generate phantoms from profiles."""
    dataset = config.dataset
    if dataset.directory is not None:
        logger.info(f"📂 Loading dataset from {dataset.directory}")
        return read_dataset_tree(dataset.directory)
    if dataset.profiles is not None:
        profiles, constants = load_profiles(dataset.profiles)
    else:
        profiles, constants = default_profiles(), PhantomConstants()
    logger.info(f"🧪 Generating {len(profiles)} phantom centers (seed {dataset.seed})")
    return [generate_center(profile, dataset.seed, constants) for profile in profiles]


def subject_table(datasets: Sequence[CenterDataset]) -> SubjectTable:
    return {d.center_id: {s.subject_id: int(s.label) for s in d.subjects} for d in datasets}


@dataclass
class FoldOutcome:
    cell: Cell
    seed: int
    fold: int
    predictions: List[Prediction]
    rounds: int
    best_round: int
    best_validation: float


@dataclass
class ExperimentResult:
    fingerprint: str
    outcomes: List[FoldOutcome] = field(default_factory=list)
    rows: List[ResultRow] = field(default_factory=list)
    predictions: List[PredictionRow] = field(default_factory=list)
    summary: List[Dict] = field(default_factory=list)

    def total_auc(self, cell: Cell, seed: int) -> float:
        framework, scheme, tier, prior = cell.key
        for row in self.rows:
            if (row.framework, row.scheme, row.tier, row.prior, row.seed) == (framework, scheme, tier, prior, seed) \
                    and row.fold == POOLED_FOLD and row.center == TOTAL_CENTER:
                return row.auc
        raise KeyError((cell.key, seed))


def _both_classes(predictions: Sequence[Prediction]) -> bool:
    return len({p.label for p in predictions}) == 2


def result_rows(cell: Cell, seed: int, outcomes: Sequence[FoldOutcome]) -> List[ResultRow]:
    """Per-fold and fold-pooled AUCs, overall and per center; undefined AUCs are skipped."""
    framework, scheme, tier, prior = cell.key
    rows = []

    def emit(fold: str, predictions: Sequence[Prediction]) -> None:
        if _both_classes(predictions):
            rows.append(ResultRow(framework, scheme, tier, prior, fold, seed, TOTAL_CENTER, auc_of(predictions)))
        for center, value in auc_by_center(predictions).items():
            rows.append(ResultRow(framework, scheme, tier, prior, fold, seed, center, value))

    pooled = []
    for outcome in sorted(outcomes, key=lambda o: o.fold):
        emit(str(outcome.fold), outcome.predictions)
        pooled.extend(outcome.predictions)
    emit(POOLED_FOLD, pooled)
    return rows


class ExperimentRunner:
    """Runs the whole configured grid, optionally writing every result file."""

    def __init__(self, config: ExperimentConfig, jobs: int = 1, write_outputs: bool = True):
        self.config = config
        self.jobs = max(1, jobs)
        self.write_outputs = write_outputs
        self.output_dir = Path(config.output_dir)
        self._datasets: Optional[List[CenterDataset]] = None
        self._prepared: Optional[Dict[str, Dict[str, List[Volume]]]] = None
        self._plans: Dict[EvaluationScheme, FoldPlan] = {}
        self._references: Dict[Tuple, object] = {}
        self._reference_lock = Lock()

    @property
    def datasets(self) -> List[CenterDataset]:
        if self._datasets is None:
            self._datasets = load_datasets(self.config)
        return self._datasets

    def plan(self, scheme: EvaluationScheme) -> FoldPlan:
        scheme = EvaluationScheme(scheme)
        if scheme not in self._plans:
            table = subject_table(self.datasets)
            plan = plan_folds(scheme, table, self.config.split_seed)
            validate_plan(plan, table)
            self._plans[scheme] = plan
        return self._plans[scheme]

    def _prepare(self) -> Dict[str, Dict[str, List[Volume]]]:
        """Resampled and cropped volumes: center -> subject -> [ED, ES]."""
        if self._prepared is None:
            spacing, window = self.config.dataset.target_spacing, self.config.dataset.window
            subjects = [s for d in self.datasets for s in d.subjects]

            def work(subject):
                return [prepare(v, spacing, window) for v in subject.volumes]

            if self.jobs > 1:
                with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                    prepared = list(pool.map(work, subjects))
            else:
                prepared = [work(s) for s in subjects]
            table: Dict[str, Dict[str, List[Volume]]] = {}
            for subject, volumes in zip(subjects, prepared):
                table.setdefault(subject.center_id, {})[subject.subject_id] = volumes
            self._prepared = table
            logger.info(f"📐 Prepared {2 * len(subjects)} volumes at {spacing} mm, window {window}")
        return self._prepared

    def _nodes(self, fold: Fold, pipeline: InputPipeline) -> List[CenterNode]:
        prepared = self._prepare()
        roles = {s: 'train' for s in fold.train}
        roles.update({s: 'validation' for s in fold.validation})
        roles.update({s: 'test' for s in fold.test})
        nodes = []
        for center_id in sorted(prepared):
            volumes: Dict[str, List[Volume]] = {'train': [], 'validation': [], 'test': []}
            for subject_id, pair in prepared[center_id].items():
                volumes[roles[subject_id]].extend(pair)
            nodes.append(CenterNode(center_id, volumes, pipeline, self.config.model_spec))
        return nodes

    def _reference(self, scheme: EvaluationScheme, fold: Fold, prior: Prior):
        """
        Average reference histogram of the fold's training centers.

        Computed once per (scheme, fold, prior) through the centers' public
        aggregate interface; test-only centers take no part.
        """
        key = (scheme, fold.index, prior)
        with self._reference_lock:
            if key in self._references:
                return self._references[key]
            pipeline = InputPipeline(prior=prior, harmonize=True)
            nodes = [n for n in self._nodes(fold, pipeline) if n.sample_count + n.validation_count > 0]
            bounds = [n.intensity_range() for n in nodes]
            edges = histogram_edges(min(b[0] for b in bounds), max(b[1] for b in bounds), self.config.dataset.bins)
            reference = average_histogram([n.histogram_aggregate(edges) for n in nodes])

            report = HarmonizationReport(scheme=scheme.value, fold=fold.index, reference=reference)
            for node in nodes:
                node.standardize(reference)
                report.before[node.center_id] = node.histogram_aggregate(edges).mean_histogram().tolist()
                report.after[node.center_id] = node.histogram_aggregate(edges, matched=True).mean_histogram().tolist()
            logger.debug(f"🔍 {scheme.value} fold {fold.index} ({prior.value}): reference from "
                         f"{', '.join(reference.centers)}; L1 {report.l1_before:.3f} -> {report.l1_after:.3f}")
            if self.write_outputs:
                report.write(self.output_dir / HARMONIZATION_DIR / prior.value)
            self._references[key] = reference
            return reference

    def run_fold(self, cell: Cell, seed: int, fold_index: int) -> FoldOutcome:
        config = self.config
        fold = self.plan(cell.scheme).folds[fold_index]
        pipeline = InputPipeline(prior=cell.prior, harmonize=config.harmonize, tier=cell.tier,
                                 apply_probability=config.apply_probability, augmentation_seed=seed)
        nodes = self._nodes(fold, pipeline)
        reference = self._reference(cell.scheme, fold, cell.prior) if config.harmonize else None
        for node in nodes:
            node.standardize(reference)

        federation = Federation(
            centers=[n for n in nodes if n.sample_count > 0],
            framework=cell.framework,
            trainer=dataclasses.replace(config.trainer, seed=seed),
            model_spec=config.model_spec,
            fixed_weights=config.fixed_weights,
        )
        writer = None
        if self.write_outputs:
            writer = RoundLogWriter(
                self.output_dir / ROUNDS_DIR / f"{cell.slug}_seed{seed}_fold{fold_index}.jsonl",
                context=dict(zip(('framework', 'scheme', 'tier', 'prior'), cell.key), seed=seed, fold=fold_index),
            )
        trainer = FederatedTrainer(federation, seed, round_log=writer)
        trainer.run()
        predictions = trainer.predict([n for n in nodes if n.test_count > 0], 'test')
        state = trainer.state
        logger.debug(f"🔍 {cell.slug} seed {seed} fold {fold_index}: {state.completed_rounds} rounds, "
                     f"best validation AUC {state.best_score:.3f} at round {state.best_round}")
        return FoldOutcome(cell=cell, seed=seed, fold=fold_index, predictions=predictions,
                           rounds=state.completed_rounds, best_round=state.best_round,
                           best_validation=state.best_score)

    def jobs_list(self) -> List[Tuple[Cell, int, int]]:
        return [(cell, seed, f)
                for cell in self.config.cells()
                for seed in self.config.seeds
                for f in range(self.plan(cell.scheme).fold_count)]

    def run(self) -> ExperimentResult:
        config = self.config
        if self.write_outputs:
            shutil.rmtree(self.output_dir / ROUNDS_DIR, ignore_errors=True)
        work = self.jobs_list()
        self._prepare()
        logger.info(f"🚀 Running {len(config.cells())} cells x {len(config.seeds)} seeds "
                    f"({len(work)} fold trainings, {self.jobs} jobs)")

        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                outcomes = list(pool.map(lambda job: self.run_fold(*job), work))
        else:
            outcomes = [self.run_fold(*job) for job in work]

        result = ExperimentResult(fingerprint=config.fingerprint, outcomes=outcomes)
        grouped: Dict[Tuple[Cell, int], List[FoldOutcome]] = {}
        for outcome in outcomes:
            grouped.setdefault((outcome.cell, outcome.seed), []).append(outcome)
        for (cell, seed), cell_outcomes in grouped.items():
            result.rows.extend(result_rows(cell, seed, cell_outcomes))
            framework, scheme, tier, prior = cell.key
            for outcome in cell_outcomes:
                result.predictions.extend(
                    PredictionRow(framework, scheme, tier, prior, seed, outcome.fold, p.center_id,
                                  p.subject_id, p.timepoint, p.label, p.score)
                    for p in outcome.predictions
                )
            try:
                logger.info(f"✅ {cell.slug} seed {seed}: AUC {result.total_auc(cell, seed):.3f}")
            except KeyError:
                logger.warning(f"⚠️ {cell.slug} seed {seed}: pooled test set is single-class")

        if self.write_outputs:
            results_path = write_results_csv(result.rows, self.output_dir / RESULTS_FILE)
            write_predictions_csv(result.predictions, self.output_dir / PREDICTIONS_FILE)
            result.summary = summarize(read_results_csv(results_path))
            write_summary_json(result.summary, self.output_dir / SUMMARY_FILE,
                               metadata={'name': config.name, 'fingerprint': config.fingerprint})
            logger.info(f"💾 Results written to {self.output_dir}")
        else:
            result.summary = summarize(results_frame(result.rows))
        return result

    def describe(self) -> List[str]:
        """Human-readable plan: folds, batch sizes and reference scope, without training."""
        config = self.config
        iterations = config.trainer.iterations_per_round
        lines = [f"Experiment {config.name} ({config.fingerprint})",
                 f"  cells: {len(config.cells())}, seeds: {list(config.seeds)}, output: {self.output_dir}"]
        centers = {d.center_id: d for d in self.datasets}
        for scheme in config.schemes:
            plan = self.plan(scheme)
            lines.append(f"  scheme {scheme.value}: {plan.fold_count} folds")
            for fold in plan.folds:
                train = {c: 2 * sum(1 for s in d.subjects if s.subject_id in set(fold.train))
                         for c, d in centers.items()}
                val = {c: 2 * sum(1 for s in d.subjects if s.subject_id in set(fold.validation))
                       for c, d in centers.items()}
                training = sorted(c for c in centers if train[c] + val[c] > 0)
                lines.append(f"    fold {fold.index}: test {', '.join(fold.test_centers)} "
                             f"({2 * len(fold.test)} samples), validation {sum(val.values())} samples")
                lines.append(f"      reference histogram from: {', '.join(training)}")
                for framework in config.frameworks:
                    if framework is Framework.CDS:
                        n = sum(train.values())
                        k = sum(1 for c in training if train[c] > 0)
                        lines.append(f"      cds: pooled {n} samples, batch {cds_batch_size(n, k, iterations)}, "
                                     f"{k * iterations} steps per round")
                    else:
                        sizes = ', '.join(f"{c}={batch_size_for(train[c], iterations)}"
                                          for c in training if train[c] > 0)
                        lines.append(f"      {framework.value}: batch sizes {sizes}")
        return lines
