"""
Cross-validation plans, AUC and across-seed statistics.

Two schemes are supported. Collaborative cross-validation (CCV) has every
center give a fifth of its subjects to each fold's test set, so test data
come from sites seen in training. Leave-center-out (LCO) tests each fold on
one whole center that took no part in training. In both, a stratified tenth
of each training center's remaining subjects is held out for validation.

Plans are over subjects, so both phases of a subject always land together.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .exceptions import FoldPlanError, MetricError
from .seeding import derive_rng

CCV_FOLDS = 5
VALIDATION_FRACTION = 0.1

# center_id -> {subject_id: label}
SubjectTable = Mapping[str, Mapping[str, int]]


class EvaluationScheme(str, Enum):
    CCV = 'ccv'
    LCO = 'lco'


@dataclass(frozen=True)
class Fold:
    index: int
    train: Tuple[str, ...]
    validation: Tuple[str, ...]
    test: Tuple[str, ...]
    test_centers: Tuple[str, ...]

    def role_of(self, subject_id: str) -> str:
        for role in ('train', 'validation', 'test'):
            if subject_id in getattr(self, role):
                return role
        raise KeyError(subject_id)


@dataclass(frozen=True)
class FoldPlan:
    scheme: EvaluationScheme
    folds: Tuple[Fold, ...]
    seed: int

    @property
    def fold_count(self) -> int:
        return len(self.folds)


@dataclass(frozen=True)
class Prediction:
    """One scored test or validation sample; carries no image data"""
    center_id: str
    subject_id: str
    timepoint: str
    label: int
    score: float


def largest_remainder(total: int, quotas: Sequence[float]) -> List[int]:
    """Integer allocation summing to ``total`` that rounds ``quotas`` by largest remainder."""
    floors = [int(math.floor(q)) for q in quotas]
    left = total - sum(floors)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in order[:max(left, 0)]:
        floors[i] += 1
    return floors


def _by_label(subjects: Mapping[str, int]) -> Dict[int, List[str]]:
    groups: Dict[int, List[str]] = {}
    for subject_id in sorted(subjects):
        groups.setdefault(int(subjects[subject_id]), []).append(subject_id)
    return groups


def _check_table(table: SubjectTable) -> None:
    seen = set()
    for center_id in table:
        for subject_id, label in table[center_id].items():
            if subject_id in seen:
                raise FoldPlanError(f"subject id {subject_id} appears in more than one center")
            if int(label) not in (0, 1):
                raise FoldPlanError(f"{center_id}/{subject_id}: label must be 0 or 1, got {label}")
            seen.add(subject_id)


def _validation_split(subjects: Mapping[str, int], seed: int, *keys) -> Tuple[List[str], List[str]]:
    """Stratified train/validation split of one center's non-test subjects."""
    groups = _by_label(subjects)
    n = sum(len(g) for g in groups.values())
    if n == 0:
        return [], []
    n_val = int(math.floor(VALIDATION_FRACTION * n + 0.5))
    if n >= 2:
        n_val = max(n_val, 1)
    labels = sorted(groups)
    counts = largest_remainder(n_val, [len(groups[c]) * n_val / n for c in labels])

    train, validation = [], []
    for label, count in zip(labels, counts):
        members = list(groups[label])
        derive_rng(seed, 'validation', *keys, label).shuffle(members)
        validation.extend(members[:count])
        train.extend(members[count:])
    return sorted(train), sorted(validation)


def plan_ccv(table: SubjectTable, seed: int, folds: int = CCV_FOLDS) -> FoldPlan:
    """
    Stratified k-fold plan where every center contributes to every test fold.

    Within a center, subjects are shuffled per class and dealt round-robin
    over the folds; the dealing continues across centers so fold sizes stay
    within one subject of each other overall.
    """
    _check_table(table)
    if not table:
        raise FoldPlanError("no centers to plan folds for")

    assignment: Dict[str, int] = {}
    position = 0
    for center_id in sorted(table):
        subjects = table[center_id]
        if len(subjects) < folds:
            raise FoldPlanError(
                f"center {center_id} has {len(subjects)} subjects, too small for {folds} non-empty test parts"
            )
        groups = _by_label(subjects)
        for label in sorted(groups):
            members = list(groups[label])
            derive_rng(seed, 'ccv', center_id, label).shuffle(members)
            for subject_id in members:
                assignment[subject_id] = position % folds
                position += 1

    plan = []
    for f in range(folds):
        train, validation, test = [], [], []
        for center_id in sorted(table):
            subjects = table[center_id]
            test.extend(s for s in sorted(subjects) if assignment[s] == f)
            remaining = {s: l for s, l in subjects.items() if assignment[s] != f}
            t, v = _validation_split(remaining, seed, EvaluationScheme.CCV.value, f, center_id)
            train.extend(t)
            validation.extend(v)
        plan.append(Fold(index=f, train=tuple(train), validation=tuple(validation),
                         test=tuple(sorted(test)), test_centers=tuple(sorted(table))))
    return FoldPlan(scheme=EvaluationScheme.CCV, folds=tuple(plan), seed=seed)


def plan_lco(table: SubjectTable, seed: int) -> FoldPlan:
    """One fold per center, testing on that center alone."""
    _check_table(table)
    if len(table) < 2:
        raise FoldPlanError("leave-center-out needs at least two centers")

    plan = []
    for f, held_out in enumerate(sorted(table)):
        train, validation = [], []
        for center_id in sorted(table):
            if center_id == held_out:
                continue
            t, v = _validation_split(table[center_id], seed, EvaluationScheme.LCO.value, f, center_id)
            train.extend(t)
            validation.extend(v)
        plan.append(Fold(index=f, train=tuple(train), validation=tuple(validation),
                         test=tuple(sorted(table[held_out])), test_centers=(held_out,)))
    return FoldPlan(scheme=EvaluationScheme.LCO, folds=tuple(plan), seed=seed)


def plan_folds(scheme: EvaluationScheme, table: SubjectTable, seed: int) -> FoldPlan:
    if EvaluationScheme(scheme) is EvaluationScheme.CCV:
        return plan_ccv(table, seed)
    return plan_lco(table, seed)


def validate_plan(plan: FoldPlan, table: SubjectTable) -> None:
    """Raise ``FoldPlanError`` unless every fold partitions the subjects."""
    everyone = {s for center in table.values() for s in center}
    for fold in plan.folds:
        train, validation, test = set(fold.train), set(fold.validation), set(fold.test)
        if train & validation or train & test or validation & test:
            raise FoldPlanError(f"fold {fold.index}: train, validation and test overlap")
        if train | validation | test != everyone:
            raise FoldPlanError(f"fold {fold.index}: does not cover every subject")
    tested = [s for fold in plan.folds for s in fold.test]
    if sorted(tested) != sorted(everyone):
        raise FoldPlanError("test sets do not partition the subjects")


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic.

    Ties between a positive and a negative count one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores for {labels.size} labels")
    positives = labels == 1
    n_pos = int(positives.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise MetricError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_of(predictions: Iterable[Prediction]) -> float:
    predictions = list(predictions)
    return auc([p.score for p in predictions], [p.label for p in predictions])


def auc_by_center(predictions: Sequence[Prediction]) -> Dict[str, float]:
    """Per-center AUC; centers whose predictions are single-class are left out."""
    result = {}
    for center_id in sorted({p.center_id for p in predictions}):
        own = [p for p in predictions if p.center_id == center_id]
        if len({p.label for p in own}) == 2:
            result[center_id] = auc_of(own)
    return result


def mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation; sd is 0 for a single value."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise MetricError("no values to summarize")
    sd = float(array.std(ddof=1)) if array.size > 1 else 0.0
    return float(array.mean()), sd
