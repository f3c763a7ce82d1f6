"""
Result files of an experiment run.

- ``results.csv``: one AUC per (framework, scheme, tier, prior, fold, seed, center).
  ``fold`` is the fold index or ``all`` for predictions pooled over folds;
  ``center`` is a center id or ``total`` for all test centers together.
- ``summary.json``: mean and across-seed standard deviation of the pooled
  (``fold == all``) AUCs per (framework, scheme, tier, prior).
- ``predictions.csv``: every pooled test prediction.

Rows are written in a canonical order with shortest round-trip float
formatting, so a fixed config always produces the same bytes.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .exceptions import FhsimError

RESULT_COLUMNS = ['framework', 'scheme', 'tier', 'prior', 'fold', 'seed', 'center', 'auc']
PREDICTION_COLUMNS = ['framework', 'scheme', 'tier', 'prior', 'seed', 'fold', 'center',
                      'subject_id', 'timepoint', 'label', 'score']
GROUP_COLUMNS = ['framework', 'scheme', 'tier', 'prior']
POOLED_FOLD = 'all'
TOTAL_CENTER = 'total'

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ResultRow:
    framework: str
    scheme: str
    tier: str
    prior: str
    fold: str
    seed: int
    center: str
    auc: float

    def sort_key(self) -> Tuple:
        fold = (1, 0) if self.fold == POOLED_FOLD else (0, int(self.fold))
        center = (1, '') if self.center == TOTAL_CENTER else (0, self.center)
        return (self.framework, self.scheme, self.tier, self.prior, self.seed, fold, center)


@dataclass(frozen=True)
class PredictionRow:
    framework: str
    scheme: str
    tier: str
    prior: str
    seed: int
    fold: int
    center: str
    subject_id: str
    timepoint: str
    label: int
    score: float

    def sort_key(self) -> Tuple:
        return (self.framework, self.scheme, self.tier, self.prior, self.seed, self.fold,
                self.center, self.subject_id, self.timepoint)


def results_frame(rows: Iterable[ResultRow]) -> pd.DataFrame:
    ordered = sorted(rows, key=ResultRow.sort_key)
    return pd.DataFrame([asdict(r) for r in ordered], columns=RESULT_COLUMNS)


def write_results_csv(rows: Iterable[ResultRow], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    results_frame(rows).to_csv(path, index=False, lineterminator='\n')
    return path


def read_results_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FhsimError(f"{path} does not exist")
    frame = pd.read_csv(path, dtype={'fold': str, 'center': str, 'seed': int, 'auc': float},
                        keep_default_na=False)
    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise FhsimError(f"{path}: missing columns {missing}")
    return frame


def write_predictions_csv(rows: Iterable[PredictionRow], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=PredictionRow.sort_key)
    frame = pd.DataFrame([asdict(r) for r in ordered], columns=PREDICTION_COLUMNS)
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def _stats(series: pd.Series) -> Dict[str, float]:
    sd = float(series.std(ddof=1)) if len(series) > 1 else 0.0
    return {'mean': float(series.mean()), 'sd': sd, 'n': int(len(series))}


def summarize(frame: pd.DataFrame) -> List[Dict]:
    """
    Across-seed mean and sd of the fold-pooled AUCs.

    One entry per (framework, scheme, tier, prior), with the total AUC and
    one entry per test center.
    """
    pooled = frame[frame['fold'] == POOLED_FOLD]
    summary = []
    for key, group in pooled.groupby(GROUP_COLUMNS, sort=True):
        entry = dict(zip(GROUP_COLUMNS, key))
        entry['seeds'] = sorted(int(s) for s in group['seed'].unique())
        totals = group[group['center'] == TOTAL_CENTER]['auc']
        entry['auc_total'] = _stats(totals) if len(totals) else None
        entry['auc_per_center'] = {
            center: _stats(rows['auc'])
            for center, rows in group[group['center'] != TOTAL_CENTER].groupby('center', sort=True)
        }
        summary.append(entry)
    return summary


def write_summary_json(summary: Sequence[Dict], path: PathLike, metadata: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {**(metadata or {}), 'rows': list(summary)}
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def summary_table(summary: Sequence[Dict]) -> pd.DataFrame:
    """Flat table of the total AUC per grid cell, for printing"""
    records = []
    for entry in summary:
        total = entry.get('auc_total') or {}
        records.append({**{c: entry[c] for c in GROUP_COLUMNS},
                        'auc_mean': total.get('mean'), 'auc_sd': total.get('sd'),
                        'seeds': len(entry['seeds'])})
    return pd.DataFrame(records, columns=GROUP_COLUMNS + ['auc_mean', 'auc_sd', 'seeds'])
