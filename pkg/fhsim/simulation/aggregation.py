"""
Server-side model aggregation.

Per-center parameter vectors are combined into one global model. The weights
are either proportional to each center's sample count (FederatedAveraging),
equal for every center (equal voting), or supplied by the caller. Terms are
summed in ascending ``center_id`` order so the result is bit-reproducible no
matter how the updates were collected.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .classifier import ParameterVector
from .exceptions import AggregationError, LayoutMismatchError


class WeightScheme(str, Enum):
    SAMPLE_PROPORTIONAL = 'sample-proportional'
    EQUAL_VOTE = 'equal-vote'
    FIXED = 'fixed'


@dataclass(frozen=True)
class CenterUpdate:
    """Locally trained parameters from one center plus its training-sample count"""
    center_id: str
    params: ParameterVector
    sample_count: int
    train_loss: Optional[float] = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise AggregationError(f"center {self.center_id} reported {self.sample_count} samples")


def _canonical(updates: Sequence[CenterUpdate]) -> List[CenterUpdate]:
    if not updates:
        raise AggregationError("cannot aggregate an empty list of updates")
    ordered = sorted(updates, key=lambda u: u.center_id)
    ids = [u.center_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate center ids in updates: {ids}")
    reference = ordered[0].params
    for update in ordered[1:]:
        if update.params.layout_id != reference.layout_id or len(update.params) != len(reference):
            raise LayoutMismatchError(
                f"update from {update.center_id} does not share the layout of {ordered[0].center_id}"
            )
    return ordered


def _weights(ordered: Sequence[CenterUpdate], scheme: WeightScheme,
             fixed_weights: Optional[Mapping[str, float]]) -> List[float]:
    scheme = WeightScheme(scheme)
    if scheme is WeightScheme.SAMPLE_PROPORTIONAL:
        total = sum(u.sample_count for u in ordered)
        if total <= 0:
            raise AggregationError("total sample count is zero")
        return [u.sample_count / total for u in ordered]
    if scheme is WeightScheme.EQUAL_VOTE:
        return [1.0 / len(ordered) for _ in ordered]

    if fixed_weights is None:
        raise AggregationError("the fixed scheme needs fixed_weights")
    missing = [u.center_id for u in ordered if u.center_id not in fixed_weights]
    if missing:
        raise AggregationError(f"no fixed weight for centers {missing}")
    raw = [float(fixed_weights[u.center_id]) for u in ordered]
    if any(w < 0 for w in raw):
        raise AggregationError("fixed weights must be nonnegative")
    total = sum(raw)
    if total <= 0:
        raise AggregationError("fixed weights sum to zero")
    return [w / total for w in raw]


def effective_weights(updates: Sequence[CenterUpdate], scheme: WeightScheme,
                      fixed_weights: Optional[Mapping[str, float]] = None) -> List[Tuple[str, float]]:
    """Vote of each center, in canonical (ascending center_id) order; sums to 1."""
    ordered = _canonical(updates)
    return list(zip([u.center_id for u in ordered], _weights(ordered, scheme, fixed_weights)))


def aggregate(updates: Sequence[CenterUpdate], scheme: WeightScheme,
              fixed_weights: Optional[Mapping[str, float]] = None) -> ParameterVector:
    """
    Convex combination of the centers' parameter vectors.

    A single update is returned unchanged under every scheme.
    """
    ordered = _canonical(updates)
    weights = _weights(ordered, scheme, fixed_weights)
    if len(ordered) == 1:
        return ordered[0].params

    combined = np.zeros_like(ordered[0].params.values)
    for weight, update in zip(weights, ordered):
        combined = combined + weight * update.params.values
    return ParameterVector(values=combined, layout_id=ordered[0].params.layout_id)


def weight_table(updates: Sequence[CenterUpdate], scheme: WeightScheme,
                 fixed_weights: Optional[Mapping[str, float]] = None) -> Dict[str, float]:
    """``effective_weights`` as a mapping, for round logs"""
    return dict(effective_weights(updates, scheme, fixed_weights))
