"""
Privacy-preserving intensity standardization.

Every center summarizes its own subjects as a ``HistogramAggregate`` (the sum of
mass-1 subject histograms plus a subject count). The server averages those
aggregates into a ``ReferenceHistogram`` without ever seeing a subject, and each
center then maps its volumes onto the reference with a piecewise-linear
landmark transform followed by a rescale to [0, 1].
"""

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from core.logging_config import get_logger

from .exceptions import HarmonizationError
from .phantomdata import Volume

logger = get_logger(__name__)

LANDMARK_PERCENTILES = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)
DEFAULT_BINS = 256


class Region(str, Enum):
    WHOLE_IMAGE = 'whole-image'
    MASK_ONLY = 'mask-only'


def _selection(volume: Volume, region: Region) -> np.ndarray:
    if Region(region) is Region.MASK_ONLY:
        values = volume.intensities[volume.mask > 0]
    else:
        values = volume.intensities.reshape(-1)
    if values.size == 0:
        raise HarmonizationError(f"{volume.sample_id}: no voxels selected for region {Region(region).value}")
    return values


def intensity_range(volumes: Iterable[Volume], region: Region) -> Tuple[float, float]:
    """Smallest and largest selected intensity over ``volumes``."""
    low, high = np.inf, -np.inf
    for volume in volumes:
        values = _selection(volume, region)
        low = min(low, float(values.min()))
        high = max(high, float(values.max()))
    if not np.isfinite(low):
        raise HarmonizationError("no volumes to take an intensity range from")
    return low, high


def histogram_edges(low: float, high: float, bins: int = DEFAULT_BINS) -> np.ndarray:
    if bins < 1:
        raise HarmonizationError(f"need at least one bin, got {bins}")
    if not high > low:
        raise HarmonizationError(f"histogram range is empty: [{low}, {high}]")
    return np.linspace(low, high, bins + 1)


def subject_histogram(volume: Volume, region: Region,
                      bins: Union[int, np.ndarray] = DEFAULT_BINS) -> np.ndarray:
    """
    Normalized histogram (total mass 1) of the selected voxels.

    ``bins`` is either a bin count over the selection's own range or shared
    edges; values outside shared edges fall into the first or last bin.
    """
    values = _selection(volume, region)
    if np.isscalar(bins) or np.ndim(bins) == 0:
        counts, _ = np.histogram(values, bins=int(bins))
    else:
        edges = np.asarray(bins, dtype=np.float64)
        counts, _ = np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)
    return counts / values.size


@dataclass(frozen=True, eq=False)
class HistogramAggregate:
    """Sum of one center's subject histograms on shared bins"""
    center_id: str
    bin_edges: np.ndarray
    counts: np.ndarray
    sample_count: int

    def __post_init__(self):
        edges = np.array(self.bin_edges, dtype=np.float64)
        counts = np.array(self.counts, dtype=np.float64)
        if edges.ndim != 1 or counts.shape != (edges.size - 1,):
            raise HarmonizationError(f"{self.center_id}: {counts.size} counts do not fit {edges.size} edges")
        if np.any(np.diff(edges) <= 0):
            raise HarmonizationError(f"{self.center_id}: bin edges must be ascending")
        if np.any(counts < 0):
            raise HarmonizationError(f"{self.center_id}: negative histogram counts")
        if self.sample_count < 0:
            raise HarmonizationError(f"{self.center_id}: negative sample count")
        edges.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, 'bin_edges', edges)
        object.__setattr__(self, 'counts', counts)

    @classmethod
    def empty(cls, center_id: str, bin_edges: np.ndarray) -> 'HistogramAggregate':
        return cls(center_id, bin_edges, np.zeros(len(bin_edges) - 1), 0)

    @classmethod
    def from_volumes(cls, center_id: str, volumes: Iterable[Volume], region: Region,
                     bin_edges: np.ndarray) -> 'HistogramAggregate':
        aggregate = cls.empty(center_id, bin_edges)
        for volume in volumes:
            aggregate = aggregate.add(subject_histogram(volume, region, aggregate.bin_edges))
        return aggregate

    def add(self, histogram: np.ndarray) -> 'HistogramAggregate':
        return HistogramAggregate(self.center_id, self.bin_edges, self.counts + histogram, self.sample_count + 1)

    def merge(self, other: 'HistogramAggregate') -> 'HistogramAggregate':
        if other.center_id != self.center_id:
            raise HarmonizationError(f"cannot merge {other.center_id} into {self.center_id}")
        if not np.array_equal(other.bin_edges, self.bin_edges):
            raise HarmonizationError(f"{self.center_id}: merged aggregates use different bins")
        return HistogramAggregate(self.center_id, self.bin_edges, self.counts + other.counts,
                                  self.sample_count + other.sample_count)

    def mean_histogram(self) -> np.ndarray:
        if self.sample_count == 0:
            raise HarmonizationError(f"{self.center_id}: aggregate holds no subjects")
        return self.counts / self.sample_count


def density_percentiles(bin_edges: np.ndarray, density: np.ndarray,
                        percentiles: Sequence[float] = LANDMARK_PERCENTILES) -> np.ndarray:
    """Percentiles of a binned density, interpolating linearly inside each bin."""
    cdf = np.concatenate([[0.0], np.cumsum(density)])
    cdf = cdf / cdf[-1]
    values = []
    for p in percentiles:
        q = p / 100.0
        idx = int(np.clip(np.searchsorted(cdf, q, side='left'), 1, len(cdf) - 1))
        lo, hi = cdf[idx - 1], cdf[idx]
        fraction = 0.0 if hi <= lo else (q - lo) / (hi - lo)
        values.append(bin_edges[idx - 1] + fraction * (bin_edges[idx] - bin_edges[idx - 1]))
    return np.array(values)


@dataclass(frozen=True, eq=False)
class ReferenceHistogram:
    bin_edges: np.ndarray
    density: np.ndarray
    landmarks: np.ndarray
    centers: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for name in ('bin_edges', 'density', 'landmarks'):
            array = np.array(getattr(self, name), dtype=np.float64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        object.__setattr__(self, 'centers', tuple(self.centers))
        if np.any(np.diff(self.landmarks) < 0):
            raise HarmonizationError("reference landmarks must be nondecreasing")
        if np.unique(self.landmarks).size < 2:
            raise HarmonizationError("reference histogram is degenerate: all landmarks coincide")

    def to_dict(self) -> Dict:
        return {
            'bin_edges': self.bin_edges.tolist(),
            'density': self.density.tolist(),
            'landmarks': self.landmarks.tolist(),
            'percentiles': list(LANDMARK_PERCENTILES),
            'centers': list(self.centers),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Mapping) -> 'ReferenceHistogram':
        return cls(bin_edges=data['bin_edges'], density=data['density'],
                   landmarks=data['landmarks'], centers=tuple(data.get('centers', ())))


def average_histogram(aggregates: Sequence[HistogramAggregate]) -> ReferenceHistogram:
    """
    Subject-weighted average of the centers' histograms.

    Every subject carries weight 1/N with N the total subject count, so
    center k contributes N_k/N times its mean subject histogram.
    """
    if not aggregates:
        raise HarmonizationError("no histogram aggregates to average")
    ordered = sorted(aggregates, key=lambda a: a.center_id)
    edges = ordered[0].bin_edges
    for aggregate in ordered[1:]:
        if not np.array_equal(aggregate.bin_edges, edges):
            raise HarmonizationError(f"{aggregate.center_id} uses different bins than {ordered[0].center_id}")

    total = sum(a.sample_count for a in ordered)
    if total <= 0:
        raise HarmonizationError("aggregates hold no subjects")
    summed = np.zeros_like(ordered[0].counts)
    for aggregate in ordered:
        summed = summed + aggregate.counts
    density = summed / summed.sum()
    return ReferenceHistogram(
        bin_edges=edges,
        density=density,
        landmarks=density_percentiles(edges, density),
        centers=tuple(a.center_id for a in ordered),
    )


def _landmark_map(source: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # Tied source landmarks collapse into one knot at the mean of their targets
    knots, inverse = np.unique(source, return_inverse=True)
    values = np.array([target[inverse == i].mean() for i in range(knots.size)])
    return knots, values


def match_histogram(volume: Volume, reference: ReferenceHistogram, region: Region) -> Volume:
    """
    Map the volume's landmark percentiles onto the reference landmarks.

    The map is linear between landmarks and clamps outside the outer ones.
    Under ``MASK_ONLY`` voxels outside the mask become 0.
    """
    values = _selection(volume, region)
    source = np.percentile(values, LANDMARK_PERCENTILES)
    if source[-1] <= source[0]:
        raise HarmonizationError(f"{volume.sample_id}: constant image cannot be matched")
    knots, targets = _landmark_map(source, reference.landmarks)
    mapped = np.interp(volume.intensities, knots, targets)
    if Region(region) is Region.MASK_ONLY:
        mapped = np.where(volume.mask > 0, mapped, 0.0)
    return volume.with_data(intensities=mapped)


def rescale_unit(volume: Volume, region: Region) -> Volume:
    """Affine map of the region onto [0, 1]; outside a mask region is 0."""
    values = _selection(volume, region)
    low, high = float(values.min()), float(values.max())
    if not high > low:
        raise HarmonizationError(f"{volume.sample_id}: constant region cannot be rescaled")
    scaled = (volume.intensities - low) / (high - low)
    if Region(region) is Region.MASK_ONLY:
        scaled = np.where(volume.mask > 0, scaled, 0.0)
    return volume.with_data(intensities=scaled)


def mean_pairwise_l1(histograms: Mapping[str, np.ndarray]) -> float:
    """Mean L1 distance over all unordered pairs of histograms."""
    keys = sorted(histograms)
    pairs = list(itertools.combinations(keys, 2))
    if not pairs:
        return 0.0
    return float(np.mean([np.abs(histograms[a] - histograms[b]).sum() for a, b in pairs]))


@dataclass
class HarmonizationReport:
    """Per-center mean histograms before and after matching for one fold"""
    scheme: str
    fold: int
    reference: ReferenceHistogram
    before: Dict[str, List[float]] = field(default_factory=dict)
    after: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def l1_before(self) -> float:
        return mean_pairwise_l1({k: np.asarray(v) for k, v in self.before.items()})

    @property
    def l1_after(self) -> float:
        return mean_pairwise_l1({k: np.asarray(v) for k, v in self.after.items()})

    def to_dict(self) -> Dict:
        return {
            'scheme': self.scheme,
            'fold': self.fold,
            'reference': self.reference.to_dict(),
            'before': self.before,
            'after': self.after,
            'mean_pairwise_l1_before': self.l1_before,
            'mean_pairwise_l1_after': self.l1_after,
        }

    def write(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / f"{self.scheme}_fold{self.fold}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding='utf-8')
        logger.debug(f"🔍 Harmonization report written to {path}")
        return path
