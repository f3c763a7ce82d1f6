"""
Training orchestration for collaborative data sharing (CDS) and federated
learning (FL).

A ``CenterNode`` owns one center's volumes for one fold. Its public methods
only ever hand out parameter vectors, sample counts, scalar losses and
intensity bounds, histogram aggregates, and anonymous prediction records.
The orchestration in ``FederatedTrainer`` is written purely against that
surface: each round every site runs a local SGD pass from the same global
model, the server aggregates, and the global model is scored on the pooled
validation split. The best-scoring round's model is kept.

Under CDS the centers' data are pooled into a single site first
(``pool_centers``), which then trains alone with the same number of SGD steps
per round as the whole federation.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from threading import Lock
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.logging_config import get_logger

from .aggregation import CenterUpdate, WeightScheme, aggregate, weight_table
from .augmentation import AugmentationTier, augment_volume
from .classifier import (
    LAYOUT_ID_BYTES,
    ModelSpec,
    ParameterVector,
    TrainerConfig,
    featurize,
    gradient_from_features,
    init_parameters,
    learning_rate_vector,
    loss_from_features,
    predict_features,
    sgd_step,
)
from .evaluation import Prediction, auc, auc_by_center
from .exceptions import FederationError
from .harmonization import (
    HistogramAggregate,
    ReferenceHistogram,
    Region,
    intensity_range,
    match_histogram,
    rescale_unit,
)
from .phantomdata import Prior, Volume, induce_prior
from .seeding import derive_rng

logger = get_logger(__name__)

IMPROVEMENT_TOLERANCE = 1e-9
ROLES = ('train', 'validation', 'test')


class Framework(str, Enum):
    CDS = 'cds'
    FL = 'fl'
    FL_EV = 'fl-ev'
    FL_FIXED = 'fl-fixed'

    @property
    def weight_scheme(self) -> Optional[WeightScheme]:
        return {
            Framework.CDS: None,
            Framework.FL: WeightScheme.SAMPLE_PROPORTIONAL,
            Framework.FL_EV: WeightScheme.EQUAL_VOTE,
            Framework.FL_FIXED: WeightScheme.FIXED,
        }[self]


@dataclass(frozen=True)
class InputPipeline:
    """How a center turns its cropped volumes into network inputs"""
    prior: Prior = Prior.MASKED
    harmonize: bool = True
    tier: AugmentationTier = AugmentationTier.NONE
    apply_probability: float = 0.5
    augmentation_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'prior', Prior(self.prior))
        object.__setattr__(self, 'tier', AugmentationTier(self.tier))

    @property
    def region(self) -> Region:
        if self.prior is Prior.BASELINE:
            return Region.WHOLE_IMAGE
        return Region.MASK_ONLY


def batch_size_for(center_size: int, iterations: int) -> int:
    if center_size < 1 or iterations < 1:
        raise FederationError(f"batch size needs positive sizes, got ({center_size}, {iterations})")
    return -(-center_size // iterations)


def cds_batch_size(n_train: int, center_count: int, iterations: int) -> int:
    """Pooled batch size giving the same number of SGD steps per round as the federation."""
    return batch_size_for(n_train, center_count * iterations)


def _sgd_pass(spec: ModelSpec, features: np.ndarray, labels: np.ndarray, params: ParameterVector,
              iterations: int, learning_rate, rng: np.random.Generator) -> Tuple[ParameterVector, float]:
    n = labels.shape[0]
    size = batch_size_for(n, iterations)
    order = rng.permutation(n)
    losses = []
    for i in range(iterations):
        # The last batches wrap around the shuffled order so every batch is full
        batch = order[(i * size + np.arange(size)) % n]
        x, y = features[batch], labels[batch]
        losses.append(loss_from_features(spec, params, x, y))
        params = sgd_step(params, gradient_from_features(spec, params, x, y), learning_rate)
    return params, float(np.mean(losses))


class CenterNode:
    """
    One training site and the only holder of its subjects' images.

    ``volumes`` maps a role (train, validation, test) to cropped volumes. The
    node must be standardized before it can train or predict.
    """

    def __init__(self, center_id: str, volumes: Mapping[str, Sequence[Volume]],
                 pipeline: InputPipeline, model_spec: ModelSpec, steps_multiplier: int = 1):
        unknown = set(volumes) - set(ROLES)
        if unknown:
            raise FederationError(f"{center_id}: unknown roles {sorted(unknown)}")
        self.center_id = center_id
        self._volumes: Dict[str, List[Volume]] = {
            role: sorted(volumes.get(role, ()), key=lambda v: (v.center_id, v.sample_id)) for role in ROLES
        }
        self._pipeline = pipeline
        self._spec = model_spec
        self._steps_multiplier = steps_multiplier
        self._reference: Optional[ReferenceHistogram] = None
        self._standardized: Optional[Dict[str, List[Volume]]] = None
        self._features: Dict[str, np.ndarray] = {}
        self._labels = {
            role: np.array([int(v.label) for v in self._volumes[role]], dtype=np.float64) for role in ROLES
        }

    def __repr__(self) -> str:
        counts = ', '.join(f"{role}={len(self._volumes[role])}" for role in ROLES)
        return f"CenterNode({self.center_id}: {counts})"

    @property
    def sample_count(self) -> int:
        """Training samples (each subject contributes ED and ES)"""
        return len(self._volumes['train'])

    @property
    def validation_count(self) -> int:
        return len(self._volumes['validation'])

    @property
    def test_count(self) -> int:
        return len(self._volumes['test'])

    def intensity_range(self) -> Tuple[float, float]:
        """Scalar bounds of the non-test intensities, for agreeing on shared histogram bins"""
        return intensity_range(self._volumes['train'] + self._volumes['validation'], self._pipeline.region)

    def histogram_aggregate(self, bin_edges: np.ndarray, matched: bool = False) -> HistogramAggregate:
        """
        Summed subject histograms over the non-test volumes.

        With ``matched`` the histograms are taken after mapping onto the
        current reference, before the unit rescale.
        """
        volumes = self._volumes['train'] + self._volumes['validation']
        region = self._pipeline.region
        if matched:
            if self._reference is None:
                raise FederationError(f"{self.center_id}: no reference histogram to match against")
            volumes = [match_histogram(v, self._reference, region) for v in volumes]
        return HistogramAggregate.from_volumes(self.center_id, volumes, region, bin_edges)

    def standardize(self, reference: Optional[ReferenceHistogram]) -> None:
        """Match every volume to ``reference`` (if any) and rescale to [0, 1]."""
        region = self._pipeline.region
        use_reference = reference if self._pipeline.harmonize else None
        standardized = {}
        for role in ROLES:
            out = []
            for volume in self._volumes[role]:
                if use_reference is not None:
                    volume = match_histogram(volume, use_reference, region)
                out.append(rescale_unit(volume, region))
            standardized[role] = out
        self._reference = use_reference
        self._standardized = standardized
        self._features = {}

    def _inputs(self, role: str) -> List[Volume]:
        if self._standardized is None:
            raise FederationError(f"{self.center_id}: standardize() must run before training or prediction")
        return self._standardized[role]

    def _role_features(self, role: str, epoch: Optional[int] = None) -> np.ndarray:
        pipeline = self._pipeline
        augmenting = role == 'train' and epoch is not None and pipeline.tier is not AugmentationTier.NONE
        if not augmenting and role in self._features:
            return self._features[role]

        inputs = []
        for volume in self._inputs(role):
            if augmenting:
                rng = derive_rng(pipeline.augmentation_seed, 'augment', volume.center_id, volume.sample_id, epoch)
                volume, _ = augment_volume(volume, pipeline.tier, rng, pipeline.apply_probability)
            inputs.append(induce_prior(volume, pipeline.prior))
        features = featurize(self._spec, inputs)
        if not augmenting:
            self._features[role] = features
        return features

    def local_round(self, params: ParameterVector, trainer: TrainerConfig, rng: np.random.Generator,
                    epoch: int = 0, learning_rate: Optional[Union[float, np.ndarray]] = None) -> CenterUpdate:
        """Run one round of local SGD starting from ``params``."""
        if self.sample_count == 0:
            raise FederationError(f"{self.center_id}: no training samples")
        rate = learning_rate_vector(self._spec, trainer) if learning_rate is None else learning_rate
        updated, mean_loss = _sgd_pass(
            self._spec,
            self._role_features('train', epoch),
            self._labels['train'],
            params,
            trainer.iterations_per_round * self._steps_multiplier,
            rate,
            rng,
        )
        return CenterUpdate(center_id=self.center_id, params=updated,
                            sample_count=self.sample_count, train_loss=mean_loss)

    def train_loss(self, params: ParameterVector) -> float:
        return loss_from_features(self._spec, params, self._role_features('train'), self._labels['train'])

    def predict(self, params: ParameterVector, role: str) -> List[Prediction]:
        """Scores for the validation or test samples, without image content."""
        if role not in ('validation', 'test'):
            raise FederationError(f"predictions are only released for validation and test, not {role}")
        volumes = self._inputs(role)
        if not volumes:
            return []
        scores = predict_features(self._spec, params, self._role_features(role))
        return [
            Prediction(center_id=v.center_id, subject_id=v.subject_id, timepoint=v.timepoint.value,
                       label=int(v.label), score=float(s))
            for v, s in zip(volumes, scores)
        ]


def local_round(center: CenterNode, params: ParameterVector, trainer: TrainerConfig,
                rng: np.random.Generator, epoch: int = 0,
                learning_rate: Optional[Union[float, np.ndarray]] = None) -> CenterUpdate:
    return center.local_round(params, trainer, rng, epoch=epoch, learning_rate=learning_rate)


def pool_centers(centers: Sequence[CenterNode]) -> CenterNode:
    """
    Ship every center's data to one server-side site (CDS).

    The pooled site runs ``K`` times as many SGD steps per round so a round
    covers the pooled data once, like a federated round does.
    """
    if not centers:
        raise FederationError("nothing to pool")
    ordered = sorted(centers, key=lambda c: c.center_id)
    pipeline, spec = ordered[0]._pipeline, ordered[0]._spec
    volumes = {role: [v for c in ordered for v in c._volumes[role]] for role in ROLES}
    pooled = CenterNode('+'.join(c.center_id for c in ordered), volumes, pipeline, spec,
                        steps_multiplier=len(ordered))
    reference = ordered[0]._reference
    if ordered[0]._standardized is not None:
        pooled.standardize(reference)
    return pooled


@dataclass
class Federation:
    centers: List[CenterNode]
    framework: Framework
    trainer: TrainerConfig
    model_spec: ModelSpec
    fixed_weights: Optional[Dict[str, float]] = None
    jobs: int = 1

    def __post_init__(self):
        self.framework = Framework(self.framework)
        if not self.centers:
            raise FederationError("a federation needs at least one center")
        ids = [c.center_id for c in self.centers]
        if len(set(ids)) != len(ids):
            raise FederationError(f"duplicate center ids: {ids}")
        for center in self.centers:
            if center.sample_count == 0:
                raise FederationError(f"{center.center_id}: no training samples")
        self.centers = sorted(self.centers, key=lambda c: c.center_id)

    @property
    def k(self) -> int:
        return len(self.centers)

    def sites(self) -> List[CenterNode]:
        """Training sites: the centers themselves, or a single pooled site under CDS."""
        if self.framework is Framework.CDS:
            return [pool_centers(self.centers)]
        return list(self.centers)


@dataclass
class RoundLog:
    round_index: int
    global_params: ParameterVector
    per_center_train_loss: Dict[str, float]
    validation_score: float
    per_center_validation: Dict[str, Optional[float]] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.validation_score <= 1.0:
            raise FederationError(f"validation score {self.validation_score} outside [0, 1]")

    def to_record(self) -> Dict:
        return {
            'round': self.round_index,
            'validation_auc': self.validation_score,
            'per_center_validation_auc': self.per_center_validation,
            'per_center_train_loss': self.per_center_train_loss,
            'weights': self.weights,
            'param_norm': float(np.linalg.norm(self.global_params.values)),
        }


class RoundLogWriter:
    """Appends one JSON object per round to a file"""

    def __init__(self, path: Union[str, Path], context: Optional[Dict] = None):
        self.path = Path(path)
        self.context = dict(context or {})
        self._lock = Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, log: RoundLog) -> None:
        record = {**self.context, **log.to_record()}
        with self._lock:
            with self.path.open('a', encoding='utf-8') as handle:
                handle.write(json.dumps(record, sort_keys=True) + '\n')


@dataclass
class TrainingState:
    """Everything needed to continue training after the last completed round"""
    completed_rounds: int
    global_params: ParameterVector
    best_params: ParameterVector
    best_score: float = -math.inf
    best_round: int = -1
    stale_rounds: int = 0
    stopped: bool = False

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('wb') as handle:
            np.savez(
                handle,
                layout_id=np.frombuffer(self.global_params.layout_id, dtype=np.uint8),
                global_params=self.global_params.values,
                best_params=self.best_params.values,
                scalars=np.array([self.best_score]),
                counters=np.array([self.completed_rounds, self.best_round, self.stale_rounds, int(self.stopped)]),
            )
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'TrainingState':
        with np.load(Path(path), allow_pickle=False) as data:
            layout_id = data['layout_id'].tobytes()
            if len(layout_id) != LAYOUT_ID_BYTES:
                raise FederationError(f"{path}: corrupt checkpoint layout id")
            completed, best_round, stale, stopped = (int(v) for v in data['counters'])
            return cls(
                completed_rounds=completed,
                global_params=ParameterVector(data['global_params'], layout_id),
                best_params=ParameterVector(data['best_params'], layout_id),
                best_score=float(data['scalars'][0]),
                best_round=best_round,
                stale_rounds=stale,
                stopped=bool(stopped),
            )


class FederatedTrainer:
    """
    Round-by-round training with validation-driven early stopping.

    The same loop serves FL (one site per center, aggregation after every
    round) and CDS (one pooled site, where aggregating a single update is the
    identity).
    """

    def __init__(self, federation: Federation, seed: int,
                 round_log: Optional[RoundLogWriter] = None, state: Optional[TrainingState] = None):
        self.federation = federation
        self.seed = seed
        self.round_log = round_log
        self.sites = federation.sites()
        if sum(site.validation_count for site in self.sites) == 0:
            raise FederationError("no validation samples to drive early stopping")
        self._scheme = federation.framework.weight_scheme or WeightScheme.SAMPLE_PROPORTIONAL
        if state is None:
            initial = init_parameters(federation.model_spec, seed)
            state = TrainingState(completed_rounds=0, global_params=initial, best_params=initial)
        self.state = state
        self.logs: List[RoundLog] = []

    @classmethod
    def resume(cls, federation: Federation, seed: int, checkpoint: Union[str, Path],
               round_log: Optional[RoundLogWriter] = None) -> 'FederatedTrainer':
        return cls(federation, seed, round_log=round_log, state=TrainingState.load(checkpoint))

    def checkpoint(self, path: Union[str, Path]) -> Path:
        return self.state.save(path)

    @property
    def finished(self) -> bool:
        return self.state.stopped or self.state.completed_rounds >= self.federation.trainer.max_epochs

    def _local_updates(self, epoch: int) -> List[CenterUpdate]:
        trainer = self.federation.trainer
        params = self.state.global_params

        def train(site: CenterNode) -> CenterUpdate:
            rng = derive_rng(self.seed, 'round', epoch, site.center_id)
            return site.local_round(params, trainer, rng, epoch=epoch)

        if self.federation.jobs > 1 and len(self.sites) > 1:
            with ThreadPoolExecutor(max_workers=min(self.federation.jobs, len(self.sites))) as pool:
                return list(pool.map(train, self.sites))
        return [train(site) for site in self.sites]

    def validate(self, params: ParameterVector) -> Tuple[float, Dict[str, Optional[float]]]:
        predictions = [p for site in self.sites for p in site.predict(params, 'validation')]
        labels = {p.label for p in predictions}
        if len(labels) < 2:
            raise FederationError("validation split holds a single class; AUC is undefined")
        score = auc([p.score for p in predictions], [p.label for p in predictions])
        per_center = auc_by_center(predictions)
        centers = sorted({p.center_id for p in predictions})
        return score, {c: per_center.get(c) for c in centers}

    def step(self) -> RoundLog:
        """Run one round: local training, aggregation, validation."""
        if self.finished:
            raise FederationError("training already finished")
        epoch = self.state.completed_rounds
        updates = self._local_updates(epoch)
        fixed = self.federation.fixed_weights
        global_params = aggregate(updates, self._scheme, fixed)
        score, per_center = self.validate(global_params)

        state = self.state
        state.completed_rounds = epoch + 1
        state.global_params = global_params
        if score > state.best_score + IMPROVEMENT_TOLERANCE:
            state.best_score = score
            state.best_params = global_params
            state.best_round = epoch
            state.stale_rounds = 0
        else:
            state.stale_rounds += 1
            if state.stale_rounds >= self.federation.trainer.patience:
                state.stopped = True
                logger.debug(f"🔍 Early stop after round {epoch} (best round {state.best_round})")

        log = RoundLog(
            round_index=epoch,
            global_params=global_params,
            per_center_train_loss={u.center_id: u.train_loss for u in updates},
            validation_score=score,
            per_center_validation=per_center,
            weights=weight_table(updates, self._scheme, fixed),
        )
        self.logs.append(log)
        if self.round_log is not None:
            self.round_log.write(log)
        return log

    def run(self) -> Tuple[ParameterVector, List[RoundLog]]:
        while not self.finished:
            self.step()
        return self.state.best_params, self.logs

    def predict(self, centers: Sequence[CenterNode], role: str = 'test') -> List[Prediction]:
        return [p for center in centers for p in center.predict(self.state.best_params, role)]


def run_federated(federation: Federation, seed: int,
                  round_log: Optional[RoundLogWriter] = None) -> Tuple[ParameterVector, List[RoundLog]]:
    """Federated training; returns the best-validation global model and every round's log."""
    if federation.framework is Framework.CDS:
        raise FederationError("run_federated needs an FL framework; use run_cds for pooled training")
    return FederatedTrainer(federation, seed, round_log=round_log).run()


def run_cds(federation: Federation, seed: int,
            round_log: Optional[RoundLogWriter] = None) -> Tuple[ParameterVector, List[RoundLog]]:
    """Pooled training on the union of the centers' data."""
    pooled = Federation(
        centers=federation.centers,
        framework=Framework.CDS,
        trainer=federation.trainer,
        model_spec=federation.model_spec,
        jobs=federation.jobs,
    )
    return FederatedTrainer(pooled, seed, round_log=round_log).run()


def train(federation: Federation, seed: int,
          round_log: Optional[RoundLogWriter] = None) -> Tuple[ParameterVector, List[RoundLog]]:
    if federation.framework is Framework.CDS:
        return run_cds(federation, seed, round_log)
    return run_federated(federation, seed, round_log)
