"""
Small differentiable binary classifiers.

Two architectures share one flat parameter layout convention:

- ``logistic``: ``[w (D), b]``
- ``mlp``: ``[W1 (D x H, row-major), b1 (H), w2 (H), b2]`` with a tanh hidden layer

Inputs are multi-channel volumes ``(channels, x, y, z)``; they are average-pooled
by ``downsample_factor`` (partial edge blocks average only the voxels they hold)
and flattened before the linear layers. All arithmetic is float64.
"""

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .exceptions import EmptyBatchError, LayoutMismatchError, NonFiniteError

LAYOUT_ID_BYTES = 16

# Keeps probabilities strictly inside (0, 1) when logits saturate
_PROBABILITY_EPS = 1e-15


class ModelKind(str, Enum):
    LOGISTIC = 'logistic'
    MLP = 'mlp'


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a classifier and the shape of the inputs it consumes"""
    kind: ModelKind
    input_shape: Tuple[int, int, int, int]
    hidden_width: int = 0
    downsample_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'kind', ModelKind(self.kind))
        object.__setattr__(self, 'input_shape', tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 4 or any(s < 1 for s in self.input_shape):
            raise ValueError(f"input_shape must be four positive ints, got {self.input_shape}")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be a positive integer")
        if self.kind is ModelKind.MLP and self.hidden_width < 1:
            raise ValueError("mlp models need hidden_width >= 1")
        if self.hidden_width < 0:
            raise ValueError("hidden_width must be nonnegative")

    @property
    def pooled_shape(self) -> Tuple[int, int, int, int]:
        f = self.downsample_factor
        c, x, y, z = self.input_shape
        return (c, math.ceil(x / f), math.ceil(y / f), math.ceil(z / f))

    @property
    def feature_count(self) -> int:
        return int(np.prod(self.pooled_shape))

    @property
    def parameter_count(self) -> int:
        d = self.feature_count
        if self.kind is ModelKind.LOGISTIC:
            return d + 1
        h = self.hidden_width
        return d * h + h + h + 1

    @property
    def feature_parameter_count(self) -> int:
        """Number of leading parameters that belong to the hidden (feature) layer"""
        if self.kind is ModelKind.LOGISTIC:
            return 0
        return self.feature_count * self.hidden_width + self.hidden_width

    @property
    def layout_id(self) -> bytes:
        token = f"{self.kind.value}|{self.input_shape}|{self.hidden_width}|{self.downsample_factor}"
        return hashlib.blake2b(token.encode('utf-8'), digest_size=LAYOUT_ID_BYTES).digest()


def _frozen_vector(values, what: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} contains non-finite values")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat float64 model weights tagged with the layout that produced them"""
    values: np.ndarray
    layout_id: bytes

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen_vector(self.values, 'ParameterVector'))
        if len(self.layout_id) != LAYOUT_ID_BYTES:
            raise ValueError(f"layout_id must be {LAYOUT_ID_BYTES} bytes")

    def __len__(self) -> int:
        return self.values.shape[0]

    def check_compatible(self, other: Union['ParameterVector', 'GradientVector']) -> None:
        if self.layout_id != other.layout_id or len(self) != len(other):
            raise LayoutMismatchError(
                f"layouts differ: {self.layout_id.hex()}[{len(self)}] vs "
                f"{other.layout_id.hex()}[{len(other)}]"
            )

    def same_as(self, other: 'ParameterVector') -> bool:
        """Bitwise equality of layout and values"""
        return self.layout_id == other.layout_id and np.array_equal(self.values, other.values)

    def to_bytes(self) -> bytes:
        """16-byte layout header followed by little-endian float64 values"""
        return self.layout_id + self.values.astype('<f8').tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> 'ParameterVector':
        if len(payload) < LAYOUT_ID_BYTES or (len(payload) - LAYOUT_ID_BYTES) % 8:
            raise ValueError(f"malformed parameter payload of {len(payload)} bytes")
        values = np.frombuffer(payload[LAYOUT_ID_BYTES:], dtype='<f8').astype(np.float64)
        return cls(values=values, layout_id=bytes(payload[:LAYOUT_ID_BYTES]))


@dataclass(frozen=True, eq=False)
class GradientVector:
    """Gradient of the loss with the same layout as its ParameterVector"""
    values: np.ndarray
    layout_id: bytes

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen_vector(self.values, 'GradientVector'))

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class TrainerConfig:
    """SGD and early-stopping settings shared by every training framework"""
    learning_rate: float = 0.5
    max_epochs: int = 100
    patience: int = 10
    iterations_per_round: int = 7
    seed: int = 0
    feature_learning_rate: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.feature_learning_rate is not None and self.feature_learning_rate < 0:
            raise ValueError("feature_learning_rate must be nonnegative")
        if self.max_epochs < 1 or self.patience < 1 or self.iterations_per_round < 1:
            raise ValueError("max_epochs, patience and iterations_per_round must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")


def _check_params(spec: ModelSpec, params: ParameterVector) -> None:
    if params.layout_id != spec.layout_id or len(params) != spec.parameter_count:
        raise LayoutMismatchError(
            f"parameters of length {len(params)} do not match a {spec.kind.value} model "
            f"with {spec.parameter_count} parameters"
        )


def init_parameters(spec: ModelSpec, seed: int) -> ParameterVector:
    """Zero-mean normal weights with standard deviation 1/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    d = spec.feature_count
    if spec.kind is ModelKind.LOGISTIC:
        weights = rng.normal(0.0, 1.0 / math.sqrt(d), size=d)
        values = np.concatenate([weights, [0.0]])
    else:
        h = spec.hidden_width
        w1 = rng.normal(0.0, 1.0 / math.sqrt(d), size=d * h)
        w2 = rng.normal(0.0, 1.0 / math.sqrt(h), size=h)
        values = np.concatenate([w1, np.zeros(h), w2, [0.0]])
    return ParameterVector(values=values, layout_id=spec.layout_id)


def featurize(spec: ModelSpec, batch: Sequence[np.ndarray]) -> np.ndarray:
    """Average-pool and flatten a batch of inputs into a ``(n, D)`` design matrix."""
    if len(batch) == 0:
        return np.zeros((0, spec.feature_count))
    stacked = np.asarray(batch, dtype=np.float64)
    if stacked.ndim == 4:
        stacked = stacked[np.newaxis]
    if stacked.shape[1:] != spec.input_shape:
        raise LayoutMismatchError(
            f"inputs of shape {stacked.shape[1:]} do not match model input {spec.input_shape}"
        )
    f = spec.downsample_factor
    n = stacked.shape[0]
    if f == 1:
        return stacked.reshape(n, -1)

    _, px, py, pz = spec.pooled_shape
    c, x, y, z = spec.input_shape
    pad = ((0, 0), (0, 0), (0, px * f - x), (0, py * f - y), (0, pz * f - z))
    padded = np.pad(stacked, pad)
    sums = padded.reshape(n, c, px, f, py, f, pz, f).sum(axis=(3, 5, 7))
    counts = np.pad(np.ones((x, y, z)), pad[2:]).reshape(px, f, py, f, pz, f).sum(axis=(1, 3, 5))
    return (sums / counts).reshape(n, -1)


def _unpack_mlp(spec: ModelSpec, values: np.ndarray):
    d, h = spec.feature_count, spec.hidden_width
    w1 = values[:d * h].reshape(d, h)
    b1 = values[d * h:d * h + h]
    w2 = values[d * h + h:d * h + 2 * h]
    b2 = values[-1]
    return w1, b1, w2, b2


def logits_from_features(spec: ModelSpec, params: ParameterVector, features: np.ndarray) -> np.ndarray:
    _check_params(spec, params)
    values = params.values
    if spec.kind is ModelKind.LOGISTIC:
        return features @ values[:-1] + values[-1]
    w1, b1, w2, b2 = _unpack_mlp(spec, values)
    return np.tanh(features @ w1 + b1) @ w2 + b2


def predict_features(spec: ModelSpec, params: ParameterVector, features: np.ndarray) -> np.ndarray:
    probabilities = expit(logits_from_features(spec, params, features))
    return np.clip(probabilities, _PROBABILITY_EPS, 1.0 - _PROBABILITY_EPS)


def forward(spec: ModelSpec, params: ParameterVector, batch: Sequence[np.ndarray]) -> np.ndarray:
    """Probability of the positive class (HCM) for each input in the batch."""
    return predict_features(spec, params, featurize(spec, batch))


def loss_from_features(spec: ModelSpec, params: ParameterVector,
                       features: np.ndarray, labels: Sequence[int]) -> float:
    """Mean binary cross-entropy, computed from logits for numerical stability."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape[0] == 0:
        raise EmptyBatchError("loss of an empty batch is undefined")
    z = logits_from_features(spec, params, features)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def loss(spec: ModelSpec, params: ParameterVector, batch: Sequence[np.ndarray],
         labels: Sequence[int]) -> float:
    if len(batch) == 0:
        raise EmptyBatchError("loss of an empty batch is undefined")
    return loss_from_features(spec, params, featurize(spec, batch), labels)


def gradient_from_features(spec: ModelSpec, params: ParameterVector,
                           features: np.ndarray, labels: Sequence[int]) -> GradientVector:
    y = np.asarray(labels, dtype=np.float64)
    n = y.shape[0]
    if n == 0 or features.shape[0] == 0:
        raise EmptyBatchError("gradient of an empty batch is undefined")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("labels must be 0 or 1")
    _check_params(spec, params)

    if spec.kind is ModelKind.LOGISTIC:
        z = features @ params.values[:-1] + params.values[-1]
        residual = (expit(z) - y) / n
        values = np.concatenate([features.T @ residual, [residual.sum()]])
    else:
        w1, b1, w2, b2 = _unpack_mlp(spec, params.values)
        hidden = np.tanh(features @ w1 + b1)
        residual = (expit(hidden @ w2 + b2) - y) / n
        d_hidden = np.outer(residual, w2) * (1.0 - hidden ** 2)
        values = np.concatenate([
            (features.T @ d_hidden).reshape(-1),
            d_hidden.sum(axis=0),
            hidden.T @ residual,
            [residual.sum()],
        ])
    return GradientVector(values=values, layout_id=params.layout_id)


def gradient(spec: ModelSpec, params: ParameterVector, batch: Sequence[np.ndarray],
             labels: Sequence[int]) -> GradientVector:
    """Gradient of the mean binary cross-entropy over the batch."""
    if len(batch) == 0:
        raise EmptyBatchError("gradient of an empty batch is undefined")
    return gradient_from_features(spec, params, featurize(spec, batch), labels)


def sgd_step(params: ParameterVector, grad: GradientVector,
             learning_rate: Union[float, np.ndarray]) -> ParameterVector:
    """``w - eta * g``; ``learning_rate`` may be a scalar or a per-parameter vector."""
    params.check_compatible(grad)
    rate = np.asarray(learning_rate, dtype=np.float64)
    if np.any(rate < 0):
        raise ValueError("learning rates must be nonnegative")
    if rate.ndim and rate.shape != params.values.shape:
        raise LayoutMismatchError("per-parameter learning rates do not match the layout")
    updated = params.values - rate * grad.values
    if not np.all(np.isfinite(updated)):
        raise NonFiniteError("SGD step produced non-finite parameters")
    return ParameterVector(values=updated, layout_id=params.layout_id)


def learning_rate_vector(spec: ModelSpec, trainer: TrainerConfig) -> Union[float, np.ndarray]:
    """
    Learning rate(s) for ``sgd_step``.

    With ``feature_learning_rate`` set, the MLP hidden layer trains at that rate
    (0 freezes it) while the output head keeps ``learning_rate``.
    """
    if trainer.feature_learning_rate is None or spec.kind is ModelKind.LOGISTIC:
        return trainer.learning_rate
    rates = np.full(spec.parameter_count, trainer.learning_rate, dtype=np.float64)
    rates[:spec.feature_parameter_count] = trainer.feature_learning_rate
    rates.setflags(write=False)
    return rates
