"""
Training-time augmentation.

Four tiers of increasing strength. With probability ``apply_probability`` one
transform is drawn uniformly from the tier's pool and applied; otherwise the
sample passes through untouched. Spatial transforms move intensities
(linear interpolation) and mask (nearest neighbor) together; intensity
transforms never touch the mask.

Images are ``(x, y, z)`` or ``(channels, x, y, z)``; the axial plane is x-y.
"""

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import fft, ndimage

from .phantomdata import Volume


class AugmentationTier(str, Enum):
    NONE = 'none'
    BASIC = 'basic'
    SHAPE = 'shape'
    SHAPE_INTENSITY = 'shape-intensity'


class Transform(str, Enum):
    ROTATE = 'rotate'
    HFLIP = 'hflip'
    VFLIP = 'vflip'
    ELASTIC = 'elastic'
    SPIKE = 'spike'
    BIAS_FIELD = 'bias_field'
    GAUSSIAN_NOISE = 'gaussian_noise'
    GAMMA = 'gamma'


SPATIAL_TRANSFORMS = frozenset({Transform.ROTATE, Transform.HFLIP, Transform.VFLIP, Transform.ELASTIC})

MAX_ROTATION_DEG = 15.0
ELASTIC_CONTROL_POINTS = (5, 5, 3)
ELASTIC_SIGMA_VOXELS = 2.0
BIAS_COEFFICIENT_RANGE = 0.3
BIAS_DEGREE = 3
SPIKE_MAX_ENERGY_FRACTION = 0.1
GAMMA_RANGE = (0.7, 1.5)
NOISE_SIGMA_MAX = 0.25

_BASIC = [Transform.ROTATE, Transform.HFLIP, Transform.VFLIP]
_SHAPE = _BASIC + [Transform.ELASTIC]
_SHAPE_INTENSITY = _SHAPE + [Transform.SPIKE, Transform.BIAS_FIELD, Transform.GAUSSIAN_NOISE, Transform.GAMMA]


def transform_pool(tier: AugmentationTier) -> List[Transform]:
    pools = {
        AugmentationTier.NONE: [],
        AugmentationTier.BASIC: _BASIC,
        AugmentationTier.SHAPE: _SHAPE,
        AugmentationTier.SHAPE_INTENSITY: _SHAPE_INTENSITY,
    }
    return list(pools[AugmentationTier(tier)])


@dataclass(frozen=True)
class AugmentationSample:
    """What ``augment`` drew: the transform (None for identity), its parameters and the rng state before drawing"""
    transform: Optional[Transform]
    parameters: Dict[str, Any] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)


def _per_channel(image: np.ndarray, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    if image.ndim == 3:
        return fn(image)
    return np.stack([fn(channel) for channel in image])


def hflip(image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.flip(image, axis=-2).copy(), np.flip(mask, axis=-2).copy()


def vflip(image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.flip(image, axis=-3).copy(), np.flip(mask, axis=-3).copy()


def rotate(image: np.ndarray, mask: np.ndarray, angle_deg: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotate about the z axis; multiples of 90 degrees are exact."""
    quarter_turns = angle_deg / 90.0
    if float(quarter_turns).is_integer():
        k = int(quarter_turns) % 4
        return (np.rot90(image, k=k, axes=(-3, -2)).copy(),
                np.rot90(mask, k=k, axes=(-3, -2)).copy())
    rotated = _per_channel(image, lambda c: ndimage.rotate(
        c, angle_deg, axes=(0, 1), reshape=False, order=1, mode='constant', cval=0.0))
    rotated_mask = ndimage.rotate(mask, angle_deg, axes=(0, 1), reshape=False, order=0,
                                  mode='constant', cval=0)
    return rotated, rotated_mask.astype(np.uint8)


def elastic_deform(image: np.ndarray, mask: np.ndarray,
                   control_displacements: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Warp by a smooth displacement field.

    ``control_displacements`` has shape ``(3, cx, cy, cz)`` in voxels and is
    upsampled to the full grid with cubic splines.
    """
    shape = mask.shape
    coarse = control_displacements.shape[1:]
    positions = [np.linspace(0, c - 1, n) for c, n in zip(coarse, shape)]
    dense_grid = np.meshgrid(*positions, indexing='ij')
    displacement = [ndimage.map_coordinates(control_displacements[axis], dense_grid, order=3, mode='nearest')
                    for axis in range(3)]
    identity = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing='ij')
    warped = [identity[axis] + displacement[axis] for axis in range(3)]

    deformed = _per_channel(image, lambda c: ndimage.map_coordinates(c, warped, order=1, mode='nearest'))
    deformed_mask = ndimage.map_coordinates(mask, warped, order=0, mode='nearest')
    return deformed, deformed_mask.astype(np.uint8)


def spike(image: np.ndarray, frequency: Tuple[int, int, int], phase: float,
          energy_fraction: float) -> np.ndarray:
    """Add one symmetric k-space spike carrying ``energy_fraction`` of the image energy."""
    def _apply(channel: np.ndarray) -> np.ndarray:
        energy = float(np.sum(channel ** 2))
        spectrum = fft.fftn(channel)
        n = channel.size
        index = tuple(f % s for f, s in zip(frequency, channel.shape))
        mirror = tuple((-f) % s for f, s in zip(frequency, channel.shape))
        if index == mirror:
            amplitude = math.sqrt(energy_fraction * energy * n)
            spectrum[index] += amplitude * math.cos(phase)
        else:
            amplitude = math.sqrt(energy_fraction * energy * n / 2.0)
            spectrum[index] += amplitude * complex(math.cos(phase), math.sin(phase))
            spectrum[mirror] += amplitude * complex(math.cos(phase), -math.sin(phase))
        return np.real(fft.ifftn(spectrum))
    return _per_channel(image, _apply)


def _bias_exponents(degree: int = BIAS_DEGREE) -> List[Tuple[int, int, int]]:
    return [e for e in itertools.product(range(degree + 1), repeat=3) if 0 < sum(e) <= degree]


def bias_field(image: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    """Multiply by ``exp`` of a polynomial over coordinates normalized to [-1, 1]."""
    shape = image.shape[-3:]
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing='ij')
    log_field = np.zeros(shape)
    for coefficient, (i, j, k) in zip(coefficients, _bias_exponents()):
        log_field += coefficient * x ** i * y ** j * z ** k
    return image * np.exp(log_field)


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return image + rng.normal(0.0, sigma, size=image.shape)


def gamma(image: np.ndarray, exponent: float) -> np.ndarray:
    """Power law on nonnegative intensities; negatives are clipped to 0."""
    return np.power(np.clip(image, 0.0, None), exponent)


def sample_parameters(transform: Transform, shape: Tuple[int, ...],
                       rng: np.random.Generator) -> Dict[str, Any]:
    if transform is Transform.ROTATE:
        return {'angle_deg': float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))}
    if transform is Transform.ELASTIC:
        return {'control_displacements': rng.normal(0.0, ELASTIC_SIGMA_VOXELS, size=(3, *ELASTIC_CONTROL_POINTS))}
    if transform is Transform.SPIKE:
        grid = shape[-3:]
        frequency = tuple(int(rng.integers(0, n)) for n in grid)
        if not any(frequency):
            frequency = (1 % grid[0], *frequency[1:])
        return {
            'frequency': frequency,
            'phase': float(rng.uniform(0.0, 2 * math.pi)),
            'energy_fraction': float(rng.uniform(0.0, SPIKE_MAX_ENERGY_FRACTION)),
        }
    if transform is Transform.BIAS_FIELD:
        return {'coefficients': rng.uniform(-BIAS_COEFFICIENT_RANGE, BIAS_COEFFICIENT_RANGE,
                                            size=len(_bias_exponents()))}
    if transform is Transform.GAUSSIAN_NOISE:
        return {'sigma': float(rng.uniform(0.0, NOISE_SIGMA_MAX))}
    if transform is Transform.GAMMA:
        low, high = GAMMA_RANGE
        return {'exponent': float(math.exp(rng.uniform(math.log(low), math.log(high))))}
    return {}


def apply_transform(transform: Transform, image: np.ndarray, mask: np.ndarray,
                    parameters: Dict[str, Any],
                    rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    transform = Transform(transform)
    if transform is Transform.ROTATE:
        return rotate(image, mask, parameters['angle_deg'])
    if transform is Transform.HFLIP:
        return hflip(image, mask)
    if transform is Transform.VFLIP:
        return vflip(image, mask)
    if transform is Transform.ELASTIC:
        return elastic_deform(image, mask, parameters['control_displacements'])
    if transform is Transform.SPIKE:
        return spike(image, parameters['frequency'], parameters['phase'], parameters['energy_fraction']), mask
    if transform is Transform.BIAS_FIELD:
        return bias_field(image, parameters['coefficients']), mask
    if transform is Transform.GAUSSIAN_NOISE:
        if rng is None:
            raise ValueError("gaussian noise needs an rng")
        return gaussian_noise(image, parameters['sigma'], rng), mask
    return gamma(image, parameters['exponent']), mask


def augment(image: np.ndarray, mask: np.ndarray, tier: AugmentationTier, rng: np.random.Generator,
            apply_probability: float = 0.5) -> Tuple[np.ndarray, np.ndarray, AugmentationSample]:
    """
    Apply at most one transform from the tier's pool.

    Returns the (possibly unchanged) image and mask together with the draw.
    """
    if not 0.0 <= apply_probability <= 1.0:
        raise ValueError(f"apply_probability must lie in [0, 1], got {apply_probability}")
    pool = transform_pool(tier)
    if not pool:
        return image, mask, AugmentationSample(transform=None)

    state = rng.bit_generator.state
    if rng.random() >= apply_probability:
        return image, mask, AugmentationSample(transform=None, rng_state=state)
    transform = pool[int(rng.integers(len(pool)))]
    parameters = sample_parameters(transform, image.shape, rng)
    out_image, out_mask = apply_transform(transform, image, mask, parameters, rng)
    return out_image, out_mask, AugmentationSample(transform=transform, parameters=parameters, rng_state=state)


def augment_volume(volume: Volume, tier: AugmentationTier, rng: np.random.Generator,
                   apply_probability: float = 0.5) -> Tuple[Volume, AugmentationSample]:
    image, mask, sample = augment(volume.intensities, volume.mask, tier, rng, apply_probability)
    if sample.transform is None:
        return volume, sample
    return volume.with_data(intensities=image, mask=mask), sample
