"""
Synthetic multi-center cardiac phantoms.

Each subject is a pair of volumes (end-diastole and end-systole) built from
concentric ellipsoids: a left-ventricle blood pool inside a myocardial shell
whose thickness depends on the label, plus a right-ventricle crescent next to
it. Centers differ in voxel spacing, intensity offset/scale, noise, heart size
and thickness distributions so that their data are not identically distributed.

Also holds the geometric preprocessing applied to every volume before
training: resampling to a common spacing, bounding-box cropping, and the
three induced priors.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from core.logging_config import get_logger

from .exceptions import ConfigError, GeometryError
from .seeding import derive_rng

logger = get_logger(__name__)

MASK_BACKGROUND = 0
MASK_RV = 1
MASK_MYOCARDIUM = 2
MASK_LV = 3
MASK_CLASSES = (MASK_BACKGROUND, MASK_RV, MASK_MYOCARDIUM, MASK_LV)

Triple = Tuple[float, float, float]


class Label(IntEnum):
    NOR = 0
    HCM = 1


class Timepoint(str, Enum):
    ED = 'ED'
    ES = 'ES'


class Prior(str, Enum):
    BASELINE = 'baseline'
    MASKED = 'masked'
    PER_STRUCTURE = 'per-structure'


def _positive_triple(values, what: str) -> Triple:
    triple = tuple(float(v) for v in values)
    if len(triple) != 3:
        raise GeometryError(f"{what} needs three values, got {len(triple)}")
    if not all(math.isfinite(v) and v > 0 for v in triple):
        raise GeometryError(f"{what} must be positive, got {triple}")
    return triple


@dataclass(frozen=True, eq=False)
class Volume:
    """One cardiac phase of one subject: intensities, segmentation and metadata"""
    intensities: np.ndarray
    spacing: Triple
    mask: np.ndarray
    label: Label
    center_id: str
    subject_id: str
    timepoint: Timepoint

    def __post_init__(self):
        intensities = np.array(self.intensities, dtype=np.float64)
        mask = np.array(self.mask, dtype=np.uint8)
        if intensities.ndim != 3:
            raise GeometryError(f"intensities must be 3D, got shape {intensities.shape}")
        if intensities.shape != mask.shape:
            raise GeometryError(
                f"intensity shape {intensities.shape} differs from mask shape {mask.shape}"
            )
        if mask.size and mask.max() > MASK_LV:
            raise GeometryError(f"mask holds unknown class {int(mask.max())}")
        intensities.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, 'intensities', intensities)
        object.__setattr__(self, 'mask', mask)
        object.__setattr__(self, 'spacing', _positive_triple(self.spacing, 'spacing'))
        object.__setattr__(self, 'label', Label(self.label))
        object.__setattr__(self, 'timepoint', Timepoint(self.timepoint))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.intensities.shape

    @property
    def sample_id(self) -> str:
        return f"{self.subject_id}_{self.timepoint.value}"

    def with_data(self, intensities: Optional[np.ndarray] = None, mask: Optional[np.ndarray] = None,
                  spacing: Optional[Triple] = None) -> 'Volume':
        """Copy with replaced grids; metadata is kept."""
        return dataclasses.replace(
            self,
            intensities=self.intensities if intensities is None else intensities,
            mask=self.mask if mask is None else mask,
            spacing=self.spacing if spacing is None else spacing,
        )


@dataclass(frozen=True)
class Distribution:
    """Normal distribution in millimetres, truncated at a quarter of the mean"""
    mean: float
    sd: float

    def __post_init__(self):
        if not self.mean > 0:
            raise ConfigError(f"distribution mean must be positive, got {self.mean}")
        if self.sd < 0:
            raise ConfigError(f"distribution sd must be nonnegative, got {self.sd}")

    def sample(self, rng: np.random.Generator) -> float:
        return max(float(rng.normal(self.mean, self.sd)), 0.25 * self.mean)


@dataclass(frozen=True)
class PhantomConstants:
    """Shared anatomy and contrast constants; center profiles shift them."""
    background_level: float = 0.1
    rv_level: float = 0.5
    myocardium_level: float = 0.35
    lv_level: float = 0.6
    field_of_view_mm: Triple = (112.0, 112.0, 96.0)
    cavity_radius_mm: Distribution = Distribution(12.0, 1.2)
    cavity_half_length_mm: Distribution = Distribution(20.0, 2.0)
    rv_radius_mm: Distribution = Distribution(9.0, 1.0)
    max_rv_angle_deg: float = 25.0
    position_jitter_mm: float = 3.0
    contraction: float = 0.75
    systolic_thickening: float = 1.3

    def __post_init__(self):
        _positive_triple(self.field_of_view_mm, 'field_of_view_mm')
        if not 0 < self.contraction <= 1:
            raise ConfigError(f"contraction must be in (0, 1], got {self.contraction}")
        if self.systolic_thickening < 1:
            raise ConfigError(f"systolic_thickening must be >= 1, got {self.systolic_thickening}")

    def level_table(self) -> np.ndarray:
        return np.array([self.background_level, self.rv_level, self.myocardium_level, self.lv_level])


@dataclass(frozen=True)
class CenterProfile:
    """Acquisition and population characteristics of one center"""
    center_id: str
    n_subjects: int
    class_balance: float
    intensity_offset: float = 0.0
    intensity_scale: float = 1.0
    noise_sigma: float = 0.02
    spacing: Triple = (1.25, 1.25, 10.0)
    myo_thickness_nor: Distribution = Distribution(6.0, 0.8)
    myo_thickness_hcm: Distribution = Distribution(11.0, 1.5)
    heart_scale: float = 1.0

    def __post_init__(self):
        if not self.center_id or '/' in self.center_id:
            raise ConfigError(f"invalid center id {self.center_id!r}")
        if self.n_subjects < 1:
            raise ConfigError(f"{self.center_id}: n_subjects must be >= 1")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ConfigError(f"{self.center_id}: class_balance must lie in [0, 1]")
        if not self.intensity_scale > 0:
            raise ConfigError(f"{self.center_id}: intensity_scale must be positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"{self.center_id}: noise_sigma must be nonnegative")
        if not self.heart_scale > 0:
            raise ConfigError(f"{self.center_id}: heart_scale must be positive")
        if self.myo_thickness_hcm.mean <= self.myo_thickness_nor.mean:
            raise ConfigError(
                f"{self.center_id}: HCM thickness mean must exceed NOR thickness mean"
            )
        try:
            _positive_triple(self.spacing, 'spacing')
        except GeometryError as e:
            raise ConfigError(f"{self.center_id}: {e}") from e

    @property
    def hcm_count(self) -> int:
        return int(math.floor(self.n_subjects * self.class_balance + 0.5))

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> 'CenterProfile':
        """Build a profile from a parsed TOML table. Thickness entries are ``[mean, sd]``."""
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown profile keys: {', '.join(unknown)}")
        values = dict(data)
        for key in ('myo_thickness_nor', 'myo_thickness_hcm'):
            if key in values:
                values[key] = _distribution(values[key], key)
        if 'spacing' in values:
            values['spacing'] = tuple(values['spacing'])
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _distribution(value, key: str) -> Distribution:
    if isinstance(value, Distribution):
        return value
    try:
        mean, sd = value
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key} must be [mean, sd]") from e
    return Distribution(float(mean), float(sd))


def constants_from_mapping(data: Mapping[str, Any]) -> PhantomConstants:
    known = {f.name for f in dataclasses.fields(PhantomConstants)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown phantom constant keys: {', '.join(unknown)}")
    values = dict(data)
    for key in ('cavity_radius_mm', 'cavity_half_length_mm', 'rv_radius_mm'):
        if key in values:
            values[key] = _distribution(values[key], key)
    if 'field_of_view_mm' in values:
        values['field_of_view_mm'] = tuple(values['field_of_view_mm'])
    return PhantomConstants(**values)


def _initialize_default_profiles() -> Dict[str, CenterProfile]:
    """Four centers with the subject counts and class mix of the multi-vendor cohort"""
    profiles = {}

    profiles['vall_dhebron'] = CenterProfile(
        center_id='vall_dhebron',
        n_subjects=23,
        class_balance=25 / 46,
        intensity_offset=0.2,
        intensity_scale=1.15,
        noise_sigma=0.03,
        spacing=(1.2, 1.2, 10.0),
        myo_thickness_nor=Distribution(6.0, 0.7),
        myo_thickness_hcm=Distribution(11.5, 1.5),
        heart_scale=1.0,
    )

    profiles['sagrada_familia'] = CenterProfile(
        center_id='sagrada_familia',
        n_subjects=35,
        class_balance=37 / 70,
        intensity_offset=-0.1,
        intensity_scale=0.9,
        noise_sigma=0.02,
        spacing=(1.3, 1.3, 9.0),
        myo_thickness_nor=Distribution(6.5, 0.8),
        myo_thickness_hcm=Distribution(11.0, 1.6),
        heart_scale=0.95,
    )

    # Lower resolution and larger hearts
    profiles['santpau'] = CenterProfile(
        center_id='santpau',
        n_subjects=12,
        class_balance=10 / 24,
        intensity_offset=0.1,
        intensity_scale=1.25,
        noise_sigma=0.04,
        spacing=(1.6, 1.6, 10.0),
        myo_thickness_nor=Distribution(7.0, 0.8),
        myo_thickness_hcm=Distribution(10.5, 1.5),
        heart_scale=1.12,
    )

    profiles['acdc'] = CenterProfile(
        center_id='acdc',
        n_subjects=20,
        class_balance=0.5,
        intensity_offset=-0.2,
        intensity_scale=0.85,
        noise_sigma=0.03,
        spacing=(1.5, 1.5, 8.0),
        myo_thickness_nor=Distribution(5.5, 0.7),
        myo_thickness_hcm=Distribution(12.0, 1.8),
        heart_scale=0.9,
    )

    return profiles


DEFAULT_PROFILES: Dict[str, CenterProfile] = _initialize_default_profiles()


def default_profiles() -> List[CenterProfile]:
    return [DEFAULT_PROFILES[center_id] for center_id in sorted(DEFAULT_PROFILES)]


@dataclass(frozen=True)
class Subject:
    subject_id: str
    label: Label
    center_id: str
    ed: Volume
    es: Volume

    def __post_init__(self):
        for volume in (self.ed, self.es):
            if (volume.label != self.label or volume.center_id != self.center_id
                    or volume.subject_id != self.subject_id):
                raise GeometryError(f"volume {volume.sample_id} does not belong to {self.subject_id}")

    @property
    def volumes(self) -> Tuple[Volume, Volume]:
        return (self.ed, self.es)


@dataclass(frozen=True)
class CenterDataset:
    """All subjects of one center; each subject feeds two samples (ED and ES)"""
    center_id: str
    subjects: Tuple[Subject, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'subjects', tuple(self.subjects))
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"{self.center_id}: duplicate subject ids")

    @property
    def sample_count(self) -> int:
        return 2 * len(self.subjects)

    @property
    def volumes(self) -> List[Volume]:
        return [v for s in self.subjects for v in s.volumes]

    def subject(self, subject_id: str) -> Subject:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def label_counts(self) -> Dict[Label, int]:
        counts = {Label.NOR: 0, Label.HCM: 0}
        for s in self.subjects:
            counts[s.label] += 1
        return counts


@dataclass(frozen=True)
class _HeartGeometry:
    center_mm: Tuple[float, float]
    cavity_radius: float
    half_length: float
    thickness: float
    rv_radius: float
    rv_angle: float

    def systolic(self, constants: PhantomConstants) -> '_HeartGeometry':
        return dataclasses.replace(
            self,
            cavity_radius=self.cavity_radius * constants.contraction,
            half_length=self.half_length * (1 + constants.contraction) / 2,
            thickness=self.thickness * constants.systolic_thickening,
            rv_radius=self.rv_radius * (1 + constants.contraction) / 2,
        )

    @property
    def rv_offset(self) -> float:
        return self.cavity_radius + self.thickness + 0.35 * self.rv_radius

    def half_extent(self) -> Triple:
        outer = self.cavity_radius + self.thickness
        along, across = self.rv_radius, 1.4 * self.rv_radius
        cos, sin = abs(math.cos(self.rv_angle)), abs(math.sin(self.rv_angle))
        rv_x = self.rv_offset * cos + math.hypot(along * cos, across * sin)
        rv_y = self.rv_offset * sin + math.hypot(along * sin, across * cos)
        return (max(outer, rv_x) + abs(self.center_mm[0]),
                max(outer, rv_y) + abs(self.center_mm[1]),
                self.half_length + self.thickness)


def _grid_shape(constants: PhantomConstants, spacing: Triple) -> Tuple[int, int, int]:
    return tuple(max(1, int(round(fov / s))) for fov, s in zip(constants.field_of_view_mm, spacing))


def _rasterize(geometry: _HeartGeometry, shape: Tuple[int, int, int], spacing: Triple) -> np.ndarray:
    axes = [(np.arange(n) + 0.5) * s - n * s / 2 for n, s in zip(shape, spacing)]
    x, y, z = np.meshgrid(*axes, indexing='ij')
    dx = x - geometry.center_mm[0]
    dy = y - geometry.center_mm[1]

    r = geometry.cavity_radius
    t = geometry.thickness
    cavity = (dx ** 2 + dy ** 2) / r ** 2 + z ** 2 / geometry.half_length ** 2 <= 1.0
    outer = (dx ** 2 + dy ** 2) / (r + t) ** 2 + z ** 2 / (geometry.half_length + t) ** 2 <= 1.0

    along = dx * math.cos(geometry.rv_angle) + dy * math.sin(geometry.rv_angle)
    across = -dx * math.sin(geometry.rv_angle) + dy * math.cos(geometry.rv_angle)
    rv_r = geometry.rv_radius
    rv = ((along - geometry.rv_offset) ** 2 / rv_r ** 2 + across ** 2 / (1.4 * rv_r) ** 2
          + z ** 2 / (0.85 * geometry.half_length) ** 2 <= 1.0)

    mask = np.zeros(shape, dtype=np.uint8)
    mask[rv & ~outer] = MASK_RV
    mask[outer] = MASK_MYOCARDIUM
    mask[cavity] = MASK_LV
    return mask


def _render(mask: np.ndarray, profile: CenterProfile, constants: PhantomConstants,
            rng: np.random.Generator) -> np.ndarray:
    levels = constants.level_table()[mask]
    intensities = levels * profile.intensity_scale + profile.intensity_offset
    if profile.noise_sigma > 0:
        intensities = intensities + rng.normal(0.0, profile.noise_sigma, size=mask.shape)
    # Stored volumes are float32; generate at the same precision so disk and memory agree
    return intensities.astype(np.float32).astype(np.float64)


def _sample_geometry(profile: CenterProfile, label: Label, constants: PhantomConstants,
                     rng: np.random.Generator) -> _HeartGeometry:
    thickness = profile.myo_thickness_hcm if label == Label.HCM else profile.myo_thickness_nor
    jitter = rng.normal(0.0, constants.position_jitter_mm, size=2) if constants.position_jitter_mm > 0 else (0, 0)
    max_angle = math.radians(constants.max_rv_angle_deg)
    return _HeartGeometry(
        center_mm=(float(jitter[0]), float(jitter[1])),
        cavity_radius=constants.cavity_radius_mm.sample(rng) * profile.heart_scale,
        half_length=constants.cavity_half_length_mm.sample(rng) * profile.heart_scale,
        thickness=thickness.sample(rng),
        rv_radius=constants.rv_radius_mm.sample(rng) * profile.heart_scale,
        rv_angle=float(rng.uniform(-max_angle, max_angle)),
    )


def _check_fits(geometry: _HeartGeometry, constants: PhantomConstants, subject_id: str) -> None:
    for axis, (extent, fov) in enumerate(zip(geometry.half_extent(), constants.field_of_view_mm)):
        if extent > fov / 2:
            raise GeometryError(
                f"{subject_id}: phantom reaches {extent:.1f} mm on axis {axis} "
                f"but the field of view is only {fov / 2:.1f} mm from its center"
            )


def generate_subject(profile: CenterProfile, index: int, label: Label, seed: int,
                     constants: PhantomConstants = PhantomConstants()) -> Subject:
    subject_id = f"{profile.center_id}-{index:03d}"
    rng = derive_rng(seed, 'phantom', profile.center_id, index)
    shape = _grid_shape(constants, profile.spacing)

    diastole = _sample_geometry(profile, label, constants, rng)
    systole = diastole.systolic(constants)
    _check_fits(diastole, constants, subject_id)
    _check_fits(systole, constants, subject_id)

    volumes = {}
    for timepoint, geometry in ((Timepoint.ED, diastole), (Timepoint.ES, systole)):
        mask = _rasterize(geometry, shape, profile.spacing)
        if not np.any(mask == MASK_LV):
            raise GeometryError(f"{subject_id} {timepoint.value}: cavity vanished at spacing {profile.spacing}")
        volumes[timepoint] = Volume(
            intensities=_render(mask, profile, constants, rng),
            spacing=profile.spacing,
            mask=mask,
            label=label,
            center_id=profile.center_id,
            subject_id=subject_id,
            timepoint=timepoint,
        )
    return Subject(subject_id=subject_id, label=label, center_id=profile.center_id,
                   ed=volumes[Timepoint.ED], es=volumes[Timepoint.ES])


def generate_center(profile: CenterProfile, seed: int,
                    constants: PhantomConstants = PhantomConstants()) -> CenterDataset:
    """
    Generate every subject of a center.

    The dataset is a pure function of ``(profile, seed, constants)``.
    """
    n_hcm = profile.hcm_count
    labels = np.array([Label.NOR] * (profile.n_subjects - n_hcm) + [Label.HCM] * n_hcm)
    derive_rng(seed, 'labels', profile.center_id).shuffle(labels)

    subjects = [
        generate_subject(profile, index, Label(int(label)), seed, constants)
        for index, label in enumerate(labels)
    ]
    logger.debug(f"🔍 Generated {len(subjects)} subjects for {profile.center_id} "
                 f"({n_hcm} HCM, {profile.n_subjects - n_hcm} NOR)")
    return CenterDataset(center_id=profile.center_id, subjects=tuple(subjects))


def measure_myocardial_thickness(volume: Volume) -> float:
    """
    Wall thickness in mm on the slice with the largest cavity.

    Counts myocardium voxels on the row and column through the cavity centroid
    and divides by the four wall crossings.
    """
    lv = volume.mask == MASK_LV
    per_slice = lv.sum(axis=(0, 1))
    if not per_slice.any():
        raise GeometryError(f"{volume.sample_id}: no left-ventricle voxels")
    z = int(np.argmax(per_slice))
    xs, ys = np.nonzero(lv[:, :, z])
    cx, cy = int(round(xs.mean())), int(round(ys.mean()))
    myo = volume.mask[:, :, z] == MASK_MYOCARDIUM
    along_x = myo[:, cy].sum() * volume.spacing[0]
    along_y = myo[cx, :].sum() * volume.spacing[1]
    return float(along_x + along_y) / 4.0


def resample(volume: Volume, target_spacing: Sequence[float]) -> Volume:
    """
    Resample onto ``target_spacing`` with the first voxel kept in place.

    Intensities are interpolated trilinearly, the mask by nearest neighbor.
    """
    target = _positive_triple(target_spacing, 'target spacing')
    if target == volume.spacing:
        return volume.with_data(intensities=volume.intensities.copy(), mask=volume.mask.copy())

    coordinates = []
    for n, source, dest in zip(volume.shape, volume.spacing, target):
        count = int(math.floor((n - 1) * source / dest + 1e-9)) + 1
        coordinates.append(np.arange(count) * (dest / source))
    grid = np.meshgrid(*coordinates, indexing='ij')

    intensities = ndimage.map_coordinates(volume.intensities, grid, order=1, mode='nearest')
    mask = ndimage.map_coordinates(volume.mask, grid, order=0, mode='nearest')
    return volume.with_data(intensities=intensities, mask=mask, spacing=target)


def mask_bbox_center(mask: np.ndarray) -> Tuple[int, int, int]:
    nonzero = np.argwhere(mask > 0)
    if nonzero.size == 0:
        raise GeometryError("cannot center a crop on an empty mask")
    low = nonzero.min(axis=0)
    high = nonzero.max(axis=0)
    return tuple(int(c) for c in (low + high) // 2)


def crop(volume: Volume, window: Sequence[int]) -> Volume:
    """
    Cut a ``window``-sized box centered on the mask bounding box.

    Parts of the window outside the source are zero in both grids. Values inside
    are copied unchanged. Cropping again is a no-op only while the mask fits in
    the window; a clipped mask has a new bounding-box center, so a second crop
    shifts the grid.
    """
    window = tuple(int(w) for w in window)
    if len(window) != 3 or any(w < 1 for w in window):
        raise GeometryError(f"crop window must be three positive ints, got {window}")
    center = mask_bbox_center(volume.mask)

    intensities = np.zeros(window, dtype=np.float64)
    mask = np.zeros(window, dtype=np.uint8)
    source, dest = [], []
    for c, w, n in zip(center, window, volume.shape):
        start = c - w // 2
        lo, hi = max(start, 0), min(start + w, n)
        if hi <= lo:
            source.append(slice(0, 0))
            dest.append(slice(0, 0))
            continue
        source.append(slice(lo, hi))
        dest.append(slice(lo - start, hi - start))
    intensities[tuple(dest)] = volume.intensities[tuple(source)]
    mask[tuple(dest)] = volume.mask[tuple(source)]
    return volume.with_data(intensities=intensities, mask=mask)


def prepare(volume: Volume, target_spacing: Sequence[float], window: Sequence[int]) -> Volume:
    return crop(resample(volume, target_spacing), window)


def induce_prior(volume: Volume, prior: Prior) -> np.ndarray:
    """Three-channel network input for the chosen prior"""
    prior = Prior(prior)
    image = volume.intensities
    if prior is Prior.BASELINE:
        return np.stack([image, image, image])
    if prior is Prior.MASKED:
        masked = np.where(volume.mask > 0, image, 0.0)
        return np.stack([masked, masked, masked])
    return np.stack([np.where(volume.mask == c, image, 0.0)
                     for c in (MASK_RV, MASK_MYOCARDIUM, MASK_LV)])
