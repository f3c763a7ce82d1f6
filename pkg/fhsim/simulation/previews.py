"""
PNG previews of generated phantoms.

For the first subject of each center the mid short-axis slice of its ED
volume is written once per induced-prior channel and once per augmentation
transform, so a generated tree can be eyeballed without an image viewer
that understands ``.fhv`` files.
"""

from pathlib import Path
from typing import Iterable, List, Union

import numpy as np

from core.logging_config import get_logger

from .augmentation import Transform, apply_transform, sample_parameters
from .phantomdata import CenterDataset, Prior, Volume, induce_prior
from .seeding import derive_rng

try:
    import PIL.Image
    PIL_AVAILABLE = True
except ImportError:
    PIL_AVAILABLE = False

logger = get_logger(__name__)

PREVIEW_DIR = 'previews'
SCALE_FACTOR = 4


def slice_to_uint8(image: np.ndarray) -> np.ndarray:
    """Mid slice along the last axis, min-max scaled to 0..255"""
    plane = np.asarray(image, dtype=np.float64)[..., image.shape[-1] // 2]
    low, high = float(plane.min()), float(plane.max())
    if high <= low:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round(255.0 * (plane - low) / (high - low)).astype(np.uint8)


def save_slice(image: np.ndarray, path: Path) -> Path:
    picture = PIL.Image.fromarray(slice_to_uint8(image), mode='L')
    width, height = picture.size
    picture = picture.resize((width * SCALE_FACTOR, height * SCALE_FACTOR), PIL.Image.NEAREST)
    path.parent.mkdir(parents=True, exist_ok=True)
    picture.save(path)
    return path


def volume_previews(volume: Volume, directory: Path, seed: int = 0) -> List[Path]:
    written = [save_slice(volume.intensities, directory / 'image.png')]
    for prior in Prior:
        channels = induce_prior(volume, prior)
        for c, channel in enumerate(channels):
            if prior is not Prior.PER_STRUCTURE and c > 0:
                break
            suffix = f"_{c}" if prior is Prior.PER_STRUCTURE else ''
            written.append(save_slice(channel, directory / f"prior_{prior.value}{suffix}.png"))
    for transform in Transform:
        rng = derive_rng(seed, 'preview', volume.center_id, volume.sample_id, transform.value)
        parameters = sample_parameters(transform, volume.shape, rng)
        image, _ = apply_transform(transform, volume.intensities, volume.mask, parameters, rng)
        written.append(save_slice(image, directory / f"augment_{transform.value}.png"))
    return written


def write_previews(datasets: Iterable[CenterDataset], root: Union[str, Path], seed: int = 0) -> List[Path]:
    """
    Write previews under ``<root>/previews/<center>/``.

    Returns the written files; an empty list when Pillow is missing or
    writing fails, since previews never block dataset generation.
    """
    if not PIL_AVAILABLE:
        logger.warning("⚠️ Pillow is not installed, skipping previews")
        return []
    written: List[Path] = []
    try:
        for dataset in datasets:
            if not dataset.subjects:
                continue
            first = dataset.subjects[0]
            written.extend(volume_previews(first.ed, Path(root) / PREVIEW_DIR / dataset.center_id, seed))
    except (OSError, ValueError) as e:
        logger.warning(f"⚠️ Could not write previews: {e}")
        return written
    logger.info(f"🖼️ Wrote {len(written)} preview images under {Path(root) / PREVIEW_DIR}")
    return written
