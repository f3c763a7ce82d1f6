"""
FHV1 volume files and on-disk dataset trees.

A file holds one Volume::

    b"FHV1"                      magic
    uint32 x 3                   grid dims
    float64 x 3                  spacing (mm)
    uint8 label, uint8 timepoint (0 = ED, 1 = ES)
    uint16 + utf-8               center_id
    uint16 + utf-8               subject_id
    float32[x*y*z]               intensities, C order
    uint8[x*y*z]                 mask, C order

All integers and floats are little-endian. A dataset tree is
``<root>/<center_id>/<subject_id>_<ED|ES>.fhv`` plus a ``manifest.json``.
"""

import json
import struct
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from core.logging_config import get_logger

from .exceptions import VolumeFormatError
from .phantomdata import CenterDataset, Label, Subject, Timepoint, Volume

logger = get_logger(__name__)

MAGIC = b'FHV1'
SUFFIX = '.fhv'
MANIFEST = 'manifest.json'
_FIXED_HEADER = struct.Struct('<4s3I3dBB')
_LENGTH = struct.Struct('<H')
_TIMEPOINT_CODES = {Timepoint.ED: 0, Timepoint.ES: 1}

PathLike = Union[str, Path]


def _pack_text(text: str) -> bytes:
    raw = text.encode('utf-8')
    if len(raw) > 0xFFFF:
        raise VolumeFormatError(f"identifier too long: {text[:40]}...")
    return _LENGTH.pack(len(raw)) + raw


def encode_volume(volume: Volume) -> bytes:
    header = _FIXED_HEADER.pack(
        MAGIC, *volume.shape, *volume.spacing,
        int(volume.label), _TIMEPOINT_CODES[volume.timepoint],
    )
    return b''.join([
        header,
        _pack_text(volume.center_id),
        _pack_text(volume.subject_id),
        np.ascontiguousarray(volume.intensities, dtype='<f4').tobytes(),
        np.ascontiguousarray(volume.mask, dtype=np.uint8).tobytes(),
    ])


def _read_text(payload: bytes, offset: int):
    if offset + _LENGTH.size > len(payload):
        raise VolumeFormatError("truncated identifier length")
    (length,) = _LENGTH.unpack_from(payload, offset)
    offset += _LENGTH.size
    if offset + length > len(payload):
        raise VolumeFormatError("truncated identifier")
    try:
        return payload[offset:offset + length].decode('utf-8'), offset + length
    except UnicodeDecodeError as e:
        raise VolumeFormatError(f"identifier is not utf-8: {e}") from e


def decode_volume(payload: bytes) -> Volume:
    if len(payload) < _FIXED_HEADER.size:
        raise VolumeFormatError("file shorter than the FHV1 header")
    magic, nx, ny, nz, sx, sy, sz, label, timepoint = _FIXED_HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}")
    if label not in (Label.NOR, Label.HCM):
        raise VolumeFormatError(f"bad label code {label}")
    if timepoint not in (0, 1):
        raise VolumeFormatError(f"bad timepoint code {timepoint}")

    offset = _FIXED_HEADER.size
    center_id, offset = _read_text(payload, offset)
    subject_id, offset = _read_text(payload, offset)

    count = nx * ny * nz
    expected = offset + 5 * count
    if len(payload) != expected:
        raise VolumeFormatError(f"expected {expected} bytes for a {nx}x{ny}x{nz} grid, got {len(payload)}")
    intensities = np.frombuffer(payload, dtype='<f4', count=count, offset=offset)
    mask = np.frombuffer(payload, dtype=np.uint8, count=count, offset=offset + 4 * count)
    try:
        return Volume(
            intensities=intensities.astype(np.float64).reshape(nx, ny, nz),
            spacing=(sx, sy, sz),
            mask=mask.reshape(nx, ny, nz),
            label=Label(label),
            center_id=center_id,
            subject_id=subject_id,
            timepoint=Timepoint.ED if timepoint == 0 else Timepoint.ES,
        )
    except ValueError as e:
        raise VolumeFormatError(f"{subject_id}: {e}") from e


def write_volume(volume: Volume, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(volume))
    return path


def read_volume(path: PathLike) -> Volume:
    path = Path(path)
    try:
        return decode_volume(path.read_bytes())
    except VolumeFormatError as e:
        raise VolumeFormatError(f"{path}: {e}") from e


def volume_path(root: PathLike, volume: Volume) -> Path:
    return Path(root) / volume.center_id / f"{volume.sample_id}{SUFFIX}"


def write_dataset_tree(datasets: Iterable[CenterDataset], root: PathLike,
                       metadata: Optional[Dict] = None) -> Path:
    """Write every volume of every center below ``root`` and a manifest."""
    root = Path(root)
    manifest = {'format': 'FHV1', 'centers': {}, **(metadata or {})}
    for dataset in datasets:
        for volume in dataset.volumes:
            write_volume(volume, volume_path(root, volume))
        counts = dataset.label_counts()
        manifest['centers'][dataset.center_id] = {
            'subjects': len(dataset.subjects),
            'nor': counts[Label.NOR],
            'hcm': counts[Label.HCM],
        }
        logger.info(f"💾 Wrote {dataset.sample_count} volumes for {dataset.center_id}")
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
    return root


def read_dataset_tree(root: PathLike) -> List[CenterDataset]:
    """Load a tree written by ``write_dataset_tree``; centers and subjects come back sorted."""
    root = Path(root)
    if not root.is_dir():
        raise VolumeFormatError(f"dataset directory {root} does not exist")

    datasets = []
    for center_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        pairs: Dict[str, Dict[Timepoint, Volume]] = defaultdict(dict)
        for path in sorted(center_dir.glob(f'*{SUFFIX}')):
            volume = read_volume(path)
            if volume.center_id != center_dir.name:
                raise VolumeFormatError(f"{path}: belongs to center {volume.center_id}")
            if path.name != f"{volume.sample_id}{SUFFIX}":
                raise VolumeFormatError(f"{path}: header says {volume.sample_id}")
            pairs[volume.subject_id][volume.timepoint] = volume

        subjects = []
        for subject_id in sorted(pairs):
            phases = pairs[subject_id]
            if set(phases) != {Timepoint.ED, Timepoint.ES}:
                raise VolumeFormatError(f"{center_dir.name}/{subject_id}: needs both ED and ES volumes")
            ed, es = phases[Timepoint.ED], phases[Timepoint.ES]
            if ed.label != es.label:
                raise VolumeFormatError(f"{center_dir.name}/{subject_id}: ED and ES labels differ")
            subjects.append(Subject(subject_id=subject_id, label=ed.label,
                                    center_id=center_dir.name, ed=ed, es=es))
        if subjects:
            datasets.append(CenterDataset(center_id=center_dir.name, subjects=tuple(subjects)))
            logger.debug(f"🔍 Loaded {len(subjects)} subjects from {center_dir}")

    if not datasets:
        raise VolumeFormatError(f"no {SUFFIX} volumes found below {root}")
    return datasets
