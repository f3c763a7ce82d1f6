"""
Tiny hand-built volumes for fast federation and experiment tests.

A 6x6x2 grid holds an RV row, a myocardial ring and an LV cavity. HCM
subjects have a brighter myocardium, so the classes separate easily after
the unit rescale.
"""

from typing import Dict, List, Optional

import numpy as np

from simulation.classifier import ModelKind, ModelSpec
from simulation.federation import CenterNode, InputPipeline
from simulation.phantomdata import (
    MASK_LV, MASK_MYOCARDIUM, MASK_RV, CenterDataset, Label, Subject, Timepoint, Volume,
)
from simulation.seeding import derive_rng

TINY_SHAPE = (6, 6, 2)
TINY_SPEC = ModelSpec(ModelKind.LOGISTIC, (3, *TINY_SHAPE))


def tiny_mask() -> np.ndarray:
    mask = np.zeros(TINY_SHAPE, dtype=np.uint8)
    mask[0, :, :] = MASK_RV
    mask[2:6, 1:5, :] = MASK_MYOCARDIUM
    mask[3:5, 2:4, :] = MASK_LV
    return mask


def tiny_volume(center_id: str, subject_id: str, label: Label, timepoint: Timepoint,
                rng: np.random.Generator, offset: float = 0.0, noise: float = 0.01) -> Volume:
    mask = tiny_mask()
    myocardium = 0.7 if label == Label.HCM else 0.3
    levels = np.array([0.1, 0.5, myocardium, 0.6])
    image = levels[mask] + offset + rng.normal(0.0, noise, size=TINY_SHAPE)
    return Volume(intensities=image, spacing=(1.0, 1.0, 1.0), mask=mask, label=label,
                  center_id=center_id, subject_id=subject_id, timepoint=timepoint)


def tiny_subjects(center_id: str, count: int, seed: int = 0, offset: float = 0.0,
                  first_index: int = 0) -> List[Subject]:
    """Subjects with alternating labels, NOR first"""
    subjects = []
    for i in range(first_index, first_index + count):
        subject_id = f"{center_id}-{i:03d}"
        label = Label.HCM if i % 2 else Label.NOR
        rng = derive_rng(seed, 'tiny', center_id, i)
        ed = tiny_volume(center_id, subject_id, label, Timepoint.ED, rng, offset)
        es = tiny_volume(center_id, subject_id, label, Timepoint.ES, rng, offset)
        subjects.append(Subject(subject_id=subject_id, label=label, center_id=center_id, ed=ed, es=es))
    return subjects


def tiny_dataset(center_id: str, count: int, seed: int = 0, offset: float = 0.0) -> CenterDataset:
    return CenterDataset(center_id=center_id, subjects=tuple(tiny_subjects(center_id, count, seed, offset)))


def tiny_node(center_id: str, n_train: int = 6, n_validation: int = 2, n_test: int = 0, seed: int = 0,
              pipeline: Optional[InputPipeline] = None, standardize: bool = True) -> CenterNode:
    subjects = tiny_subjects(center_id, n_train + n_validation + n_test, seed)
    volumes: Dict[str, List[Volume]] = {
        'train': [v for s in subjects[:n_train] for v in s.volumes],
        'validation': [v for s in subjects[n_train:n_train + n_validation] for v in s.volumes],
        'test': [v for s in subjects[n_train + n_validation:] for v in s.volumes],
    }
    node = CenterNode(center_id, volumes, pipeline or InputPipeline(harmonize=False), TINY_SPEC)
    if standardize:
        node.standardize(None)
    return node


def tiny_config_text(data_dir, output_dir, **overrides) -> str:
    """Experiment TOML over a tiny dataset tree with a short training budget"""
    top = {
        'name': '"tiny"',
        'framework': '["fl"]',
        'scheme': '"lco"',
        'prior': '"masked"',
        'tier': '"none"',
        'seeds': '[0]',
        'output_dir': f'"{output_dir}"',
    }
    top.update(overrides)
    lines = [f"{key} = {value}" for key, value in top.items()]
    lines += [
        '',
        '[dataset]',
        f'directory = "{data_dir}"',
        'target_spacing = [1.0, 1.0, 1.0]',
        'window = [8, 8, 4]',
        'bins = 64',
        '',
        '[trainer]',
        'max_epochs = 4',
        'patience = 2',
        '',
        '[model]',
        'downsample_factor = 1',
    ]
    return '\n'.join(lines) + '\n'
