from django.test import SimpleTestCase
import json
import tempfile
from pathlib import Path

import numpy as np
from numpy.testing import assert_array_equal

from simulation.exceptions import VolumeFormatError
from simulation.phantomdata import CenterProfile, Label, Timepoint, generate_center
from simulation.volume_io import (
    MANIFEST, SUFFIX, decode_volume, encode_volume, read_dataset_tree, read_volume, volume_path,
    write_dataset_tree, write_volume,
)

from .helpers import tiny_dataset, tiny_volume


class VolumeFileTest(SimpleTestCase):
    """FHV1 container"""

    def setUp(self):
        self.volume = tiny_volume('santpau', 'santpau-004', Label.HCM, Timepoint.ES, np.random.default_rng(0))

    def test_header_layout(self):
        """Test the FHV1 header layout"""
        payload = encode_volume(self.volume)
        self.assertEqual(payload[:4], b'FHV1')
        # fixed header, two length-prefixed ids, float32 + uint8 voxels
        expected = 42 + 2 + 2 + len('santpau') + len('santpau-004') + 5 * 72
        self.assertEqual(len(payload), expected)

    def test_decoded_volume_keeps_metadata_and_float32_values(self):
        """Test decoding keeps metadata and float32 values"""
        decoded = decode_volume(encode_volume(self.volume))
        self.assertEqual(decoded.sample_id, 'santpau-004_ES')
        self.assertEqual(decoded.label, Label.HCM)
        self.assertEqual(decoded.spacing, self.volume.spacing)
        assert_array_equal(decoded.mask, self.volume.mask)
        assert_array_equal(decoded.intensities, self.volume.intensities.astype(np.float32))

    def test_corrupt_payloads(self):
        """Test corrupt payloads are rejected"""
        payload = encode_volume(self.volume)
        with self.assertRaises(VolumeFormatError):
            decode_volume(b'XXXX' + payload[4:])
        with self.assertRaises(VolumeFormatError):
            decode_volume(payload[:-1])
        with self.assertRaises(VolumeFormatError):
            decode_volume(payload[:10])
        bad_label = bytearray(payload)
        bad_label[40] = 9
        with self.assertRaises(VolumeFormatError):
            decode_volume(bytes(bad_label))

    def test_read_and_write(self):
        """Test volumes read back from disk"""
        with tempfile.TemporaryDirectory() as tmp:
            path = write_volume(self.volume, volume_path(tmp, self.volume))
            self.assertEqual(path, Path(tmp) / 'santpau' / f'santpau-004_ES{SUFFIX}')
            self.assertEqual(read_volume(path).subject_id, 'santpau-004')
            path.write_bytes(b'garbage')
            with self.assertRaises(VolumeFormatError):
                read_volume(path)


class DatasetTreeTest(SimpleTestCase):
    """Dataset directories with a manifest"""

    def test_tree_layout_and_manifest(self):
        """Test the dataset tree and manifest"""
        datasets = [tiny_dataset('a', 3), tiny_dataset('b', 4)]
        with tempfile.TemporaryDirectory() as tmp:
            root = write_dataset_tree(datasets, tmp, metadata={'seed': 5})
            manifest = json.loads((root / MANIFEST).read_text())
            files = sorted(root.glob(f'*/*{SUFFIX}'))
            self.assertEqual(manifest['seed'], 5)
            self.assertEqual(manifest['format'], 'FHV1')
            self.assertEqual(sorted(manifest['centers']), ['a', 'b'])
            self.assertEqual(sum(2 * c['subjects'] for c in manifest['centers'].values()), len(files))
            self.assertEqual(manifest['centers']['b'], {'subjects': 4, 'nor': 2, 'hcm': 2})

            loaded = read_dataset_tree(root)
            self.assertEqual([d.center_id for d in loaded], ['a', 'b'])
            self.assertEqual([s.subject_id for s in loaded[1].subjects], ['b-000', 'b-001', 'b-002', 'b-003'])
            self.assertEqual(loaded[0].subjects[1].label, Label.HCM)

    def test_regeneration_is_byte_identical(self):
        """Test regenerating a tree is byte-identical"""
        profile = CenterProfile('det', 2, 0.5, spacing=(2.0, 2.0, 12.0))
        with tempfile.TemporaryDirectory() as tmp:
            first = write_dataset_tree([generate_center(profile, 3)], Path(tmp) / 'one')
            second = write_dataset_tree([generate_center(profile, 3)], Path(tmp) / 'two')
            names = sorted(p.relative_to(first) for p in first.rglob('*') if p.is_file())
            self.assertEqual(names, sorted(p.relative_to(second) for p in second.rglob('*') if p.is_file()))
            for name in names:
                self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), str(name))

    def test_generated_data_survives_disk(self):
        """Test generated centers read back equal"""
        profile = CenterProfile('disk', 2, 0.5, spacing=(2.0, 2.0, 12.0))
        dataset = generate_center(profile, 0)
        with tempfile.TemporaryDirectory() as tmp:
            (loaded,) = read_dataset_tree(write_dataset_tree([dataset], tmp))
        for original, restored in zip(dataset.volumes, loaded.volumes):
            assert_array_equal(original.intensities, restored.intensities)

    def test_missing_phase(self):
        """Test a missing phase file is reported"""
        with tempfile.TemporaryDirectory() as tmp:
            root = write_dataset_tree([tiny_dataset('a', 2)], tmp)
            (root / 'a' / f'a-001_ES{SUFFIX}').unlink()
            with self.assertRaises(VolumeFormatError):
                read_dataset_tree(root)

    def test_misplaced_file(self):
        """Test a misplaced file is reported"""
        with tempfile.TemporaryDirectory() as tmp:
            root = write_dataset_tree([tiny_dataset('a', 1)], tmp)
            (root / 'b').mkdir()
            (root / 'a' / f'a-000_ED{SUFFIX}').rename(root / 'b' / f'a-000_ED{SUFFIX}')
            with self.assertRaises(VolumeFormatError):
                read_dataset_tree(root)

    def test_empty_or_missing_directory(self):
        """Test empty or missing directories are reported"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(VolumeFormatError):
                read_dataset_tree(tmp)
            with self.assertRaises(VolumeFormatError):
                read_dataset_tree(Path(tmp) / 'absent')
