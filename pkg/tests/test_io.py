import os
import shutil
import tarfile
import tempfile
import unittest

import numpy as np

from servekit.io import ARCHIVE_FILE, read_affine_model, read_lookup_table, \
    read_yaml, unpack_archive, write_affine_model, write_archive, \
    write_lookup_table
from servekit.models import AffineModel, LookupTable

from .utils import write_affine_version


class TestIO(unittest.TestCase):

    def setUp(self):
        self.root = tempfile.mkdtemp(prefix='servekit_io_')
        self.addCleanup(shutil.rmtree, self.root, True)

    def test_affine_roundtrip(self):
        model = AffineModel(W=[[1.0, -2.5]], b=[0.125],
                            feature_order=['a', 'b'], class_labels=['only'])
        write_affine_model(self.root, model)
        loaded = read_affine_model(self.root)
        np.testing.assert_array_equal(loaded.W, model.W)
        np.testing.assert_array_equal(loaded.b, model.b)
        self.assertEqual(loaded.feature_order, ['a', 'b'])
        self.assertEqual(loaded.class_labels, ['only'])
        self.assertEqual(os.listdir(self.root), ['model.json'])

    def test_affine_file_format(self):
        with open(os.path.join(self.root, 'model.json'), 'w') as fh:
            fh.write('{"type": "affine", "feature_order": ["x"], '
                     '"W": [[2]], "b": [1]}')
        model = read_affine_model(self.root)
        self.assertIsNone(model.class_labels)
        self.assertEqual(model.W.dtype, np.float64)

        with open(os.path.join(self.root, 'model.json'), 'w') as fh:
            fh.write('{"type": "forest"}')
        with self.assertRaises(ValueError):
            read_affine_model(self.root)
        with open(os.path.join(self.root, 'model.json'), 'w') as fh:
            fh.write('{"type": "affine", "W": [[2]], "b": [1]}')
        with self.assertRaises(ValueError):
            read_affine_model(self.root)

    def test_lookup_table_file(self):
        with open(os.path.join(self.root, 'table.tsv'), 'wb') as fh:
            fh.write(b'#default\tnone\nk1\tv1\r\n\nk2\tv\t2\n')
        table = read_lookup_table(self.root)
        self.assertEqual(table.default_value, b'none')
        self.assertEqual(table.entries, {b'k1': b'v1', b'k2': b'v\t2'})

        write_lookup_table(self.root, table)
        self.assertEqual(read_lookup_table(self.root), table)

    def test_lookup_table_errors(self):
        with open(os.path.join(self.root, 'table.tsv'), 'wb') as fh:
            fh.write(b'no separator\n')
        with self.assertRaises(ValueError):
            read_lookup_table(self.root)
        with self.assertRaises(ValueError):
            write_lookup_table(self.root, LookupTable({b'a\tb': b'c'}))

    def test_archive_unpacks_once(self):
        source = write_affine_version(self.root, 'src', [[1.0]], [2.0])
        version_dir = os.path.join(self.root, 'm', '1')
        write_archive(version_dir, source)
        dest = os.path.join(self.root, 'staging', 'm', '1')

        self.assertEqual(unpack_archive(
            os.path.join(version_dir, ARCHIVE_FILE), dest), dest)
        np.testing.assert_array_equal(read_affine_model(dest).b, [2.0])
        stamp = os.path.getmtime(os.path.join(dest, 'model.json'))
        unpack_archive(os.path.join(version_dir, ARCHIVE_FILE), dest)
        self.assertEqual(os.path.getmtime(os.path.join(dest, 'model.json')),
                         stamp)

    def test_archive_rejects_escaping_members(self):
        outside = os.path.join(self.root, 'evil.txt')
        with open(outside, 'w') as fh:
            fh.write('x')
        archive = os.path.join(self.root, 'bad.tar.gz')
        with tarfile.open(archive, 'w:gz') as tar:
            tar.add(outside, arcname='../evil.txt')
        dest = os.path.join(self.root, 'staging', 'bad')
        with self.assertRaises(ValueError):
            unpack_archive(archive, dest)
        self.assertFalse(os.path.exists(dest))
        self.assertEqual(os.listdir(os.path.join(self.root, 'staging')), [])

    def test_read_yaml(self):
        path = os.path.join(self.root, 'c.yaml')
        with open(path, 'w') as fh:
            fh.write('')
        self.assertEqual(read_yaml(path), {})
        with open(path, 'w') as fh:
            fh.write('- 1\n- 2\n')
        with self.assertRaises(ValueError):
            read_yaml(path)


if __name__ == "__main__":
    unittest.main()
