import os
import shutil
import tempfile
import unittest

import numpy as np

from servekit import memory_utils
from servekit.memory_utils import _directory_bytes, _estimate_ram_from_disk


class TestMemoryUtils(unittest.TestCase):

    def setUp(self):
        self.root = tempfile.mkdtemp(prefix='servekit_mem_')
        self.addCleanup(shutil.rmtree, self.root, True)

    def write(self, relative, size):
        path = os.path.join(self.root, relative)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, 'wb') as fh:
            fh.write(b'\0' * size)

    def test_estimate_from_disk(self):
        self.write('a.bin', 100)
        self.write('b.bin', 200)
        self.assertEqual(_estimate_ram_from_disk(self.root, 1.25), 375)

    def test_nested_files(self):
        rng = np.random.RandomState(1)
        expected = 0
        for i in range(10):
            size = int(rng.randint(0, 5000))
            depth = '/'.join('d{}'.format(j) for j in range(i % 4))
            self.write(os.path.join(depth, 'f{}'.format(i)), size)
            expected += size

        walked = 0
        for root, _, files in os.walk(self.root):
            walked += sum(os.path.getsize(os.path.join(root, f))
                          for f in files)
        self.assertEqual(walked, expected)
        self.assertEqual(_directory_bytes(self.root), expected)
        self.assertEqual(_estimate_ram_from_disk(self.root, 2.0),
                         2 * expected)

    def test_missing_directory(self):
        with self.assertRaises(OSError):
            _directory_bytes(os.path.join(self.root, 'nope'))

    def test_free_memory_applies_safety_factor(self):
        self.assertGreater(memory_utils._free_memory(), 0)
        self.assertGreater(memory_utils._process_rss(), 0)
        self.assertGreaterEqual(memory_utils._default_thread_count(), 1)
        self.assertIn(memory_utils.release_memory_to_os(), (True, False))


if __name__ == "__main__":
    unittest.main()
