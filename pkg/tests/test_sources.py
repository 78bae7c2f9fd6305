import os
import shutil
import tempfile
import unittest

import numpy as np

from servekit.core import AspiredVersionList, DesiredStateSink
from servekit.io import write_archive
from servekit.models import AffineModel, LookupTable
from servekit.sources import AffineLoader, ArchivePath, CommandSource, \
    FileSystemSource, LookupTableLoader, PathUnreadable, RouteRule, \
    RouteTable, SourceConfig, SourceEntry, SourceRouter, VersionSelection, \
    adapt, build_source_chain, poll_once, read_source_config, route, \
    scan_versions, select_versions

from .utils import write_affine_version, write_table_version


class TempDirTestCase(unittest.TestCase):

    def setUp(self):
        self.root = tempfile.mkdtemp(prefix='servekit_test_')
        self.addCleanup(shutil.rmtree, self.root, True)

    def mkdirs(self, *names):
        for name in names:
            os.makedirs(os.path.join(self.root, name), exist_ok=True)


class TestScanAndSelect(TempDirTestCase):

    def test_scan_numeric_children(self):
        self.mkdirs('m/1', 'm/2')
        self.assertEqual(scan_versions(os.path.join(self.root, 'm')), {1, 2})

    def test_scan_empty(self):
        self.mkdirs('m')
        self.assertEqual(scan_versions(os.path.join(self.root, 'm')), set())

    def test_scan_skips_non_numeric_with_warning(self):
        self.mkdirs('m/0003', 'm/tmp', 'm/7')
        with self.assertLogs('servekit.sources', level='WARNING') as logs:
            versions = scan_versions(os.path.join(self.root, 'm'))
        self.assertEqual(versions, {3, 7})
        self.assertEqual(len(logs.output), 1)

    def test_scan_ignores_files_and_dot_dirs(self):
        self.mkdirs('m/.5', 'm/4')
        open(os.path.join(self.root, 'm', '6'), 'w').close()
        self.assertEqual(scan_versions(os.path.join(self.root, 'm')), {4})

    def test_scan_unreadable(self):
        with self.assertRaises(PathUnreadable):
            scan_versions(os.path.join(self.root, 'missing'))

    def test_select(self):
        self.assertEqual(select_versions({1, 2, 3},
                                         VersionSelection.latest()), [3])
        self.assertEqual(select_versions({5, 9},
                                         VersionSelection.latest(2)), [9, 5])
        self.assertEqual(select_versions({1, 4, 2}, VersionSelection.all()),
                         [4, 2, 1])
        with self.assertLogs('servekit.sources', level='WARNING'):
            self.assertEqual(select_versions(
                {3, 5}, VersionSelection.specific([4])), [])

    def test_selection_grammar(self):
        self.assertEqual(VersionSelection.parse('latest'),
                         VersionSelection.latest(1))
        self.assertEqual(VersionSelection.parse('latest:2'),
                         VersionSelection.latest(2))
        self.assertEqual(VersionSelection.parse('specific:5,6'),
                         VersionSelection.specific([5, 6]))
        self.assertEqual(str(VersionSelection.specific([5])), 'specific:5')
        for bad in ('latest:0', 'specific:', 'newest', 'all:3'):
            with self.assertRaises(ValueError):
                VersionSelection.parse(bad)


class TestPoll(TempDirTestCase):

    def test_poll_latest(self):
        self.mkdirs('m/1', 'm/2')
        base = os.path.join(self.root, 'm')
        lists = poll_once(SourceConfig([SourceEntry('m', base)]))
        self.assertEqual(lists, [AspiredVersionList(
            'm', ((2, os.path.join(base, '2')),))])

    def test_unreadable_entry_is_isolated(self):
        self.mkdirs('a/1')
        source = FileSystemSource(SourceConfig([
            SourceEntry('a', os.path.join(self.root, 'a')),
            SourceEntry('b', os.path.join(self.root, 'b'))]),
            sink=DesiredStateSink(), clock=lambda: 42.0)
        lists = source.poll()
        self.assertEqual([l.servable_name for l in lists], ['a'])
        self.assertFalse(source.health.healthy)
        self.assertEqual(source.health.errors['b'][0], 42.0)
        self.assertEqual(source.health.error_count, 1)

        self.mkdirs('b/3')
        source.poll()
        self.assertTrue(source.health.healthy)

    def test_pinned_rollback(self):
        self.mkdirs('m/5', 'm/6')
        base = os.path.join(self.root, 'm')
        lists = poll_once(SourceConfig([SourceEntry(
            'm', base, VersionSelection.specific([5]))]))
        self.assertEqual(lists[0].versions, ((5, os.path.join(base, '5')),))

    def test_repeated_polls_are_idempotent(self):
        self.mkdirs('m/1', 'm/2')
        sink = DesiredStateSink()
        source = FileSystemSource(SourceConfig(
            [SourceEntry('m', os.path.join(self.root, 'm'))]), sink)
        source.poll()
        once = dict(sink.desired)
        for _ in range(3):
            source.poll()
        self.assertEqual(sink.desired, once)

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            SourceConfig([SourceEntry('m', 'a'), SourceEntry('m', 'b')])
        with self.assertRaises(ValueError):
            SourceConfig([], poll_interval=0)
        with self.assertRaises(ValueError):
            SourceConfig([SourceEntry('m', 'a', adapter='pickle')])

    def test_read_config_file(self):
        path = os.path.join(self.root, 'models.yaml')
        with open(path, 'w') as fh:
            fh.write('poll_interval: 0.5\n'
                     'models:\n'
                     '  - name: ranker\n'
                     '    base_path: /models/ranker\n'
                     '    selection: latest:2\n'
                     '  - name: vocab\n'
                     '    base_path: /models/vocab\n'
                     '    adapter: archive+lookup_table\n')
        config = read_source_config(path)
        self.assertEqual(config.poll_interval, 0.5)
        self.assertEqual(config.entries[0].selection,
                         VersionSelection.latest(2))
        self.assertEqual(config.entries[1].adapter, 'archive+lookup_table')
        self.assertEqual(config.entries[1].selection,
                         VersionSelection.latest())


class TestRouting(unittest.TestCase):

    def test_route(self):
        table = RouteTable((RouteRule('tf_', 0),), default_port=1)
        self.assertEqual(route(AspiredVersionList('tf_ranker'), table), 0)
        self.assertEqual(route(AspiredVersionList('banana_clf'), table), 1)
        self.assertEqual(route(AspiredVersionList('x'), RouteTable()), 0)

    def test_router_forwards_unmodified(self):
        outputs = [DesiredStateSink(), DesiredStateSink()]
        router = SourceRouter(RouteTable((RouteRule('tf_', 0),), 1), outputs)
        versions = AspiredVersionList('banana_clf', ((1, '/p'),))
        router.set_aspired_versions(versions)
        self.assertIs(outputs[1].lists['banana_clf'], versions)
        self.assertEqual(outputs[0].lists, {})

    def test_router_rejects_bad_ports(self):
        with self.assertRaises(ValueError):
            SourceRouter(RouteTable((RouteRule('a', 3),)), [DesiredStateSink()])


class TestAdapters(TempDirTestCase):

    def test_adapt_wraps_paths(self):
        path = write_affine_version(self.root, 2, [[1.0]], [0.0])
        adapted = adapt(AspiredVersionList('m', ((2, path),)), 'affine')
        version, loader = adapted.versions[0]
        self.assertEqual(version, 2)
        self.assertEqual(loader, AffineLoader(path))
        self.assertIsInstance(loader.load(), AffineModel)

    def test_archive_chain_preserves_versions(self):
        source_dir = os.path.join(self.root, 'src')
        write_table_version(source_dir, 0, {b'k': b'v'}, default=b'd')
        write_archive(os.path.join(self.root, 'vocab', '4'),
                      os.path.join(source_dir, '0'))

        staging = os.path.join(self.root, 'staging')
        adapted = adapt(AspiredVersionList(
            'vocab', ((4, os.path.join(self.root, 'vocab', '4')),)),
            'archive+lookup_table', staging_root=staging)
        version, loader = adapted.versions[0]
        self.assertEqual(version, 4)
        self.assertIsInstance(loader, LookupTableLoader)
        self.assertIsInstance(loader.path, ArchivePath)
        # nothing is unpacked until load time
        self.assertFalse(os.path.exists(staging))
        table = loader.load()
        self.assertEqual(table, LookupTable({b'k': b'v'}, b'd'))

    def test_archives_with_same_name_and_version_do_not_share(self):
        staging = os.path.join(self.root, 'staging')
        biases = []
        for repo, bias in (('repo_a', 1.0), ('repo_b', 2.0)):
            source_dir = write_affine_version(
                os.path.join(self.root, repo + '_src'), 1, [[1.0]], [bias])
            version_dir = os.path.join(self.root, repo, 'm', '1')
            write_archive(version_dir, source_dir)
            adapted = adapt(AspiredVersionList('m', ((1, version_dir),)),
                            'archive+affine', staging_root=staging)
            biases.append(float(adapted.versions[0][1].load().b[0]))
        self.assertEqual(biases, [1.0, 2.0])

    def test_republished_archive_is_unpacked_again(self):
        staging = os.path.join(self.root, 'staging')
        version_dir = os.path.join(self.root, 'repo', 'm', '1')
        loaded = []
        for bias in (1.0, 2.0):
            source_dir = write_affine_version(
                os.path.join(self.root, 'src{}'.format(int(bias))), 1,
                [[1.0]], [bias])
            write_archive(version_dir, source_dir)
            archive = os.path.join(version_dir, 'model.tar.gz')
            # distinct mtimes even on coarse filesystem clocks
            os.utime(archive, ns=(int(bias) * 10 ** 9, int(bias) * 10 ** 9))
            adapted = adapt(AspiredVersionList('m', ((1, version_dir),)),
                            'archive+affine', staging_root=staging)
            loaded.append(float(adapted.versions[0][1].load().b[0]))
        self.assertEqual(loaded, [1.0, 2.0])

    def test_missing_file_fails_at_load(self):
        path = write_affine_version(self.root, 1, [[1.0]], [0.0])
        adapted = adapt(AspiredVersionList('m', ((1, path),)), 'affine')
        shutil.rmtree(path)
        with self.assertRaises(OSError):
            adapted.versions[0][1].load()

    def test_build_source_chain_routes_by_adapter(self):
        model_dir = os.path.join(self.root, 'm')
        table_dir = os.path.join(self.root, 't')
        write_affine_version(model_dir, 1, [[2.0]], [1.0])
        write_table_version(table_dir, 3, {b'a': b'b'})
        config = SourceConfig([
            SourceEntry('m', model_dir),
            SourceEntry('t', table_dir, adapter='lookup_table')])
        sink = DesiredStateSink()
        source = FileSystemSource(config)
        source.set_aspired_versions_callback(build_source_chain(config, sink))
        source.poll()
        model = sink.lists['m'].versions[0][1].load()
        table = sink.lists['t'].versions[0][1].load()
        np.testing.assert_array_equal(model.W, [[2.0]])
        self.assertEqual(table.entries, {b'a': b'b'})


class TestCommandSource(unittest.TestCase):

    def test_push_validates_and_forwards(self):
        sink = DesiredStateSink()
        source = CommandSource(sink)
        source.push(AspiredVersionList('m', ((1, '/p'),)))
        self.assertEqual(sink.desired, {'m': {1}})
        with self.assertRaises(ValueError):
            source.push(AspiredVersionList('m', ((1, 'a'), (1, 'b'))))


if __name__ == "__main__":
    unittest.main()
