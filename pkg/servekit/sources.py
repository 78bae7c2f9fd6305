import os
import time
import hashlib
import logging
import tempfile
import threading
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from servekit.core import AspiredVersionList, AspiredVersionsSink, Loader, \
    parse_version
from servekit.io import read_affine_model, read_lookup_table, read_yaml, \
    unpack_archive, ARCHIVE_FILE
from servekit.memory_utils import _estimate_ram_from_disk

logger = logging.getLogger(__name__)

LATEST = 'latest'
SPECIFIC = 'specific'
ALL = 'all'


class PathUnreadable(OSError):
    pass


##############################################################################
#                           Configuration
##############################################################################


@dataclass(frozen=True)
class VersionSelection:
    kind: str = LATEST
    n: int = 1
    versions: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'versions', tuple(self.versions))
        if self.kind == LATEST:
            if not isinstance(self.n, int) or self.n < 1:
                raise ValueError('latest:N needs a positive N, got {!r}'
                                 .format(self.n))
        elif self.kind == SPECIFIC:
            if not self.versions:
                raise ValueError('specific selection needs at least one '
                                 'version')
            if any(not isinstance(v, int) or v < 0 for v in self.versions):
                raise ValueError('Invalid pinned versions {!r}'
                                 .format(self.versions))
        elif self.kind != ALL:
            raise ValueError('Unknown version selection {!r}'
                             .format(self.kind))

    @classmethod
    def latest(cls, n=1):
        return cls(LATEST, n=n)

    @classmethod
    def specific(cls, versions):
        return cls(SPECIFIC, versions=tuple(versions))

    @classmethod
    def all(cls):
        return cls(ALL)

    @classmethod
    def parse(cls, text):
        '''Grammar: latest[:N] | specific:V1,V2,... | all'''
        kind, _, arg = str(text).strip().partition(':')
        kind = kind.lower()
        try:
            if kind == LATEST:
                return cls.latest(int(arg) if arg else 1)
            elif kind == SPECIFIC:
                return cls.specific(int(v) for v in arg.split(',') if v)
            elif kind == ALL and not arg:
                return cls.all()
        except ValueError as e:
            raise ValueError('Bad version selection {!r}: {}'
                             .format(text, e))
        raise ValueError('Bad version selection {!r}'.format(text))

    def __str__(self):
        if self.kind == LATEST:
            return 'latest:{}'.format(self.n)
        elif self.kind == SPECIFIC:
            return 'specific:' + ','.join(str(v) for v in self.versions)
        return ALL


@dataclass(frozen=True)
class SourceEntry:
    servable_name: str
    base_path: str
    selection: VersionSelection = field(default_factory=VersionSelection)
    adapter: str = 'affine'


@dataclass
class SourceConfig:
    entries: List[SourceEntry] = field(default_factory=list)
    poll_interval: float = 1.0

    def __post_init__(self):
        names = [e.servable_name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError('Servable names must be unique, got {}'
                             .format(names))
        if not self.poll_interval > 0:
            raise ValueError('poll_interval must be positive, got {}'
                             .format(self.poll_interval))
        for entry in self.entries:
            _split_adapter_kind(entry.adapter)

    @classmethod
    def from_dict(cls, data):
        entries = []
        for model in data.get('models') or []:
            entries.append(SourceEntry(
                servable_name=model['name'],
                base_path=model['base_path'],
                selection=VersionSelection.parse(
                    model.get('selection', LATEST)),
                adapter=model.get('adapter', 'affine')))
        return cls(entries=entries,
                   poll_interval=float(data.get('poll_interval', 1.0)))


def read_source_config(file_name) -> SourceConfig:
    return SourceConfig.from_dict(read_yaml(file_name))


##############################################################################
#                           Discovery
##############################################################################


def scan_versions(base_path) -> set:
    try:
        children = os.listdir(base_path)
    except OSError as e:
        raise PathUnreadable('Cannot list {}: {}'.format(base_path, e))

    versions = set()
    for child in children:
        if child.startswith('.') or \
                not os.path.isdir(os.path.join(base_path, child)):
            continue
        version = parse_version(child)
        if version is None:
            logger.warning('Ignoring non-numeric version directory %s in %s',
                           child, base_path)
        else:
            versions.add(version)
    return versions


def select_versions(available, selection: VersionSelection) -> List[int]:
    if selection.kind == LATEST:
        chosen = sorted(available, reverse=True)[:selection.n]
    elif selection.kind == SPECIFIC:
        missing = set(selection.versions) - set(available)
        if missing:
            logger.warning('Pinned versions %s are not available',
                           sorted(missing))
        chosen = set(selection.versions) & set(available)
    else:
        chosen = available
    return sorted(chosen, reverse=True)


class SourceHealth(object):
    '''Per-entry PathUnreadable records, surfaced as a metric'''

    def __init__(self):
        self._lock = threading.Lock()
        self.errors = {}
        self.error_count = 0

    def record_error(self, name, message, timestamp):
        with self._lock:
            self.errors[name] = (timestamp, message)
            self.error_count += 1

    def clear(self, name):
        with self._lock:
            self.errors.pop(name, None)

    @property
    def healthy(self):
        with self._lock:
            return not self.errors


def poll_once(config: SourceConfig, clock=time.time,
              health: Optional[SourceHealth] = None):
    lists = []
    for entry in config.entries:
        try:
            available = scan_versions(entry.base_path)
        except PathUnreadable as e:
            logger.error('Source entry %s: %s', entry.servable_name, e)
            if health is not None:
                health.record_error(entry.servable_name, str(e), clock())
            continue
        if health is not None:
            health.clear(entry.servable_name)

        chosen = select_versions(available, entry.selection)
        lists.append(AspiredVersionList(entry.servable_name, tuple(
            (v, os.path.join(entry.base_path, str(v))) for v in chosen)))
    return lists


class FileSystemSource(object):
    '''Polls the configured directories on one driver thread'''

    def __init__(self, config: SourceConfig,
                 sink: Optional[AspiredVersionsSink] = None, clock=time.time):
        self.config = config
        self.health = SourceHealth()
        self._sink = sink
        self._clock = clock
        self._stop = threading.Event()
        self._thread = None

    def set_aspired_versions_callback(self, sink: AspiredVersionsSink):
        self._sink = sink

    def poll(self):
        lists = poll_once(self.config, clock=self._clock, health=self.health)
        for versions in lists:
            self._sink.set_aspired_versions(versions)
        return lists

    def _run(self):
        while not self._stop.wait(self.config.poll_interval):
            try:
                self.poll()
            except Exception:
                logger.exception('Filesystem poll failed')

    def start(self):
        if self._sink is None:
            raise RuntimeError('Source has no aspired-versions sink')
        self.poll()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name='servekit-source-poller')
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


class CommandSource(object):
    '''Emits lists pushed from outside (the fleet Synchronizer)'''

    def __init__(self, sink: Optional[AspiredVersionsSink] = None):
        self._sink = sink
        self.health = SourceHealth()

    def set_aspired_versions_callback(self, sink: AspiredVersionsSink):
        self._sink = sink

    def push(self, versions: AspiredVersionList):
        versions.validate()
        self._sink.set_aspired_versions(versions)
        return versions

    def start(self):
        if self._sink is None:
            raise RuntimeError('Source has no aspired-versions sink')

    def stop(self):
        pass


##############################################################################
#                           Routing
##############################################################################


@dataclass(frozen=True)
class RouteRule:
    pattern: str
    port: int
    prefix: bool = True

    def matches(self, name):
        return name.startswith(self.pattern) if self.prefix \
            else name == self.pattern


@dataclass(frozen=True)
class RouteTable:
    rules: Tuple[RouteRule, ...] = ()
    default_port: int = 0


def route(versions: AspiredVersionList, table: RouteTable) -> int:
    for rule in table.rules:
        if rule.matches(versions.servable_name):
            return rule.port
    return table.default_port


class SourceRouter(AspiredVersionsSink):
    def __init__(self, table: RouteTable,
                 outputs: Sequence[AspiredVersionsSink]):
        ports = [r.port for r in table.rules] + [table.default_port]
        if any(p < 0 or p >= len(outputs) for p in ports):
            raise ValueError('Route table references ports outside 0..{}'
                             .format(len(outputs) - 1))
        self.table = table
        self.outputs = list(outputs)

    def set_aspired_versions(self, versions):
        self.outputs[route(versions, self.table)].set_aspired_versions(
            versions)


##############################################################################
#                           Loaders and Adapters
##############################################################################


@dataclass(frozen=True)
class ArchivePath:
    '''A version directory whose files ship as model.tar.gz'''
    archive: str
    staging: str

    def unpack_dir(self):
        '''Unpack target keyed by the archive's real path, size and mtime'''
        info = os.stat(self.archive)
        key = '{}:{}:{}'.format(os.path.realpath(self.archive), info.st_size,
                                 info.st_mtime_ns)
        digest = hashlib.sha256(key.encode('utf-8')).hexdigest()[:16]
        return os.path.join(self.staging, digest)

    def materialize(self):
        return unpack_archive(self.archive, self.unpack_dir())

    def exists(self):
        return os.path.isfile(self.archive)


def _materialize(path):
    return path.materialize() if isinstance(path, ArchivePath) else path


def _path_exists(path):
    return path.exists() if isinstance(path, ArchivePath) \
        else os.path.exists(path)


class _FileLoader(Loader):
    def __init__(self, path):
        super().__init__()
        self.path = path

    def estimate_memory(self):
        try:
            if isinstance(self.path, ArchivePath):
                return int(os.path.getsize(self.path.archive) * 1.25)
            return _estimate_ram_from_disk(self.path)
        except OSError:
            return 0

    def __repr__(self):
        return '{}({!r})'.format(type(self).__name__, self.path)

    def __eq__(self, other):
        return type(other) is type(self) and other.path == self.path

    def __hash__(self):
        return hash((type(self), self.path))


class AffineLoader(_FileLoader):
    def _load(self):
        return read_affine_model(_materialize(self.path))


class LookupTableLoader(_FileLoader):
    def _load(self):
        return read_lookup_table(_materialize(self.path))


LOADERS = {
    'affine': AffineLoader,
    'lookup_table': LookupTableLoader,
}


def _split_adapter_kind(adapter_kind):
    '''"archive+affine" -> (["archive"], "affine")'''
    *stages, kind = adapter_kind.split('+')
    if kind not in LOADERS or any(s != 'archive' for s in stages):
        raise ValueError('Unknown adapter kind {!r}'.format(adapter_kind))
    return stages, kind


class SourceAdapter(AspiredVersionsSink):
    '''Transforms each version payload and forwards the list downstream'''

    def __init__(self, downstream: Optional[AspiredVersionsSink] = None):
        self.downstream = downstream

    def convert(self, name, version, payload):
        raise NotImplementedError('To be implemented by subclasses')

    def adapt(self, versions: AspiredVersionList) -> AspiredVersionList:
        return versions.with_payloads(
            lambda v, p: self.convert(versions.servable_name, v, p))

    def set_aspired_versions(self, versions):
        self.downstream.set_aspired_versions(self.adapt(versions))


class ArchiveAdapter(SourceAdapter):
    def __init__(self, downstream=None, staging_root=None):
        super().__init__(downstream)
        self.staging_root = staging_root or os.path.join(
            tempfile.gettempdir(), 'servekit-unpacked')

    def convert(self, name, version, payload):
        return ArchivePath(
            archive=os.path.join(payload, ARCHIVE_FILE),
            staging=os.path.join(self.staging_root, name, str(version)))


class LoaderAdapter(SourceAdapter):
    def __init__(self, kind, downstream=None):
        super().__init__(downstream)
        if kind not in LOADERS:
            raise ValueError('Unknown loader kind {!r}'.format(kind))
        self.loader_class = LOADERS[kind]

    def convert(self, name, version, payload):
        if not _path_exists(payload):
            logger.warning('Path for %s:%s does not exist yet: %s',
                           name, version, payload)
        return self.loader_class(payload)


def make_adapter_chain(adapter_kind, downstream, staging_root=None):
    '''Builds path -> [archive ->] loader adapters ending at downstream'''
    stages, kind = _split_adapter_kind(adapter_kind)
    head = LoaderAdapter(kind, downstream)
    for _ in stages:
        head = ArchiveAdapter(head, staging_root=staging_root)
    return head


def adapt(versions: AspiredVersionList, adapter_kind,
          staging_root=None) -> AspiredVersionList:
    stages, kind = _split_adapter_kind(adapter_kind)
    for _ in stages:
        versions = ArchiveAdapter(staging_root=staging_root).adapt(versions)
    return LoaderAdapter(kind).adapt(versions)


def build_source_chain(config: SourceConfig, sink: AspiredVersionsSink,
                       staging_root=None):
    '''Source -> Router -> per-kind adapter chains -> sink'''
    kinds = sorted({e.adapter for e in config.entries}) or ['affine']
    chains = [make_adapter_chain(k, sink, staging_root) for k in kinds]
    rules = tuple(RouteRule(e.servable_name, kinds.index(e.adapter),
                            prefix=False) for e in config.entries)
    return SourceRouter(RouteTable(rules, default_port=0), chains)
