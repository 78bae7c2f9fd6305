import re
import time
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, List, Optional, Tuple

logger = logging.getLogger(__name__)

LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']

_NAME_PATTERN = re.compile(r'^[^\s/\\]+$')


class InvalidList(ValueError):
    pass


class IllegalTransition(RuntimeError):
    pass


##############################################################################
#                           Servable Identity
##############################################################################


@dataclass(frozen=True, order=True)
class ServableId:
    name: str
    version: int

    def __post_init__(self):
        if not isinstance(self.name, str) or not _NAME_PATTERN.match(self.name):
            raise ValueError('Invalid servable name: {!r}'.format(self.name))
        if not isinstance(self.version, int) or self.version < 0:
            raise ValueError('Invalid version for {}: {!r}'
                             .format(self.name, self.version))

    def __str__(self):
        return '{}:{}'.format(self.name, self.version)


def parse_version(text: str) -> Optional[int]:
    '''Base-10 unsigned version, leading zeros allowed; None if not numeric'''
    if text.isascii() and text.isdigit():
        return int(text)
    return None


##############################################################################
#                           Lifecycle States
##############################################################################


class ServableState(Enum):
    NEW = 'New'
    LOADING = 'Loading'
    READY = 'Ready'
    UNLOADING = 'Unloading'
    DISABLED = 'Disabled'
    ERROR = 'Error'

    @property
    def is_terminal(self):
        return self in (ServableState.DISABLED, ServableState.ERROR)


LEGAL_TRANSITIONS = frozenset([
    (ServableState.NEW, ServableState.LOADING),
    (ServableState.LOADING, ServableState.READY),
    (ServableState.LOADING, ServableState.ERROR),
    (ServableState.READY, ServableState.UNLOADING),
    (ServableState.UNLOADING, ServableState.DISABLED),
    (ServableState.UNLOADING, ServableState.ERROR),
])


def validate_transition(from_state: ServableState,
                        to_state: ServableState) -> bool:
    return (from_state, to_state) in LEGAL_TRANSITIONS


@dataclass(frozen=True)
class StateEvent:
    id: ServableId
    from_state: ServableState
    to_state: ServableState
    timestamp: int = field(default_factory=time.monotonic_ns)
    executor_tag: str = 'inference'
    message: Optional[str] = None


##############################################################################
#                           Executor Tags
##############################################################################


MANAGER_THREAD_PREFIX = 'servekit-manager'
LOAD_THREAD_PREFIX = 'servekit-load'


def executor_tag(thread: Optional[threading.Thread] = None) -> str:
    '''Which pool the given (or current) thread belongs to'''
    name = (thread or threading.current_thread()).name
    if name.startswith(MANAGER_THREAD_PREFIX):
        return 'manager'
    elif name.startswith(LOAD_THREAD_PREFIX):
        return 'load'
    else:
        return 'inference'


class EventBus(object):
    '''Multi-producer, multi-consumer StateEvent fan-out.

    Events are appended to an in-memory log and handed to subscribers while
    the bus lock is held, so every consumer sees one id's events in emission
    order.
    '''

    def __init__(self, keep_log=True):
        self._lock = threading.Lock()
        self._subscribers: List[Callable[[StateEvent], None]] = []
        self._log: List[StateEvent] = []
        self._keep_log = keep_log

    def subscribe(self, callback: Callable[[StateEvent], None]):
        with self._lock:
            self._subscribers.append(callback)

    def publish(self, event: StateEvent):
        with self._lock:
            if self._keep_log:
                self._log.append(event)
            for callback in self._subscribers:
                try:
                    callback(event)
                except Exception:
                    logger.exception('State event subscriber failed on %s',
                                     event)

    def events(self, servable_id: Optional[ServableId] = None):
        with self._lock:
            if servable_id is None:
                return list(self._log)
            return [e for e in self._log if e.id == servable_id]


def replay_events(events) -> bool:
    '''True iff every per-id event stream walks the legal transition graph'''
    current = {}
    for event in events:
        expected = current.get(event.id, ServableState.NEW)
        if expected.is_terminal and event.from_state == ServableState.NEW:
            # re-aspired after finishing: a fresh record
            expected = ServableState.NEW
        if event.from_state != expected or \
                not validate_transition(event.from_state, event.to_state):
            return False
        current[event.id] = event.to_state
    return True


##############################################################################
#                           Loader Contract
##############################################################################


class Loader(ABC):
    '''Loads and unloads exactly one servable version.

    Subclasses implement `_load`, `_unload` and `estimate_memory`; this base
    enforces load-at-most-once and unload-only-after-load.
    '''

    def __init__(self):
        self._load_called = False
        self._loaded = False
        self._unload_called = False

    def load(self) -> Any:
        if self._load_called:
            raise RuntimeError('load() already called on {}'.format(self))
        self._load_called = True
        payload = self._load()
        self._loaded = True
        return payload

    def unload(self):
        if not self._loaded:
            raise RuntimeError('unload() before a successful load() on {}'
                               .format(self))
        if self._unload_called:
            raise RuntimeError('unload() already called on {}'.format(self))
        self._unload_called = True
        self._unload()

    @abstractmethod
    def _load(self) -> Any:
        raise NotImplementedError('To be implemented by subclasses')

    def _unload(self):
        pass

    @abstractmethod
    def estimate_memory(self) -> int:
        raise NotImplementedError('To be implemented by subclasses')


class CallableLoader(Loader):
    '''Loader around a plain factory function; used for in-memory servables'''

    def __init__(self, factory: Callable[[], Any], memory_estimate=0,
                 on_unload: Optional[Callable[[Any], None]] = None):
        super().__init__()
        self._factory = factory
        self._memory_estimate = memory_estimate
        self._on_unload = on_unload
        self._payload = None

    def _load(self):
        self._payload = self._factory()
        return self._payload

    def _unload(self):
        if self._on_unload is not None:
            self._on_unload(self._payload)
        self._payload = None

    def estimate_memory(self):
        return self._memory_estimate


##############################################################################
#                           Aspired Versions API
##############################################################################


@dataclass(frozen=True)
class AspiredVersionList:
    '''The complete set of versions of one servable a Source wants resident.

    `versions` holds (version, payload) pairs; the payload is stage-typed: a
    path at the Source stage, a Loader at the Manager stage.
    '''
    servable_name: str
    versions: Tuple[Tuple[int, Any], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'versions', tuple(
            (v, p) for v, p in self.versions))

    @property
    def version_numbers(self):
        return tuple(v for v, _ in self.versions)

    def validate(self):
        name = self.servable_name
        if not isinstance(name, str) or not _NAME_PATTERN.match(name):
            raise InvalidList('Invalid servable name: {!r}'.format(name))
        numbers = self.version_numbers
        for v in numbers:
            if not isinstance(v, int) or v < 0:
                raise InvalidList('Invalid version {!r} for {}'.format(v, name))
        if len(set(numbers)) != len(numbers):
            raise InvalidList('Duplicate versions {} for {}'
                              .format(sorted(numbers), name))
        return self

    def with_payloads(self, transform: Callable[[int, Any], Any]):
        return AspiredVersionList(self.servable_name, tuple(
            (v, transform(v, p)) for v, p in self.versions))


class AspiredVersionsSink(ABC):
    '''Anything that accepts aspired-version lists for one adapter stage'''

    @abstractmethod
    def set_aspired_versions(self, versions: AspiredVersionList):
        raise NotImplementedError('To be implemented by subclasses')


def aspire(target: AspiredVersionsSink, versions: AspiredVersionList):
    versions.validate()
    target.set_aspired_versions(versions)
    return True


class DesiredStateSink(AspiredVersionsSink):
    '''Records the latest desired set per servable; last writer wins'''

    def __init__(self):
        self._lock = threading.Lock()
        self.desired = {}
        self.lists = {}

    def set_aspired_versions(self, versions):
        with self._lock:
            self.desired[versions.servable_name] = \
                set(versions.version_numbers)
            self.lists[versions.servable_name] = versions


##############################################################################
#                           Logging Configuration
##############################################################################


def set_log_level(name=None):
    package_logger = logging.getLogger('servekit')
    if name is None:
        return logging.getLevelName(package_logger.level)

    name = name.upper()
    if name not in LOG_LEVELS:
        raise ValueError(f'Unsupported log level: {name}')

    if not package_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(
            '%(asctime)s %(levelname)s %(name)s [%(threadName)s] %(message)s'))
        package_logger.addHandler(handler)
    package_logger.setLevel(name)
