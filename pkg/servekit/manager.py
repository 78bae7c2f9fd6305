import time
import queue
import logging
import threading
from threading import current_thread
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Dict, Optional

from servekit.core import AspiredVersionList, AspiredVersionsSink, \
    EventBus, IllegalTransition, Loader, ServableId, ServableState, \
    StateEvent, executor_tag, validate_transition, LOAD_THREAD_PREFIX, \
    MANAGER_THREAD_PREFIX
from servekit.memory_utils import _default_thread_count, _free_memory
from servekit.policy import LOAD, VersionPolicy, policy_next_action

logger = logging.getLogger(__name__)


class NotFound(KeyError):
    def __init__(self, name, message=None):
        super().__init__(name)
        self.name = name
        self.message = message or 'Servable {} has no ready version'.format(
            name)

    def __str__(self):
        return self.message


class VersionNotFound(NotFound):
    def __init__(self, name, version):
        super().__init__(name, 'Version {} of servable {} is not ready'
                         .format(version, name))
        self.version = version


@dataclass
class ManagerConfig:
    policy: VersionPolicy = VersionPolicy.AVAILABILITY_PRESERVING
    num_load_threads: int = 2
    num_initial_load_threads: int = field(
        default_factory=_default_thread_count)
    manage_interval_ms: float = 100
    allocator_trim_hook: Optional[Callable[[], Any]] = None

    def __post_init__(self):
        if isinstance(self.policy, str):
            self.policy = VersionPolicy.parse(self.policy)
        if self.num_load_threads < 1 or self.num_initial_load_threads < 1:
            raise ValueError('Thread counts must be at least 1')
        if not self.manage_interval_ms > 0:
            raise ValueError('manage_interval_ms must be positive')


##############################################################################
#                           Residents and Handles
##############################################################################


class _Resident(object):
    '''A loaded payload and the tokens of handles currently holding it.

    Token bookkeeping uses only set add/discard, which are atomic, so the
    inference path never takes a lock. The destruction latch is only touched
    on the unload path.
    '''
    __slots__ = ('id', 'payload', 'tokens', 'unloading', '_manager',
                 '_destroy_lock', '_destroy_scheduled')

    def __init__(self, servable_id, payload, manager):
        self.id = servable_id
        self.payload = payload
        self.tokens = set()
        self.unloading = False
        self._manager = manager
        self._destroy_lock = threading.Lock()
        self._destroy_scheduled = False

    def acquire(self, token):
        self.tokens.add(token)
        if self.unloading:
            self.release(token)
            return False
        return True

    def release(self, token):
        self.tokens.discard(token)
        if self.unloading and not self.tokens:
            self.schedule_destroy()

    def begin_unload(self):
        self.unloading = True
        if not self.tokens:
            self.schedule_destroy()

    def schedule_destroy(self):
        with self._destroy_lock:
            if self._destroy_scheduled:
                return
            self._destroy_scheduled = True
        self._manager._submit_destroy(self)


class ServableHandle(object):
    __slots__ = ('id', '_resident', '_manager', '_thread', '_released')

    def __init__(self, manager, resident):
        self.id = resident.id
        self._resident = resident
        self._manager = manager
        self._thread = current_thread()
        self._released = False

    @property
    def acquiring_thread_tag(self):
        # the pool name is only resolved when someone asks for it
        return executor_tag(self._thread)

    @property
    def payload(self):
        return self._resident.payload

    def release(self):
        self._manager.release_handle(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()

    def __repr__(self):
        return 'ServableHandle({})'.format(self.id)


class ServableMapSnapshot(object):
    '''Immutable view of the Ready servables, published by the manager'''

    def __init__(self, residents: Dict[ServableId, _Resident], epoch: int):
        self.epoch = epoch
        self._map = MappingProxyType(dict(residents))
        by_name = {}
        for servable_id, resident in residents.items():
            by_name.setdefault(servable_id.name, {})[
                servable_id.version] = resident
        self._by_name = MappingProxyType({
            name: (tuple(versions[v] for v in
                         sorted(versions, reverse=True)), versions)
            for name, versions in by_name.items()
        })

    def __contains__(self, servable_id):
        return servable_id in self._map

    def __len__(self):
        return len(self._map)

    @property
    def payloads(self):
        return {sid: r.payload for sid, r in self._map.items()}

    def ready_versions(self, name):
        entry = self._by_name.get(name)
        return tuple(r.id.version for r in entry[0]) if entry else ()

    def candidates(self, name, version=None):
        '''Residents to try, most preferred first'''
        entry = self._by_name.get(name)
        if entry is None:
            raise NotFound(name)
        if version is None:
            return entry[0]
        resident = entry[1].get(version)
        if resident is None:
            raise VersionNotFound(name, version)
        return (resident,)


@dataclass(eq=False)
class ManagedVersion:
    id: ServableId
    loader: Optional[Loader]
    state: ServableState = ServableState.NEW
    is_aspired: bool = True
    payload: Any = None
    error_message: Optional[str] = None
    resident: Optional[_Resident] = None
    # loader to start over with once an Unloading record finishes
    reaspired_loader: Optional[Loader] = None


##############################################################################
#                           Aspired Versions Manager
##############################################################################


class AspiredVersionsManager(AspiredVersionsSink):

    def __init__(self, config: Optional[ManagerConfig] = None,
                 event_bus: Optional[EventBus] = None):
        self.config = config or ManagerConfig()
        self.events = event_bus or EventBus()
        self.ready = threading.Event()
        self.startup_failures = 0
        self.load_failures = 0
        self.trim_calls = 0
        self.publish_hook: Optional[Callable[[ServableMapSnapshot], Any]] = \
            None

        self._lock = threading.RLock()
        self._servables: Dict[str, Dict[int, ManagedVersion]] = {}
        self._snapshot = ServableMapSnapshot({}, 0)
        self._completions = queue.SimpleQueue()
        self._in_flight = 0
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._load_pool = None
        self._driver = None

    ##########################################################################
    #                       Aspired versions (any thread)
    ##########################################################################

    def set_aspired_versions(self, versions: AspiredVersionList):
        versions.validate()
        wanted = dict(versions.versions)
        name = versions.servable_name
        with self._lock:
            records = self._servables.setdefault(name, {})
            for version, record in list(records.items()):
                if version in wanted:
                    continue
                if record.state == ServableState.NEW:
                    del records[version]
                else:
                    record.is_aspired = False
                    record.reaspired_loader = None

            for version, loader in wanted.items():
                record = records.get(version)
                if record is None or (record.state.is_terminal and
                                      not record.is_aspired):
                    records[version] = ManagedVersion(
                        ServableId(name, version), loader)
                elif record.state == ServableState.UNLOADING:
                    record.reaspired_loader = loader
                else:
                    record.is_aspired = True
        self._wake.set()

    ##########################################################################
    #                       Driver thread
    ##########################################################################

    def manage_step(self):
        initiated = self._apply_completions()
        unloads = []
        with self._lock:
            for name in sorted(self._servables):
                records = self._servables[name]
                versions = list(records.values())
                if any(v.state == ServableState.LOADING for v in versions):
                    continue
                action = policy_next_action(versions, self.config.policy)
                if action is None:
                    continue
                record = records[action.version]
                if action.kind == LOAD:
                    initiated.append(self._start_load(record))
                else:
                    initiated.append(self._transition(
                        record, ServableState.UNLOADING))
                    self._in_flight += 1
                    unloads.append(record.resident)

            if initiated:
                for resident in unloads:
                    resident.unloading = True
                self.publish_snapshot()

        for resident in unloads:
            resident.begin_unload()
        return initiated

    def _apply_completions(self):
        events = []
        while True:
            try:
                record, payload, error = self._completions.get_nowait()
            except queue.Empty:
                break
            with self._lock:
                self._in_flight -= 1
                if error is not None:
                    self.load_failures += 1
                    logger.error('Failed to load %s: %s', record.id, error)
                    events.append(self._transition(
                        record, ServableState.ERROR, message=error))
                else:
                    record.payload = payload
                    record.resident = _Resident(record.id, payload, self)
                    events.append(self._transition(
                        record, ServableState.READY))
        return events

    def _start_load(self, record):
        try:
            needed = record.loader.estimate_memory()
        except OSError:
            needed = 0
        if needed > _free_memory():
            logger.warning('%s needs about %d bytes, more than is free',
                           record.id, needed)
        event = self._transition(record, ServableState.LOADING)
        self._in_flight += 1
        self._pool().submit(self._run_load, record)
        return event

    def _run_load(self, record):
        try:
            payload, error = record.loader.load(), None
        except Exception as e:
            payload, error = None, '{}: {}'.format(type(e).__name__, e)
        self._completions.put((record, payload, error))
        self._wake.set()

    def publish_snapshot(self):
        with self._lock:
            residents = {
                record.id: record.resident
                for records in self._servables.values()
                for record in records.values()
                if record.state == ServableState.READY
            }
            snapshot = ServableMapSnapshot(residents,
                                           self._snapshot.epoch + 1)
            if self.publish_hook is not None:
                self.publish_hook(snapshot)
            self._snapshot = snapshot
        return snapshot

    @property
    def snapshot(self):
        return self._snapshot

    def _transition(self, record, to_state, message=None):
        if not validate_transition(record.state, to_state):
            raise IllegalTransition('{}: {} -> {}'.format(
                record.id, record.state.value, to_state.value))
        event = StateEvent(record.id, record.state, to_state,
                           executor_tag=executor_tag(), message=message)
        record.state = to_state
        if to_state == ServableState.ERROR:
            record.error_message = message
        self.events.publish(event)
        return event

    ##########################################################################
    #                       Deferred destruction
    ##########################################################################

    def _submit_destroy(self, resident):
        pool = self._load_pool
        if pool is not None:
            try:
                pool.submit(self._destroy, resident)
                return
            except RuntimeError:
                pass
        threading.Thread(target=self._destroy, args=(resident,),
                         name=LOAD_THREAD_PREFIX + '-destroy',
                         daemon=True).start()

    def _destroy(self, resident):
        record = self._record(resident.id)
        error = None
        try:
            record.loader.unload()
        except Exception as e:
            error = '{}: {}'.format(type(e).__name__, e)
            logger.error('Failed to unload %s: %s', record.id, error)
        resident.payload = None
        record.payload = None
        record.resident = None

        hook = self.config.allocator_trim_hook
        if hook is not None:
            try:
                hook()
            except Exception:
                logger.exception('Allocator trim hook failed')
        with self._lock:
            self.trim_calls += hook is not None
            self._transition(record, ServableState.ERROR if error
                             else ServableState.DISABLED, message=error)
            self._in_flight -= 1
            if record.reaspired_loader is not None:
                records = self._servables[record.id.name]
                if records.get(record.id.version) is record:
                    records[record.id.version] = ManagedVersion(
                        record.id, record.reaspired_loader)
        self._wake.set()

    def _record(self, servable_id):
        with self._lock:
            return self._servables[servable_id.name][servable_id.version]

    ##########################################################################
    #                       Inference path (any thread)
    ##########################################################################

    def get_handle(self, name, version=None) -> ServableHandle:
        snapshot = self._snapshot
        handle = self._acquire(snapshot, name, version)
        if handle is None:
            fresh = self._snapshot
            if fresh is not snapshot:
                handle = self._acquire(fresh, name, version)
        if handle is None:
            if version is None:
                raise NotFound(name)
            raise VersionNotFound(name, version)
        return handle

    def _acquire(self, snapshot, name, version):
        for resident in snapshot.candidates(name, version):
            handle = ServableHandle(self, resident)
            if resident.acquire(handle):
                return handle
        return None

    def release_handle(self, handle: ServableHandle):
        if handle._released:
            raise RuntimeError('{} released twice'.format(handle))
        handle._released = True
        handle._resident.release(handle)

    ##########################################################################
    #                       Lifecycle
    ##########################################################################

    def _pool(self):
        if self._load_pool is None:
            self._load_pool = ThreadPoolExecutor(
                max_workers=self.config.num_load_threads,
                thread_name_prefix=LOAD_THREAD_PREFIX)
        return self._load_pool

    def initial_load(self):
        '''Loads every initially aspired version using the startup pool'''
        with self._lock:
            pending = [record for records in self._servables.values()
                       for record in records.values()
                       if record.is_aspired and
                       record.state == ServableState.NEW]
            for record in pending:
                self._transition(record, ServableState.LOADING)

        if pending:
            startup_pool = ThreadPoolExecutor(
                max_workers=self.config.num_initial_load_threads,
                thread_name_prefix=LOAD_THREAD_PREFIX + '-initial')
            futures = {startup_pool.submit(record.loader.load): record
                       for record in pending}
            wait(futures)
            startup_pool.shutdown(wait=True)

            with self._lock:
                for future, record in futures.items():
                    error = future.exception()
                    if error is not None:
                        self.startup_failures += 1
                        self.load_failures += 1
                        message = '{}: {}'.format(type(error).__name__, error)
                        logger.error('Failed to load %s at startup: %s',
                                     record.id, message)
                        self._transition(record, ServableState.ERROR,
                                         message=message)
                    else:
                        record.payload = future.result()
                        record.resident = _Resident(record.id, record.payload,
                                                    self)
                        self._transition(record, ServableState.READY)
                self.publish_snapshot()

        self._pool()
        logger.info('Initial load finished: %d versions, %d failed',
                    len(pending), self.startup_failures)

    def start(self, wait_ready=True, timeout=None):
        if self._driver is not None:
            raise RuntimeError('Manager already started')
        self._driver = threading.Thread(target=self._run, daemon=True,
                                        name=MANAGER_THREAD_PREFIX)
        self._driver.start()
        if wait_ready:
            self.ready.wait(timeout)
        return self.ready.is_set()

    def _run(self):
        try:
            self.initial_load()
        except Exception:
            logger.exception('Initial load failed')
        self.ready.set()

        interval = self.config.manage_interval_ms / 1000.0
        while not self._stop.is_set():
            self._wake.wait(interval)
            self._wake.clear()
            if self._stop.is_set():
                break
            try:
                self.manage_step()
            except Exception:
                logger.exception('Manage step failed')

    def is_idle(self):
        with self._lock:
            if self._in_flight or not self._completions.empty():
                return False
            for records in self._servables.values():
                versions = list(records.values())
                if policy_next_action(versions, self.config.policy):
                    return False
        return True

    def run_until_idle(self, timeout=10.0):
        '''Steps the manager on the calling thread; only before start()'''
        if self._driver is not None:
            raise RuntimeError('Manager is driven by its own thread')
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            self.manage_step()
            if self.is_idle():
                return True
            self._wake.wait(0.005)
            self._wake.clear()
        return False

    def wait_until_idle(self, timeout=10.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.is_idle():
                return True
            self._wake.set()
            time.sleep(0.005)
        return False

    def stop(self, timeout=10.0):
        '''Unloads everything through the normal Unloading path'''
        with self._lock:
            for name in list(self._servables):
                self.set_aspired_versions(AspiredVersionList(name, ()))
        if self._driver is not None:
            drained = self.wait_until_idle(timeout)
            self._stop.set()
            self._wake.set()
            self._driver.join()
        else:
            drained = self.run_until_idle(timeout)
        if not drained:
            logger.warning('Manager stopped with %d handles outstanding',
                           self.outstanding_handles())
        if self._load_pool is not None:
            self._load_pool.shutdown(wait=drained)
        return drained

    ##########################################################################
    #                       Status
    ##########################################################################

    def servable_names(self):
        with self._lock:
            return sorted(self._servables)

    def status(self, name):
        with self._lock:
            if name not in self._servables:
                raise NotFound(name, 'Unknown servable {}'.format(name))
            rows = []
            for version in sorted(self._servables[name], reverse=True):
                record = self._servables[name][version]
                row = {'version': version, 'state': record.state.value,
                       'is_aspired': record.is_aspired}
                if record.error_message is not None:
                    row['error_message'] = record.error_message
                rows.append(row)
            return rows

    def outstanding_handles(self):
        with self._lock:
            return sum(len(record.resident.tokens)
                       for records in self._servables.values()
                       for record in records.values()
                       if record.resident is not None)
