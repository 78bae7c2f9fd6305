import os
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Tuple

import pandas as pd

from servekit.io import _atomic_write, read_yaml
from servekit.memory_utils import DEFAULT_OVERHEAD_FACTOR, \
    _estimate_ram_from_disk
from servekit.sources import SPECIFIC, PathUnreadable, VersionSelection, \
    scan_versions, select_versions

logger = logging.getLogger(__name__)

FIRST_FIT = 'first_fit'
BEST_FIT = 'best_fit'


class NoCapacity(ValueError):
    pass


class UnknownModel(ValueError):
    pass


class InvalidVersion(ValueError):
    pass


##############################################################################
#                           Records
##############################################################################


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    ram_capacity: int
    replicas: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, 'replicas', tuple(self.replicas))
        if not self.replicas:
            raise ValueError('Job {} needs at least one replica'
                             .format(self.job_id))
        if self.ram_capacity < 0:
            raise ValueError('Job {} has negative capacity'
                             .format(self.job_id))


@dataclass
class CanaryConfig:
    canary_version: int
    tee_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.tee_fraction <= 1.0:
            raise ValueError('tee_fraction must be in [0, 1], got {}'
                             .format(self.tee_fraction))


@dataclass
class ModelRecord:
    name: str
    path: str
    selection: VersionSelection = field(default_factory=VersionSelection)
    estimated_ram: int = 0
    assignment: Optional[str] = None
    canary: Optional[CanaryConfig] = None
    versions: List[int] = field(default_factory=list)
    adapter: str = 'affine'

    def desired_versions(self):
        chosen = select_versions(set(self.versions), self.selection)
        return tuple((v, os.path.join(self.path, str(v))) for v in chosen)

    def to_dict(self):
        return {
            'name': self.name,
            'path': self.path,
            'selection': str(self.selection),
            'estimated_ram': self.estimated_ram,
            'assignment': self.assignment,
            'canary': None if self.canary is None else
            {'canary_version': self.canary.canary_version,
             'tee_fraction': self.canary.tee_fraction},
            'versions': sorted(self.versions),
            'adapter': self.adapter,
        }


def estimate_ram(version_dir, overhead_factor=DEFAULT_OVERHEAD_FACTOR):
    try:
        return _estimate_ram_from_disk(version_dir, overhead_factor)
    except OSError as e:
        raise PathUnreadable('Cannot size {}: {}'.format(version_dir, e))


def assign(model: ModelRecord, jobs: List[JobSpec], usage: Dict[str, int],
           placement=FIRST_FIT) -> str:
    '''Picks a job with room for the model; usage is not modified'''
    fits = [(job.ram_capacity - usage.get(job.job_id, 0), i, job)
            for i, job in enumerate(jobs)
            if job.ram_capacity - usage.get(job.job_id, 0) >=
            model.estimated_ram]
    if not fits:
        raise NoCapacity('No job has {} bytes free for {}'
                         .format(model.estimated_ram, model.name))
    if placement == FIRST_FIT:
        return fits[0][2].job_id
    elif placement == BEST_FIT:
        return min(fits, key=lambda f: (f[0], f[1]))[2].job_id
    raise ValueError('Unknown placement {!r}'.format(placement))


def load_fleet_config(file_name):
    data = read_yaml(file_name)
    jobs = [JobSpec(str(j['id']), int(j['ram_capacity']),
                    tuple(j['replicas'])) for j in data.get('jobs') or []]
    ids = [j.job_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise ValueError('Job ids must be unique, got {}'.format(ids))
    placement = data.get('placement', FIRST_FIT)
    if placement not in (FIRST_FIT, BEST_FIT):
        raise ValueError('Unknown placement {!r}'.format(placement))
    return {
        'jobs': jobs,
        'overhead_factor': float(data.get('overhead_factor',
                                          DEFAULT_OVERHEAD_FACTOR)),
        'placement': placement,
    }


##############################################################################
#                           Journal
##############################################################################


class ControllerJournal(object):
    '''Append-only, line-delimited JSON command log.

    An entry is on disk (flushed and fsynced) before the controller applies
    it. A torn trailing line left by a crash is ignored on reload.
    '''

    def __init__(self, path=None):
        self.path = path
        self._entries = []
        if path is not None and os.path.exists(path):
            self._entries, torn = self._read(path)
            if torn:
                _atomic_write(path, b''.join(
                    (json.dumps(e, sort_keys=True) + '\n').encode('utf-8')
                    for e in self._entries))

    @staticmethod
    def _read(path):
        entries = []
        with open(path, 'r') as fh:
            lines = fh.read().split('\n')
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except ValueError:
                if i >= len(lines) - 2:
                    logger.warning('Dropping torn journal tail in %s', path)
                    return entries, True
                raise
        return entries, False

    @property
    def entries(self):
        return list(self._entries)

    @property
    def last_seq(self):
        return self._entries[-1]['seq'] if self._entries else 0

    def append(self, command: dict) -> dict:
        entry = dict(command, seq=self.last_seq + 1)
        if self.path is not None:
            with open(self.path, 'a') as fh:
                fh.write(json.dumps(entry, sort_keys=True) + '\n')
                fh.flush()
                os.fsync(fh.fileno())
        self._entries.append(entry)
        return entry

    def __len__(self):
        return len(self._entries)


##############################################################################
#                           Controller
##############################################################################


class Controller(object):
    '''Single-writer placement state: state = fold(journal)'''

    def __init__(self, jobs: List[JobSpec], journal: ControllerJournal = None,
                 overhead_factor=DEFAULT_OVERHEAD_FACTOR,
                 placement=FIRST_FIT, estimator: Callable[[str], int] = None):
        self.jobs = OrderedDict((job.job_id, job) for job in jobs)
        self.journal = journal or ControllerJournal()
        self.placement = placement
        self.estimator = estimator or partial(
            estimate_ram, overhead_factor=overhead_factor)
        self.models: Dict[str, ModelRecord] = OrderedDict()
        self.usage = {job_id: 0 for job_id in self.jobs}
        self.seq = 0
        self._lock = threading.RLock()
        for entry in self.journal.entries:
            self._apply(entry)

    @classmethod
    def from_config(cls, config: dict, journal_path=None, **kwargs):
        return cls(config['jobs'], ControllerJournal(journal_path),
                   overhead_factor=config['overhead_factor'],
                   placement=config['placement'], **kwargs)

    def _record(self, name) -> ModelRecord:
        record = self.models.get(name)
        if record is None:
            raise UnknownModel('Unknown model {}'.format(name))
        return record

    def _commit(self, command):
        with self._lock:
            entry = self.journal.append(command)
            self._apply(entry)
            return entry

    ##########################################################################
    #                       Commands
    ##########################################################################

    def add_model(self, name, path, selection=None):
        selection = selection or VersionSelection.latest()
        with self._lock:
            if name in self.models:
                raise ValueError('Model {} already exists'.format(name))
            versions = sorted(scan_versions(path))
            estimated = self.estimator(os.path.join(
                path, str(versions[-1]))) if versions else 0
            record = ModelRecord(name, path, selection, estimated)
            job = assign(record, list(self.jobs.values()), self.usage,
                         self.placement)
            return self._commit({
                'op': 'add_model', 'name': name, 'path': path,
                'selection': str(selection), 'versions': versions,
                'estimated_ram': estimated, 'job': job})

    def remove_model(self, name):
        with self._lock:
            self._record(name)
            return self._commit({'op': 'remove_model', 'name': name})

    def add_version(self, name, version, selection=None):
        '''Adds a version; a pinned or canaried model goes back to
        following the newest version unless another selection is given'''
        with self._lock:
            record = self._record(name)
            if not isinstance(version, int) or version < 0:
                raise InvalidVersion('Invalid version {!r}'.format(version))
            if not os.path.isdir(os.path.join(record.path, str(version))):
                raise InvalidVersion('Version {} of {} is not in {}'
                                     .format(version, name, record.path))
            if version in record.versions:
                return None
            command = {'op': 'add_version', 'name': name, 'version': version}
            if selection is not None or record.canary is not None or \
                    record.selection.kind == SPECIFIC:
                command['selection'] = str(selection or
                                           VersionSelection.latest())
                command['canary'] = None
            return self._commit(command)

    def rollback(self, name, version):
        with self._lock:
            record = self._record(name)
            if version not in record.versions:
                raise InvalidVersion('{} has no version {}'
                                     .format(name, version))
            # rolling back to the newest version ends the pin
            selection = VersionSelection.latest() \
                if version == max(record.versions) \
                else VersionSelection.specific([version])
            return self._commit({
                'op': 'set_selection', 'name': name,
                'selection': str(selection), 'canary': None})

    def canary(self, name, version, fraction):
        with self._lock:
            record = self._record(name)
            if not record.versions or version != max(record.versions):
                raise InvalidVersion('Canary version must be the newest '
                                     'version of {}'.format(name))
            CanaryConfig(version, fraction)
            return self._commit({
                'op': 'set_selection', 'name': name,
                'selection': str(VersionSelection.latest(2)),
                'canary': {'canary_version': version,
                           'tee_fraction': fraction}})

    ##########################################################################
    #                       State machine
    ##########################################################################

    def _apply(self, entry):
        if entry['seq'] != self.seq + 1:
            raise ValueError('Journal sequence gap at {} (expected {})'
                             .format(entry['seq'], self.seq + 1))
        op = entry['op']
        if op == 'add_model':
            record = ModelRecord(
                entry['name'], entry['path'],
                VersionSelection.parse(entry['selection']),
                entry['estimated_ram'], entry['job'],
                versions=list(entry['versions']))
            self.models[record.name] = record
            self.usage[record.assignment] += record.estimated_ram
        elif op == 'remove_model':
            record = self.models.pop(entry['name'])
            self.usage[record.assignment] -= record.estimated_ram
        elif op == 'add_version':
            record = self.models[entry['name']]
            record.versions.append(entry['version'])
            if 'selection' in entry:
                record.selection = VersionSelection.parse(entry['selection'])
                record.canary = None
        elif op == 'set_selection':
            record = self.models[entry['name']]
            record.selection = VersionSelection.parse(entry['selection'])
            record.canary = None if entry['canary'] is None else \
                CanaryConfig(**entry['canary'])
        else:
            raise ValueError('Unknown journal op {!r}'.format(op))
        self.seq = entry['seq']

    def capacity_ok(self):
        return all(self.usage[job_id] <= job.ram_capacity
                   for job_id, job in self.jobs.items())

    def state_dict(self):
        with self._lock:
            return {
                'seq': self.seq,
                'models': [r.to_dict() for r in self.models.values()],
                'usage': dict(self.usage),
            }

    def desired_lists(self):
        '''Per replica endpoint: {model name: ((version, path), ...)}'''
        with self._lock:
            desired = {replica: {} for job in self.jobs.values()
                       for replica in job.replicas}
            for record in self.models.values():
                for replica in self.jobs[record.assignment].replicas:
                    desired[replica][record.name] = record.desired_versions()
            return desired

    def replicas_of(self, name):
        return self.jobs[self._record(name).assignment].replicas

    def status_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.models.values():
            row = record.to_dict()
            row['desired'] = ','.join(str(v) for v, _ in
                                      record.desired_versions())
            row['canary'] = '' if record.canary is None else '{}@{}'.format(
                record.canary.canary_version, record.canary.tee_fraction)
            row.pop('versions')
            rows.append(row)
        columns = ['name', 'path', 'selection', 'desired', 'assignment',
                   'estimated_ram', 'canary', 'adapter']
        return pd.DataFrame(rows, columns=columns)
