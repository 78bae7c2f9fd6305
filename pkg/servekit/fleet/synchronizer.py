import json
import time
import logging
from typing import Dict

import requests

from servekit.core import AspiredVersionList, ServableState

logger = logging.getLogger(__name__)

READY = ServableState.READY.value
ERROR = ServableState.ERROR.value
RESIDENT = (ServableState.LOADING.value, READY,
            ServableState.UNLOADING.value)
UNKNOWN = (('unknown', None),)


class ReplicaError(RuntimeError):
    def __init__(self, status, message):
        super().__init__('HTTP {}: {}'.format(status, message))
        self.status = status


def sync_diff(desired: Dict[str, dict], acknowledged: Dict[str, dict]):
    '''Aspire commands whose lists differ from what each server last acked.

    Models a server acknowledged but no longer should hold get an empty
    list. Commands are full declarative lists, so resending is harmless.
    '''
    commands = {}
    for server in sorted(set(desired) | set(acknowledged)):
        want = desired.get(server, {})
        have = acknowledged.get(server, {})
        pending = [AspiredVersionList(name, want[name])
                   for name in sorted(want) if have.get(name) != want[name]]
        pending += [AspiredVersionList(name, ()) for name in sorted(have)
                    if name not in want and have[name]]
        if pending:
            commands[server] = pending
    return commands


def _aspire_body(versions: AspiredVersionList, adapter='affine'):
    return {
        'servable_name': versions.servable_name,
        'versions': [{'version': v, 'path': p} for v, p in versions.versions],
        'adapter': adapter,
    }


def push_aspired(transport, server, versions: AspiredVersionList,
                 adapter='affine'):
    '''Sends one list to a command-mode server; returns its status report'''
    return transport.push(server, versions, adapter)


##############################################################################
#                           Transports
##############################################################################


class HttpTransport(object):
    def __init__(self, timeout=5.0, session=None):
        self.timeout = timeout
        self.session = session or requests.Session()

    def push(self, server, versions, adapter='affine'):
        response = self.session.post(
            '{}/v1/admin/aspire'.format(server.rstrip('/')),
            json=_aspire_body(versions, adapter), timeout=self.timeout)
        if response.status_code != 200:
            raise ReplicaError(response.status_code, response.text)
        return response.json()

    def status(self, server, name):
        response = self.session.get(
            '{}/v1/models/{}'.format(server.rstrip('/'), name),
            timeout=self.timeout)
        if response.status_code == 404:
            return []
        if response.status_code != 200:
            raise ReplicaError(response.status_code, response.text)
        return response.json()

    def infer(self, server, name, version, verb, body):
        url = '{}/v1/models/{}'.format(server.rstrip('/'), name)
        if version is not None:
            url += '/versions/{}'.format(version)
        response = self.session.post('{}:{}'.format(url, verb), json=body,
                                     timeout=self.timeout)
        if response.status_code != 200:
            raise ReplicaError(response.status_code, response.text)
        return response.json()


class InProcessTransport(object):
    '''Talks to ModelServer objects directly; `down` simulates outages'''

    def __init__(self, servers):
        self.servers = dict(servers)
        self.down = set()

    def _server(self, endpoint):
        if endpoint in self.down or endpoint not in self.servers:
            raise requests.ConnectionError('{} is unreachable'
                                           .format(endpoint))
        return self.servers[endpoint]

    def push(self, server, versions, adapter='affine'):
        target = self._server(server)
        try:
            return target.aspire_command(_aspire_body(versions, adapter))
        except (ValueError, KeyError) as e:
            raise ReplicaError(400, str(e))

    def status(self, server, name):
        server = self._server(server)
        try:
            return server.handle_status(name)
        except KeyError:
            return []

    def infer(self, server, name, version, verb, body):
        status, content = self._server(server).handle_request(
            verb, name, version, json.dumps(body).encode('utf-8'))
        if status != 200:
            raise ReplicaError(status, content.get('error'))
        return content


##############################################################################
#                           Synchronizer
##############################################################################


class Backoff(object):
    '''Exponential retry delay, reset on success'''

    def __init__(self, min_interval=0.1, max_interval=10.0, multiplier=2):
        self.min_interval = min_interval
        self.max_interval = max_interval
        self.multiplier = multiplier
        self.succeeded()

    def succeeded(self):
        self._current = self.min_interval

    def failed(self):
        interval = self._current
        self._current = min(self.max_interval,
                            self._current * self.multiplier)
        return interval


class Synchronizer(object):
    '''Pushes the controller's desired lists to serving replicas'''

    def __init__(self, controller, transport, clock=time.monotonic,
                 min_backoff=0.1, max_backoff=10.0):
        self.controller = controller
        self.transport = transport
        self.clock = clock
        self.acknowledged: Dict[str, dict] = {}
        self.reports: Dict[str, dict] = {}
        self.failures: Dict[str, int] = {}
        self._min_backoff = min_backoff
        self._max_backoff = max_backoff
        self._backoff: Dict[str, Backoff] = {}
        self._retry_at: Dict[str, float] = {}
        self._seed_removed()

    def _seed_removed(self):
        '''Marks journaled models that left a server as possibly resident
        there, so a fresh synchronizer still sends them an empty list'''
        desired = self.controller.desired_lists()
        for entry in self.controller.journal.entries:
            if entry['op'] != 'add_model':
                continue
            job = self.controller.jobs.get(entry['job'])
            for server in job.replicas if job else ():
                if entry['name'] not in desired.get(server, {}):
                    self.acknowledged.setdefault(server, {})[
                        entry['name']] = UNKNOWN

    def _adapter(self, name):
        record = self.controller.models.get(name)
        return 'affine' if record is None else record.adapter

    def _mark_failed(self, server, error):
        backoff = self._backoff.setdefault(
            server, Backoff(self._min_backoff, self._max_backoff))
        self._retry_at[server] = self.clock() + backoff.failed()
        self.failures[server] = self.failures.get(server, 0) + 1
        logger.error('Server %s unreachable: %s', server, error)

    def _mark_ok(self, server):
        if server in self._backoff:
            self._backoff[server].succeeded()
        self._retry_at.pop(server, None)

    def healthy(self, server):
        return server not in self._retry_at

    def _check_acknowledged(self, server, name, report):
        '''Forgets an ack the server no longer shows (it restarted), so the
        next round resends the full list'''
        acked = self.acknowledged.get(server, {}).get(name)
        if not acked or acked == UNKNOWN:
            return
        reported = {row['version'] for row in report}
        if any(version not in reported for version, _ in acked):
            logger.warning('Server %s lost %s; re-aspiring', server, name)
            del self.acknowledged[server][name]

    def sync_round(self):
        '''Pushes every pending diff once; returns how many were acked'''
        desired = self.controller.desired_lists()
        sent = 0
        for server, commands in sync_diff(desired,
                                          self.acknowledged).items():
            if self.clock() < self._retry_at.get(server, 0):
                continue
            for versions in commands:
                name = versions.servable_name
                try:
                    report = push_aspired(self.transport, server, versions,
                                          self._adapter(name))
                except (requests.RequestException, ReplicaError) as e:
                    self._mark_failed(server, e)
                    break
                self._mark_ok(server)
                acked = self.acknowledged.setdefault(server, {})
                if versions.versions:
                    acked[name] = versions.versions
                else:
                    acked.pop(name, None)
                self.reports.setdefault(server, {})[name] = report
                sent += 1
        self.refresh(desired)
        return sent

    def refresh(self, desired=None):
        '''Re-reads status for every model a server holds or should hold'''
        desired = self.controller.desired_lists() if desired is None \
            else desired
        for server in sorted(set(desired) | set(self.acknowledged)):
            if not self.healthy(server):
                continue
            names = set(desired.get(server, {})) | \
                set(self.reports.get(server, {}))
            for name in sorted(names):
                try:
                    report = self.transport.status(server, name)
                except (requests.RequestException, ReplicaError) as e:
                    self._mark_failed(server, e)
                    break
                self.reports.setdefault(server, {})[name] = report
                if name in desired.get(server, {}):
                    self._check_acknowledged(server, name, report)

    def converged(self):
        desired = self.controller.desired_lists()
        if sync_diff(desired, self.acknowledged):
            return False
        for server in set(desired) | set(self.reports):
            want = desired.get(server, {})
            for name, report in self.reports.get(server, {}).items():
                wanted = {v for v, _ in want.get(name, ())}
                states = {row['version']: row['state'] for row in report}
                for version in wanted:
                    if states.get(version) not in (READY, ERROR):
                        return False
                for version, state in states.items():
                    if version not in wanted and state in RESIDENT:
                        return False
            for name in want:
                if name not in self.reports.get(server, {}):
                    return False
        return True

    def run(self, rounds, interval=0.05, sleep=time.sleep):
        '''Syncs until converged or out of rounds; returns rounds used'''
        for i in range(1, rounds + 1):
            self.sync_round()
            if self.converged():
                return i
            sleep(interval)
        return None

    def routing_table(self):
        '''{model: {version: [servers reporting it Ready]}}'''
        table = {}
        for server in sorted(self.reports):
            if not self.healthy(server):
                continue
            for name, report in self.reports[server].items():
                for row in report:
                    if row['state'] == READY:
                        table.setdefault(name, {}).setdefault(
                            row['version'], []).append(server)
        return table
