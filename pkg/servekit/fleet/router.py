import json
import time
import random
import hashlib
import logging
import itertools
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ROUTER_THREAD_PREFIX = 'servekit-router'


class DeadlineExceeded(TimeoutError):
    pass


class NoReplicaHasVersion(LookupError):
    pass


@dataclass
class HedgePolicy:
    hedge_delay_ms: float = 20
    max_hedged_fraction: float = 0.05
    overall_deadline_ms: float = 1000
    hedge_burst: int = 10
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.max_hedged_fraction <= 1.0:
            raise ValueError('max_hedged_fraction must be in [0, 1]')
        if self.hedge_burst < 0:
            raise ValueError('hedge_burst cannot be negative')
        if not 0 <= self.hedge_delay_ms < self.overall_deadline_ms:
            raise ValueError('hedge_delay_ms must be below '
                             'overall_deadline_ms')


class HedgeBudget(object):
    '''Running cap on the fraction of requests that get a backup.

    `burst` extra hedges are allowed up front, so over n requests at most
    max_fraction * n + burst are hedged.
    '''

    def __init__(self, max_fraction, burst=0):
        self.max_fraction = max_fraction
        self.burst = burst
        self.requests = 0
        self.hedged = 0
        self._lock = threading.Lock()

    def record_request(self):
        with self._lock:
            self.requests += 1

    def try_hedge(self):
        with self._lock:
            if self.hedged + 1 > self.max_fraction * self.requests + \
                    self.burst:
                return False
            self.hedged += 1
            return True

    @property
    def fraction(self):
        with self._lock:
            return self.hedged / self.requests if self.requests else 0.0


##############################################################################
#                           Canary comparison
##############################################################################


def _outputs(response):
    '''Numeric outputs and per-row argmax labels of one response'''
    if 'predictions' in response:
        values = np.asarray(response['predictions'], dtype=np.float64)
        if values.ndim == 2 and values.shape[1] > 1:
            return values, [int(i) for i in values.argmax(axis=1)]
        return values, None
    results = response.get('results', [])
    if results and isinstance(results[0], list):
        rows = [dict((label, score) for label, score in row)
                for row in results]
        labels = sorted(rows[0])
        values = np.asarray([[row[l] for l in labels] for row in rows])
        return values, [row[0][0] for row in results]
    return np.asarray(results, dtype=np.float64), None


def compare_responses(primary, canary):
    '''(max |delta| over outputs, argmax agreement or None)'''
    a, a_top = _outputs(primary)
    b, b_top = _outputs(canary)
    if a.shape != b.shape:
        raise ValueError('Primary output {} and canary output {} differ in '
                         'shape'.format(a.shape, b.shape))
    delta = float(np.abs(a - b).max()) if a.size else 0.0
    agree = None if a_top is None else a_top == b_top
    return delta, agree


class CanaryReport(object):
    def __init__(self):
        self._lock = threading.Lock()
        self.records = []
        self.tee_count = 0

    def count_tee(self):
        with self._lock:
            self.tee_count += 1

    def add(self, digest, delta=None, agree=None, error=None):
        with self._lock:
            self.records.append({'request_digest': digest,
                                 'max_abs_delta': delta,
                                 'argmax_agree': agree, 'error': error})

    def to_frame(self) -> pd.DataFrame:
        with self._lock:
            return pd.DataFrame(self.records, columns=[
                'request_digest', 'max_abs_delta', 'argmax_agree', 'error'])

    def summary(self):
        frame = self.to_frame()
        ok = frame[frame['error'].isna()]
        agree = ok['argmax_agree'].dropna()
        return {
            'tees': self.tee_count,
            'compared': len(ok),
            'errors': len(frame) - len(ok),
            'mean_delta': float(ok['max_abs_delta'].mean()) if len(ok)
            else 0.0,
            'max_delta': float(ok['max_abs_delta'].max()) if len(ok)
            else 0.0,
            'agreement_rate': float(agree.astype(bool).mean()) if len(agree)
            else None,
        }


##############################################################################
#                           Router
##############################################################################


class Router(object):
    '''Forwards inference to replicas with hedged backups and canary tees.

    `send(replica, name, version, verb, body)` performs one request;
    `routing_table()` returns {model: {version: [replicas]}}.
    '''

    def __init__(self, send, routing_table, hedge: HedgePolicy = None,
                 max_workers=64, seed=None):
        self.send = send
        self.routing_table = routing_table
        self.hedge = hedge or HedgePolicy()
        self.budget = HedgeBudget(self.hedge.max_hedged_fraction,
                                  self.hedge.hedge_burst)
        self.requests_sent = 0
        self.canary_report = CanaryReport()
        self._rotation = itertools.count()
        self._sent_lock = threading.Lock()
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=max_workers,
                                        thread_name_prefix=ROUTER_THREAD_PREFIX)
        self._tee_pool = ThreadPoolExecutor(
            max_workers=4, thread_name_prefix=ROUTER_THREAD_PREFIX + '-tee')

    def replicas_for(self, name, version=None):
        versions = self.routing_table().get(name, {})
        if version is None:
            if not versions:
                raise NoReplicaHasVersion('No replica serves {}'.format(name))
            version = max(versions)
        replicas = versions.get(version)
        if not replicas:
            raise NoReplicaHasVersion('No replica serves {} version {}'
                                      .format(name, version))
        return version, list(replicas)

    def _submit(self, replica, name, version, verb, body):
        with self._sent_lock:
            self.requests_sent += 1
        return self._pool.submit(self.send, replica, name, version, verb,
                                 body)

    def route_infer(self, name, body, version=None, verb='predict',
                    hedge=True):
        version, replicas = self.replicas_for(name, version)
        deadline = time.monotonic() + self.hedge.overall_deadline_ms / 1000
        if hedge:
            # only hedge-eligible traffic sets the budget
            self.budget.record_request()

        start = next(self._rotation) % len(replicas)
        order = replicas[start:] + replicas[:start]
        pending = {self._submit(order.pop(0), name, version, verb, body)}
        hedged = not (hedge and self.hedge.enabled) or not order
        error = None

        while pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            timeout = remaining if hedged else min(
                remaining, self.hedge.hedge_delay_ms / 1000)
            done, pending = wait(pending, timeout=timeout,
                                 return_when=FIRST_COMPLETED)
            for future in done:
                if future.exception() is None:
                    return future.result()
                error = future.exception()
                logger.warning('Replica request for %s failed: %s',
                               name, error)
            if done and order and not pending:
                # failover, not counted against the hedge budget
                pending = {self._submit(order.pop(0), name, version, verb,
                                        body)}
            elif not done and not hedged:
                hedged = True
                if order and self.budget.try_hedge():
                    pending.add(self._submit(order.pop(0), name, version,
                                             verb, body))
        if error is not None and not pending:
            raise error
        raise DeadlineExceeded('{} did not answer within {} ms'.format(
            name, self.hedge.overall_deadline_ms))

    def should_tee(self, fraction):
        if fraction <= 0:
            return False
        with self._rng_lock:
            return self._rng.random() < fraction

    def canary_tee(self, name, body, response, canary, verb='predict'):
        '''Maybe mirrors a request to the canary version, off the caller's
        path; returns the future of the comparison or None'''
        if not self.should_tee(canary.tee_fraction):
            return None
        self.canary_report.count_tee()
        digest = hashlib.sha256(json.dumps(
            body, sort_keys=True).encode('utf-8')).hexdigest()

        def compare():
            try:
                mirrored = self.route_infer(name, body, canary.canary_version,
                                            verb, hedge=False)
                delta, agree = compare_responses(response, mirrored)
            except Exception as e:
                self.canary_report.add(digest, error=str(e))
                return
            self.canary_report.add(digest, delta, agree)

        return self._tee_pool.submit(compare)

    def route_with_canary(self, name, body, canary=None, verb='predict'):
        '''Serves from the incumbent version and tees a sample to the canary'''
        version = None
        if canary is not None:
            versions = [v for v in self.routing_table().get(name, {})
                        if v != canary.canary_version]
            version = max(versions) if versions else None
        response = self.route_infer(name, body, version, verb)
        if canary is not None:
            self.canary_tee(name, body, response, canary, verb)
        return response

    def close(self):
        self._tee_pool.shutdown(wait=True)
        self._pool.shutdown(wait=False)
