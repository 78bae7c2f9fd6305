import random
import threading
import time
import unittest

import numpy as np

from servekit.fleet.controller import CanaryConfig
from servekit.fleet.router import CanaryReport, DeadlineExceeded, \
    HedgeBudget, HedgePolicy, NoReplicaHasVersion, Router, \
    compare_responses
from servekit.fleet.synchronizer import ReplicaError


def static_table(table):
    return lambda: table


class Replicas(object):
    '''send() stand-in: per-replica delay functions and call counts'''

    def __init__(self, delays, fail=()):
        self.delays = delays
        self.fail = set(fail)
        self.calls = []
        self._lock = threading.Lock()

    def __call__(self, replica, name, version, verb, body):
        with self._lock:
            self.calls.append(replica)
        delay = self.delays.get(replica, lambda: 0.0)()
        if delay:
            time.sleep(delay)
        if replica in self.fail:
            raise ReplicaError(503, '{} is overloaded'.format(replica))
        return {'replica': replica, 'version': version}


def router_for(replicas, table=None, **hedge):
    table = table or {'m': {1: ['a', 'b']}}
    router = Router(replicas, static_table(table), HedgePolicy(**hedge),
                    seed=7)
    return router


class TestHedgeBudget(unittest.TestCase):

    def test_running_fraction(self):
        budget = HedgeBudget(0.05)
        for _ in range(19):
            budget.record_request()
        self.assertFalse(budget.try_hedge())
        budget.record_request()
        self.assertTrue(budget.try_hedge())
        self.assertFalse(budget.try_hedge())
        self.assertEqual(budget.fraction, 1 / 20)

    def test_burst(self):
        budget = HedgeBudget(0.0, burst=2)
        budget.record_request()
        self.assertTrue(budget.try_hedge())
        self.assertTrue(budget.try_hedge())
        self.assertFalse(budget.try_hedge())

    def test_policy_validation(self):
        with self.assertRaises(ValueError):
            HedgePolicy(max_hedged_fraction=2)
        with self.assertRaises(ValueError):
            HedgePolicy(hedge_delay_ms=50, overall_deadline_ms=10)


class TestRouteInfer(unittest.TestCase):

    def test_stalled_primary_is_hedged(self):
        replicas = Replicas({'a': lambda: 0.5, 'b': lambda: 0.002})
        router = router_for(replicas)
        self.addCleanup(router.close)
        start = time.monotonic()
        response = router.route_infer('m', {})
        elapsed = time.monotonic() - start
        self.assertEqual(response['replica'], 'b')
        self.assertGreaterEqual(elapsed, 0.02)
        self.assertLess(elapsed, 0.1)
        self.assertEqual(router.requests_sent, 2)
        self.assertEqual(router.budget.hedged, 1)

    def test_hedging_disabled(self):
        replicas = Replicas({'a': lambda: 0.1})
        router = router_for(replicas, enabled=False)
        self.addCleanup(router.close)
        self.assertEqual(router.route_infer('m', {})['replica'], 'a')
        self.assertEqual(replicas.calls, ['a'])

    def test_failover_is_not_a_hedge(self):
        replicas = Replicas({}, fail={'a'})
        router = router_for(replicas)
        self.addCleanup(router.close)
        self.assertEqual(router.route_infer('m', {})['replica'], 'b')
        self.assertEqual(router.budget.hedged, 0)
        self.assertEqual(replicas.calls, ['a', 'b'])

    def test_all_replicas_fail(self):
        router = router_for(Replicas({}, fail={'a', 'b'}))
        self.addCleanup(router.close)
        with self.assertRaises(ReplicaError):
            router.route_infer('m', {})

    def test_deadline(self):
        router = router_for(Replicas({'a': lambda: 0.3, 'b': lambda: 0.3}),
                            hedge_delay_ms=10, overall_deadline_ms=50)
        self.addCleanup(router.close)
        start = time.monotonic()
        with self.assertRaises(DeadlineExceeded):
            router.route_infer('m', {})
        self.assertLess(time.monotonic() - start, 0.2)

    def test_version_resolution(self):
        table = {'m': {1: ['a'], 2: ['b']}}
        router = router_for(Replicas({}), table)
        self.addCleanup(router.close)
        self.assertEqual(router.route_infer('m', {})['replica'], 'b')
        self.assertEqual(router.route_infer('m', {}, version=1)['replica'],
                         'a')
        with self.assertRaises(NoReplicaHasVersion):
            router.route_infer('m', {}, version=3)
        with self.assertRaises(NoReplicaHasVersion):
            router.route_infer('other', {})

    def test_rotation_spreads_primaries(self):
        replicas = Replicas({})
        router = router_for(replicas)
        self.addCleanup(router.close)
        for _ in range(10):
            router.route_infer('m', {})
        self.assertEqual(replicas.calls.count('a'), 5)
        self.assertEqual(replicas.calls.count('b'), 5)


class TestTailLatency(unittest.TestCase):
    '''Replica b is delayed 200 ms with probability 0.1'''

    def flaky(self, seed):
        rng = random.Random(seed)
        lock = threading.Lock()

        def delay():
            with lock:
                return 0.2 if rng.random() < 0.1 else 0.0
        return Replicas({'b': delay})

    def latencies(self, router, n):
        samples = []
        for _ in range(n):
            start = time.monotonic()
            router.route_infer('m', {})
            samples.append(time.monotonic() - start)
        return samples

    def test_hedging_cuts_p99(self):
        router = router_for(self.flaky(1), hedge_delay_ms=20)
        self.addCleanup(router.close)
        hedged = self.latencies(router, 2000)
        self.assertLessEqual(np.percentile(hedged, 99), 0.030)
        self.assertLessEqual(router.budget.fraction, 0.06)

        plain = router_for(self.flaky(2), enabled=False)
        self.addCleanup(plain.close)
        self.assertGreaterEqual(np.percentile(self.latencies(plain, 300), 99),
                                0.2)


class TestCanary(unittest.TestCase):

    def test_compare_responses(self):
        self.assertEqual(compare_responses({'predictions': [[1.0], [2.0]]},
                                           {'predictions': [[1.5], [2.0]]}),
                         (0.5, None))
        delta, agree = compare_responses(
            {'predictions': [[0.1, 0.9]]}, {'predictions': [[0.8, 0.2]]})
        self.assertAlmostEqual(delta, 0.7)
        self.assertFalse(agree)
        delta, agree = compare_responses(
            {'results': [[['dog', 0.7], ['cat', 0.3]]]},
            {'results': [[['dog', 0.6], ['cat', 0.4]]]})
        self.assertAlmostEqual(delta, 0.1)
        self.assertTrue(agree)
        with self.assertRaises(ValueError):
            compare_responses({'predictions': [[1.0]]},
                              {'predictions': [[1.0], [2.0]]})

    def test_tee_sample_and_delta(self):
        W = np.array([[1.0, 2.0]])
        biases = {1: 0.5, 2: 0.6}

        def send(replica, name, version, verb, body):
            rows = np.asarray(body['instances'])
            return {'predictions': ((rows * W).sum(axis=1, keepdims=True) +
                                    biases[version]).tolist()}

        table = {'m': {1: ['a', 'b'], 2: ['a', 'b']}}
        router = Router(send, static_table(table), seed=2024)
        canary = CanaryConfig(canary_version=2, tee_fraction=0.1)
        rng = np.random.RandomState(0)
        for _ in range(10000):
            body = {'instances': rng.uniform(-1, 1, size=(1, 2)).tolist()}
            response = router.route_with_canary('m', body, canary)
            self.assertEqual(len(response['predictions']), 1)
        router.close()

        # mirrored requests do not widen the hedge budget
        self.assertEqual(router.budget.requests, 10000)

        report = router.canary_report
        self.assertGreaterEqual(report.tee_count, 910)
        self.assertLessEqual(report.tee_count, 1090)
        frame = report.to_frame()
        self.assertEqual(len(frame), report.tee_count)
        self.assertTrue(frame['error'].isna().all())
        self.assertLess(float((frame['max_abs_delta'] - 0.1).abs().max()),
                        1e-9)
        summary = report.summary()
        self.assertEqual(summary['compared'], report.tee_count)
        self.assertIsNone(summary['agreement_rate'])

    def test_no_canary_means_no_tee(self):
        router = router_for(Replicas({}))
        self.addCleanup(router.close)
        router.route_with_canary('m', {})
        self.assertIsNone(router.canary_tee(
            'm', {}, {}, CanaryConfig(1, 0.0)))
        self.assertEqual(router.canary_report.tee_count, 0)

    def test_report_records_errors(self):
        report = CanaryReport()
        report.add('d1', error='boom')
        report.add('d2', 0.25, True)
        summary = report.summary()
        self.assertEqual(summary['errors'], 1)
        self.assertEqual(summary['max_delta'], 0.25)
        self.assertEqual(summary['agreement_rate'], 1.0)


if __name__ == "__main__":
    unittest.main()
