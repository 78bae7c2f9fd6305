import time
import json
import random
import argparse
import threading

import numpy as np

from servekit.fleet.router import HedgePolicy, Router


def flaky_send(slow_replica, slow_probability, slow_seconds, seed):
    rng = random.Random(seed)
    lock = threading.Lock()

    def send(replica, name, version, verb, body):
        if replica == slow_replica:
            with lock:
                slow = rng.random() < slow_probability
            if slow:
                time.sleep(slow_seconds)
        return {'predictions': [[0.0]]}
    return send


def measure(router, requests):
    samples = []
    for _ in range(requests):
        start = time.perf_counter()
        router.route_infer('model', {'instances': [[0.0]]})
        samples.append(time.perf_counter() - start)
    router.close()
    samples = np.asarray(samples) * 1000
    return {
        'p50_ms': float(np.percentile(samples, 50)),
        'p99_ms': float(np.percentile(samples, 99)),
        'max_ms': float(samples.max()),
        'hedged_fraction': router.budget.fraction,
        'requests_sent': router.requests_sent,
    }


def hedging(requests, hedge_delay_ms, slow_probability, slow_ms, seed=1):
    table = {'model': {1: ['replica-a', 'replica-b']}}
    stats = {}
    for label, enabled in (('hedged', True), ('unhedged', False)):
        send = flaky_send('replica-b', slow_probability, slow_ms / 1000,
                          seed)
        router = Router(send, lambda: table, HedgePolicy(
            hedge_delay_ms=hedge_delay_ms, enabled=enabled))
        stats[label] = measure(router, requests)
        print("[{:<8}] p50 {:0.2f} ms  p99 {:0.2f} ms  hedged {:0.3f}".format(
            label, stats[label]['p50_ms'], stats[label]['p99_ms'],
            stats[label]['hedged_fraction']))
    return stats


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument('--requests', type=int, default=2000)
    parser.add_argument('--hedge-delay-ms', type=float, default=20)
    parser.add_argument('--slow-probability', type=float, default=0.1)
    parser.add_argument('--slow-ms', type=float, default=200)
    parser.add_argument('--outfile', type=str, default='hedging.json')
    args = parser.parse_args()

    stats = hedging(args.requests, args.hedge_delay_ms,
                    args.slow_probability, args.slow_ms)
    with open(args.outfile, 'w') as fh:
        json.dump(stats, fh, indent=4)
