import time
import json
import argparse
import threading

import numpy as np

from servekit.core import AspiredVersionList, CallableLoader
from servekit.manager import AspiredVersionsManager, ManagerConfig, NotFound


def aspire(manager, version, load_delay):
    def factory():
        time.sleep(load_delay)
        return np.full(1024, version)
    manager.set_aspired_versions(AspiredVersionList(
        'model', ((version, CallableLoader(factory)),)))


def hot_swap(readers, swaps, policy, load_delay=0.005, swap_interval=0.02):
    '''Reader threads acquire handles in a loop while versions swap'''
    manager = AspiredVersionsManager(ManagerConfig(
        policy=policy, manage_interval_ms=5))
    aspire(manager, 1, 0.0)
    manager.start(timeout=10)

    stop = threading.Event()
    counts = [0] * readers
    misses = [0] * readers
    latencies = [[] for _ in range(readers)]

    def read(i):
        while not stop.is_set():
            start = time.perf_counter()
            try:
                with manager.get_handle('model'):
                    pass
            except NotFound:
                misses[i] += 1
                continue
            latencies[i].append(time.perf_counter() - start)
            counts[i] += 1

    threads = [threading.Thread(target=read, args=(i,), daemon=True)
               for i in range(readers)]
    start = time.time()
    for t in threads:
        t.start()
    for version in range(2, swaps + 2):
        aspire(manager, version, load_delay)
        time.sleep(swap_interval)
    stop.set()
    for t in threads:
        t.join()
    elapsed = time.time() - start
    manager.stop()

    samples = np.concatenate([np.asarray(l) for l in latencies])
    return {
        'policy': manager.config.policy.value,
        'readers': readers,
        'swaps': swaps,
        'seconds': elapsed,
        'acquisitions': int(sum(counts)),
        'acquisitions_per_second': sum(counts) / elapsed,
        'not_found': int(sum(misses)),
        'p50_us': float(np.percentile(samples, 50) * 1e6),
        'p99_us': float(np.percentile(samples, 99) * 1e6),
        'load_failures': manager.load_failures,
    }


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument('--readers', type=int, default=64)
    parser.add_argument('--swaps', type=int, default=50)
    parser.add_argument('--policy', type=str,
                        default='availability',
                        choices=['availability', 'resource'])
    parser.add_argument('--outfile', type=str, default='hot_swap.json')
    args = parser.parse_args()

    stats = hot_swap(args.readers, args.swaps, args.policy)
    print("{} acquisitions/s, {} not found, p99 {:0.1f} us".format(
        int(stats['acquisitions_per_second']), stats['not_found'],
        stats['p99_us']))
    with open(args.outfile, 'w') as fh:
        json.dump(stats, fh, indent=4)
