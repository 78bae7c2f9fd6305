import time
import json
import argparse

from servekit.core import AspiredVersionList, CallableLoader, EventBus
from servekit.manager import AspiredVersionsManager, ManagerConfig


def ready_manager(models):
    manager = AspiredVersionsManager(ManagerConfig(), EventBus())
    for i in range(models):
        name = 'model{}'.format(i)
        manager.set_aspired_versions(AspiredVersionList(name, (
            (1, CallableLoader(lambda: 1)),)))
    manager.run_until_idle()
    return manager


def handle_lookup(iterations, models, target):
    manager = ready_manager(models)
    names = ['model{}'.format(i) for i in range(models)]
    try:
        start = time.perf_counter()
        for i in range(iterations):
            manager.get_handle(names[i % models]).release()
        elapsed = time.perf_counter() - start
    finally:
        manager.stop()

    rate = iterations / elapsed
    print("{} acquisitions in {:0.3f} s: {:,.0f}/s (target {:,.0f}/s)".format(
        iterations, elapsed, rate, target))
    return {
        'iterations': iterations,
        'models': models,
        'seconds': elapsed,
        'acquisitions_per_s': rate,
        'target_per_s': target,
        'meets_target': rate >= target,
    }


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument('--iterations', type=int, default=300000)
    parser.add_argument('--models', type=int, default=10)
    parser.add_argument('--target', type=float, default=1e6)
    parser.add_argument('--outfile', type=str, default='handle_lookup.json')
    args = parser.parse_args()

    stats = handle_lookup(args.iterations, args.models, args.target)
    with open(args.outfile, 'w') as fh:
        json.dump(stats, fh, indent=4)
