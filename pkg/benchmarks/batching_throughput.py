import time
import json
import argparse

import numpy as np

from servekit.batching import BatchingConfig, SharedBatchScheduler, Task, \
    batched_run
from servekit.models import AffineModel, affine_predict


def batching_throughput(tasks, batch_sizes, fixed_ms=1.0, per_row_ms=0.01,
                        threads=1, seed=3):
    '''Synthetic servable costing fixed_ms plus per_row_ms per row'''
    rng = np.random.RandomState(seed)
    model = AffineModel(W=rng.normal(size=(2, 3)), b=rng.normal(size=2))
    rows = rng.normal(size=(tasks, 3))
    oracle = np.concatenate([affine_predict(model, row[np.newaxis])
                             for row in rows])

    def process(queue, batch):
        def run(inputs):
            time.sleep((fixed_ms + per_row_ms * len(inputs)) / 1000)
            return affine_predict(model, inputs)
        return batched_run(run, batch)

    stats = []
    for size in batch_sizes:
        scheduler = SharedBatchScheduler(process, num_batch_threads=threads)
        scheduler.register_queue('model', BatchingConfig(
            max_batch_size=size, batch_timeout_micros=10 ** 6,
            max_enqueued_batches=tasks))
        start = time.time()
        futures = [scheduler.enqueue('model', Task(1, rows[i:i + 1]))
                   for i in range(tasks)]
        results = np.concatenate([f.result() for f in futures])
        elapsed = time.time() - start
        scheduler.stop()
        stats.append({
            'max_batch_size': size,
            'seconds': elapsed,
            'requests_per_second': tasks / elapsed,
            'batches': scheduler.batches_executed,
            'bitwise_equal': results.tobytes() == oracle.tobytes(),
        })
        print("max_batch_size={:<4d} {:10.1f} req/s  equal={}".format(
            size, tasks / elapsed, stats[-1]['bitwise_equal']))
    return stats


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument('--tasks', type=int, default=1024)
    parser.add_argument('--batch-sizes', type=int, nargs='+',
                        default=[1, 8, 32, 128])
    parser.add_argument('--threads', type=int, default=1)
    parser.add_argument('--outfile', type=str, default='batching.json')
    args = parser.parse_args()

    stats = batching_throughput(args.tasks, args.batch_sizes,
                                threads=args.threads)
    with open(args.outfile, 'w') as fh:
        json.dump(stats, fh, indent=4)
