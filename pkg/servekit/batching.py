import time
import bisect
import logging
import threading
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

BATCH_THREAD_PREFIX = 'servekit-batch'


class QueueFull(RuntimeError):
    pass


class TaskTooLarge(ValueError):
    pass


class DuplicateKey(KeyError):
    pass


class UnknownKey(KeyError):
    pass


@dataclass
class BatchingConfig:
    max_batch_size: int = 32
    batch_timeout_micros: int = 1000
    max_enqueued_batches: int = 64
    allowed_batch_sizes: Optional[List[int]] = None
    num_batch_threads: int = 4

    def __post_init__(self):
        for name in ('max_batch_size', 'max_enqueued_batches',
                     'num_batch_threads'):
            if int(getattr(self, name)) < 1:
                raise ValueError('{} must be positive'.format(name))
        if self.batch_timeout_micros < 0:
            raise ValueError('batch_timeout_micros cannot be negative')
        if self.allowed_batch_sizes is not None:
            sizes = [int(s) for s in self.allowed_batch_sizes]
            if not sizes or sizes[0] < 1 or \
                    any(a >= b for a, b in zip(sizes, sizes[1:])):
                raise ValueError('allowed_batch_sizes must be strictly '
                                 'ascending positive sizes')
            if sizes[-1] != self.max_batch_size:
                raise ValueError('allowed_batch_sizes must end at '
                                 'max_batch_size ({})'
                                 .format(self.max_batch_size))
            self.allowed_batch_sizes = sizes

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError('Unknown batching options: {}'
                             .format(', '.join(sorted(unknown))))
        return cls(**d)


@dataclass(eq=False)
class Task:
    size: int
    payload: Any
    context: Any = None
    enqueue_time: int = 0
    future: Future = field(default_factory=Future)

    def __post_init__(self):
        if self.size < 1:
            raise ValueError('Task size must be at least 1')


##############################################################################
#                           Batch Queues
##############################################################################


class BatchQueue(object):
    '''Open batch plus a FIFO of closed batches for one servable version'''

    def __init__(self, key, config: BatchingConfig, clock=time.monotonic_ns):
        self.key = key
        self.config = config
        self._clock = clock
        self._lock = threading.Lock()
        self._open = []
        self._open_size = 0
        self._open_since = None
        self._closed = deque()
        self.in_flight = 0

    def enqueue(self, task: Task):
        limit = self.config.max_batch_size
        if task.size > limit:
            raise TaskTooLarge('Task of size {} exceeds max_batch_size {}'
                               .format(task.size, limit))
        with self._lock:
            overflow = self._open_size + task.size > limit
            new_size = task.size if overflow else self._open_size + task.size
            closes = int(overflow) + int(new_size == limit)
            if len(self._closed) + closes > self.config.max_enqueued_batches:
                raise QueueFull('Queue {} has {} batches waiting'
                                .format(self.key, len(self._closed)))

            if overflow:
                self._close()
            task.enqueue_time = self._clock()
            if not self._open:
                self._open_since = task.enqueue_time
            self._open.append(task)
            self._open_size += task.size
            if self._open_size == limit:
                self._close()
        return task.future

    def _close(self):
        if self._open:
            self._closed.append(self._open)
        self._open, self._open_size, self._open_since = [], 0, None

    def close_expired(self, now=None):
        with self._lock:
            if self._open_since is None:
                return False
            now = self._clock() if now is None else now
            waited = now - self._open_since
            if waited >= self.config.batch_timeout_micros * 1000:
                self._close()
                return True
        return False

    def flush(self):
        with self._lock:
            self._close()

    def next_deadline(self):
        since = self._open_since
        if since is None:
            return None
        return since + self.config.batch_timeout_micros * 1000

    def pop_batch(self):
        with self._lock:
            return self._closed.popleft() if self._closed else None

    def drain(self):
        '''Takes every task not yet handed to a worker'''
        with self._lock:
            tasks = [task for batch in self._closed for task in batch]
            tasks.extend(self._open)
            self._closed.clear()
            self._open, self._open_size, self._open_since = [], 0, None
        return tasks

    @property
    def has_closed(self):
        return bool(self._closed)

    @property
    def num_closed(self):
        return len(self._closed)

    @property
    def is_empty(self):
        return not self._closed and not self._open


def round_robin_next(nonempty, last_index):
    '''First index after last_index, cyclically, whose queue has work'''
    n = len(nonempty)
    for step in range(1, n + 1):
        i = (last_index + step) % n
        if nonempty[i]:
            return i
    return None


def pad_to_allowed(batch_size, allowed):
    i = bisect.bisect_left(allowed, batch_size)
    if i == len(allowed):
        raise ValueError('Batch of {} exceeds the largest allowed size {}'
                         .format(batch_size, allowed[-1]))
    return allowed[i]


def batched_run(fn: Callable, tasks: List[Task], allowed_batch_sizes=None):
    '''Runs fn once over the concatenated task rows and splits the output.

    Padding rows are zeros and their outputs are dropped.
    '''
    inputs = []
    for task in tasks:
        rows = np.asarray(task.payload)
        if len(rows) != task.size:
            raise ValueError('Task declares {} rows but carries {}'
                             .format(task.size, len(rows)))
        inputs.append(rows)
    rows = np.concatenate(inputs, axis=0)

    total = len(rows)
    if allowed_batch_sizes:
        padded = pad_to_allowed(total, allowed_batch_sizes)
        if padded > total:
            padding = np.zeros((padded - total,) + rows.shape[1:],
                               dtype=rows.dtype)
            rows = np.concatenate([rows, padding], axis=0)

    outputs = fn(rows)
    results, offset = [], 0
    for task in tasks:
        results.append(outputs[offset:offset + task.size])
        offset += task.size
    return results


##############################################################################
#                           Shared Scheduler
##############################################################################


class SharedBatchScheduler(object):
    '''Dispatches closed batches from many queues onto one worker pool.

    `process_batch(queue, tasks)` returns one result per task. With
    num_batch_threads=0 nothing runs until `run_once()` is called, which
    together with an injected clock gives deterministic schedules.
    '''

    def __init__(self, process_batch, num_batch_threads=4,
                 clock=time.monotonic_ns):
        self._process_batch = process_batch
        self._clock = clock
        self._cond = threading.Condition()
        self._queues = {}
        self._order = []
        self._last = -1
        self._stopped = False
        self.batches_executed = 0
        self._workers = [
            threading.Thread(target=self._work, daemon=True,
                             name='{}-{}'.format(BATCH_THREAD_PREFIX, i))
            for i in range(num_batch_threads)
        ]
        for worker in self._workers:
            worker.start()

    def register_queue(self, key, config: BatchingConfig) -> BatchQueue:
        with self._cond:
            if key in self._queues:
                raise DuplicateKey(key)
            queue = BatchQueue(key, config, self._clock)
            self._queues[key] = queue
            self._order.append(key)
        logger.debug('Registered batch queue %s', key)
        return queue

    def get_queue(self, key):
        queue = self._queues.get(key)
        if queue is None:
            raise UnknownKey(key)
        return queue

    def __contains__(self, key):
        return key in self._queues

    def enqueue(self, key, task: Task) -> Future:
        future = self.get_queue(key).enqueue(task)
        with self._cond:
            self._cond.notify()
        return future

    def remove_queue(self, key, timeout=None):
        '''Closes the open batch and waits until every batch has executed.

        Tasks still queued when `timeout` runs out fail with UnknownKey.
        '''
        with self._cond:
            queue = self._queues.get(key)
            if queue is None:
                raise UnknownKey(key)
            queue.flush()
            self._cond.notify_all()

        if not self._workers:
            while queue.has_closed:
                self.run_once(only=queue)

        with self._cond:
            done = self._cond.wait_for(
                lambda: queue.is_empty and not queue.in_flight, timeout)
            abandoned = [] if done else queue.drain()
            index = self._order.index(key)
            del self._order[index]
            del self._queues[key]
            if index <= self._last:
                self._last -= 1
        if not done:
            logger.warning('Removed batch queue %s before it drained, '
                           'failing %d queued tasks', key, len(abandoned))
            for task in abandoned:
                task.future.set_exception(UnknownKey(key))
        logger.debug('Removed batch queue %s', key)

    def _next_batch(self, only=None):
        now = self._clock()
        queues = [self._queues[key] for key in self._order]
        for queue in queues:
            queue.close_expired(now)
        nonempty = [q.has_closed and (only is None or q is only)
                    for q in queues]
        index = round_robin_next(nonempty, self._last)
        if index is None:
            return None
        self._last = index
        queue = queues[index]
        queue.in_flight += 1
        return queue, queue.pop_batch()

    def _wait_time(self):
        deadlines = [q.next_deadline() for q in self._queues.values()]
        deadlines = [d for d in deadlines if d is not None]
        if not deadlines:
            return None
        return max(0, min(deadlines) - self._clock()) / 1e9

    def _execute(self, queue, batch):
        try:
            results = self._process_batch(queue, batch)
            if len(results) != len(batch):
                raise RuntimeError('Batch of {} tasks produced {} results'
                                   .format(len(batch), len(results)))
        except Exception as e:
            for task in batch:
                task.future.set_exception(e)
        else:
            for task, result in zip(batch, results):
                task.future.set_result(result)
        with self._cond:
            queue.in_flight -= 1
            self.batches_executed += 1
            self._cond.notify_all()

    def _work(self):
        while True:
            with self._cond:
                item = None
                while not self._stopped:
                    item = self._next_batch()
                    if item is not None:
                        break
                    self._cond.wait(self._wait_time())
                if item is None:
                    return
            self._execute(*item)

    def run_once(self, only=None):
        '''Executes at most one batch on the calling thread'''
        with self._cond:
            item = self._next_batch(only)
        if item is None:
            return False
        self._execute(*item)
        return True

    def stop(self):
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
        for worker in self._workers:
            worker.join()
