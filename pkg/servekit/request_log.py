import json
import queue
import random
import hashlib
import logging
import threading
from dataclasses import asdict, dataclass
from typing import Optional

import pandas as pd

from servekit.models import decode_batch

logger = logging.getLogger(__name__)

_SENTINEL = object()


@dataclass
class RequestLogRecord:
    timestamp: float
    servable: str
    request_digest: str
    response_status: int
    latency_ns: int
    sampled: bool
    body: Optional[str] = None


class RequestLogger(object):
    '''Line-delimited JSON request log fed through a bounded queue.

    A single writer thread owns the file. When the queue is full the record
    is dropped and counted; logging never fails a request.
    '''

    def __init__(self, path=None, sample_rate=0.0, seed=None,
                 max_pending=10000, metrics=None):
        if not 0.0 <= sample_rate <= 1.0:
            raise ValueError('sample_rate must be in [0, 1]')
        self.path = path
        self.sample_rate = sample_rate
        self.metrics = metrics
        self.records_logged = 0
        self.sampled_count = 0
        self.dropped = 0
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self._queue = queue.Queue(maxsize=max_pending)
        self._thread = threading.Thread(target=self._write_loop, daemon=True,
                                        name='servekit-request-log')
        self._thread.start()

    def should_sample(self):
        if self.sample_rate <= 0.0:
            return False
        with self._rng_lock:
            return self._rng.random() < self.sample_rate

    def log(self, servable, body: bytes, status, latency_ns, timestamp):
        sampled = self.should_sample()
        record = RequestLogRecord(
            timestamp=timestamp, servable=str(servable),
            request_digest=hashlib.sha256(body).hexdigest(),
            response_status=status, latency_ns=latency_ns, sampled=sampled,
            body=body.decode('utf-8', 'replace') if sampled else None)
        try:
            self._queue.put_nowait(record)
        except queue.Full:
            self.dropped += 1
            self._count('request_log_dropped')
            logger.warning('Request log queue full, dropping record')
            return record
        self.records_logged += 1
        self.sampled_count += sampled
        return record

    def _count(self, name):
        if self.metrics is not None:
            self.metrics.increment(name)

    def _write_loop(self):
        fh = None
        try:
            if self.path is not None:
                fh = open(self.path, 'a')
        except OSError:
            logger.exception('Cannot open request log %s', self.path)
        while True:
            record = self._queue.get()
            if record is _SENTINEL:
                break
            if fh is None:
                continue
            try:
                fh.write(json.dumps(asdict(record)) + '\n')
                fh.flush()
            except Exception:
                self._count('request_log_errors')
                logger.exception('Failed to write request log record')
        if fh is not None:
            fh.close()

    def close(self):
        self._queue.put(_SENTINEL)
        self._thread.join()


##############################################################################
#                           Log Analysis
##############################################################################


def read_request_log(path) -> pd.DataFrame:
    # pd.read_json would coerce digests and timestamps; keep values as written
    with open(path, 'r') as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return pd.DataFrame.from_records(
        records, columns=list(RequestLogRecord.__dataclass_fields__))


def summarize_request_log(path) -> pd.DataFrame:
    '''Latency statistics per servable, one row each'''
    frame = read_request_log(path)
    percentiles = [q / 100 for q in range(5, 100, 5)]
    if frame.empty:
        return pd.DataFrame()
    return frame.groupby('servable')['latency_ns'].describe(percentiles)


def _sampled_rows(body):
    obj = json.loads(body)
    if 'instances' in obj:
        for instance in obj['instances']:
            yield {'x{}'.format(i): v for i, v in enumerate(instance)}
    elif 'examples' in obj:
        for example in decode_batch(obj['examples']):
            yield {name: value.values[0]
                   for name, value in example.features.items()
                   if len(value.values) == 1 and
                   isinstance(value.values[0], (int, float))}


def feature_stats(path) -> pd.DataFrame:
    '''Numeric summaries of the features seen in sampled request bodies.

    Compare against training-time statistics to spot serving skew.
    '''
    frame = read_request_log(path)
    rows = []
    for body in frame.loc[frame['sampled'].astype(bool), 'body'] \
            if not frame.empty else []:
        try:
            rows.extend(_sampled_rows(body))
        except (ValueError, TypeError, KeyError):
            logger.warning('Skipping unparseable sampled body')
    if not rows:
        return pd.DataFrame()
    return pd.DataFrame(rows).describe().transpose()
