import threading
from collections import defaultdict

from servekit.memory_utils import _free_memory, _process_rss


class Metrics(object):
    '''Thread-safe counters rendered as `name=value` lines.

    Latencies are kept per servable version as a count and a nanosecond sum;
    gauges are callables sampled at render time.
    '''

    def __init__(self):
        self._lock = threading.Lock()
        self._counters = defaultdict(int)
        self._latency = defaultdict(lambda: [0, 0])
        self._gauges = {
            'process_rss_bytes': _process_rss,
            'free_memory_bytes': _free_memory,
        }

    def increment(self, name, n=1):
        with self._lock:
            self._counters[name] += n

    def get(self, name):
        with self._lock:
            return self._counters.get(name, 0)

    def add_gauge(self, name, fn):
        self._gauges[name] = fn

    def observe_latency(self, servable_id, latency_ns):
        key = '{}_v{}'.format(servable_id.name, servable_id.version)
        with self._lock:
            entry = self._latency[key]
            entry[0] += 1
            entry[1] += latency_ns

    def snapshot(self):
        with self._lock:
            values = dict(self._counters)
            for key, (count, total) in self._latency.items():
                values['latency_count:' + key] = count
                values['latency_ns_sum:' + key] = total
        for name, fn in self._gauges.items():
            try:
                values[name] = fn()
            except Exception:
                values[name] = -1
        return values

    def render(self):
        return ''.join('{}={}\n'.format(name, value)
                       for name, value in sorted(self.snapshot().items()))
