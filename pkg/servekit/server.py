import os
import sys
import json
import time
import logging
import argparse
import threading
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, Optional

import numpy as np
import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from starlette.concurrency import run_in_threadpool

from servekit.batching import BatchingConfig, QueueFull, \
    SharedBatchScheduler, Task, TaskTooLarge, batched_run
from servekit.core import AspiredVersionList, ServableState, parse_version
from servekit.io import read_yaml
from servekit.manager import AspiredVersionsManager, ManagerConfig, NotFound
from servekit.memory_utils import release_memory_to_os
from servekit.metrics import Metrics
from servekit.models import AffineModel, LookupTable, ShapeMismatch, \
    affine_predict, classify, decode_batch, lookup, regress
from servekit.policy import VersionPolicy
from servekit.request_log import RequestLogger
from servekit.sources import CommandSource, FileSystemSource, SourceConfig, \
    SourceEntry, VersionSelection, build_source_chain, make_adapter_chain, \
    read_source_config

logger = logging.getLogger(__name__)

FILESYSTEM = 'filesystem'
COMMAND = 'command'
VERBS = ('predict', 'classify', 'regress', 'lookup')


class ServerNotReady(RuntimeError):
    pass


@dataclass
class ServerConfig:
    port: int = 8500
    model_config: Optional[SourceConfig] = None
    manager: ManagerConfig = field(default_factory=ManagerConfig)
    batching: Optional[BatchingConfig] = None
    batching_per_model: Dict[str, BatchingConfig] = field(
        default_factory=dict)
    source_mode: str = FILESYSTEM
    log_sample_rate: float = 0.0
    log_path: Optional[str] = None
    log_seed: Optional[int] = None
    staging_root: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.port <= 65535:
            raise ValueError('Invalid port {}'.format(self.port))
        if self.source_mode not in (FILESYSTEM, COMMAND):
            raise ValueError('source_mode must be filesystem or command, '
                             'got {!r}'.format(self.source_mode))
        if self.source_mode == FILESYSTEM and self.model_config is None:
            raise ValueError('Filesystem mode needs a model config')
        if not 0.0 <= self.log_sample_rate <= 1.0:
            raise ValueError('log_sample_rate must be in [0, 1]')


def read_batching_config(file_name):
    '''Global BatchingConfig plus per-model overrides from a YAML file'''
    data = read_yaml(file_name)
    overrides = data.pop('per_model', None) or {}
    default = BatchingConfig.from_dict(data)
    per_model = {}
    for name, values in overrides.items():
        merged = dict(data)
        merged.update(values or {})
        per_model[name] = BatchingConfig.from_dict(merged)
    return default, per_model


def http_status(error: Exception) -> int:
    if isinstance(error, NotFound):
        return 404
    elif isinstance(error, (QueueFull, ServerNotReady)):
        return 503
    elif isinstance(error, (ValueError, TaskTooLarge)):
        return 400
    return 500


##############################################################################
#                           Model Server
##############################################################################


class ModelServer(object):
    '''Source -> adapters -> manager -> batching -> request handlers'''

    def __init__(self, config: ServerConfig):
        self.config = config
        if config.manager.allocator_trim_hook is None:
            config.manager.allocator_trim_hook = release_memory_to_os
        self.metrics = Metrics()
        self.manager = AspiredVersionsManager(config.manager)
        self.manager.events.subscribe(self._on_state_event)
        self.request_log = RequestLogger(
            config.log_path, config.log_sample_rate, seed=config.log_seed,
            metrics=self.metrics)

        self.scheduler = None
        self._queue_lock = threading.Lock()
        if config.batching is not None:
            self.scheduler = SharedBatchScheduler(
                self._process_batch, config.batching.num_batch_threads)

        self._command_sources = {}
        if config.source_mode == FILESYSTEM:
            self.source = FileSystemSource(config.model_config)
            self.source.set_aspired_versions_callback(build_source_chain(
                config.model_config, self.manager, config.staging_root))
        else:
            self.source = None

        self.metrics.add_gauge('servables_ready',
                               lambda: len(self.manager.snapshot))
        self.metrics.add_gauge('load_failures',
                               lambda: self.manager.load_failures)
        self.metrics.add_gauge('outstanding_handles',
                               self.manager.outstanding_handles)
        self.metrics.add_gauge('source_path_errors', self._source_errors)

    def _source_errors(self):
        return 0 if self.source is None else self.source.health.error_count

    def start(self, timeout=None):
        if self.source is not None:
            self.source.start()
        self.manager.start(timeout=timeout)
        logger.info('Server ready: %d servables', len(self.manager.snapshot))

    def stop(self):
        if self.source is not None:
            self.source.stop()
        self.manager.stop()
        if self.scheduler is not None:
            self.scheduler.stop()
        self.request_log.close()

    @property
    def ready(self):
        return self.manager.ready.is_set()

    ##########################################################################
    #                       Batching
    ##########################################################################

    def _batching_for(self, name):
        return self.config.batching_per_model.get(name, self.config.batching)

    def _process_batch(self, queue, tasks):
        fn = partial(affine_predict, tasks[0].context)
        return batched_run(fn, tasks, queue.config.allowed_batch_sizes)

    def _on_state_event(self, event):
        if self.scheduler is None or \
                event.from_state != ServableState.UNLOADING:
            return
        if event.id in self.scheduler:
            self.scheduler.remove_queue(event.id)

    def _predict_fn(self, servable_id):
        def predict(model, rows):
            config = self._batching_for(servable_id.name)
            if self.scheduler is None or len(rows) == 0 or \
                    len(rows) > config.max_batch_size:
                return affine_predict(model, rows)
            if servable_id not in self.scheduler:
                with self._queue_lock:
                    if servable_id not in self.scheduler:
                        self.scheduler.register_queue(servable_id, config)
            task = Task(len(rows), rows, context=model)
            return self.scheduler.enqueue(servable_id, task).result()
        return predict

    ##########################################################################
    #                       Inference
    ##########################################################################

    def infer(self, verb, name, version, body):
        '''Runs one request; returns (servable id, response object)'''
        if not self.ready:
            raise ServerNotReady('Server is still loading its servables')
        if verb not in VERBS:
            raise ValueError('Unknown verb {!r}'.format(verb))
        if not isinstance(body, dict):
            raise ValueError('Request body must be a JSON object')

        with self.manager.get_handle(name, version) as handle:
            payload = handle.payload
            if verb == 'lookup':
                return handle.id, _lookup_response(payload, body)
            if not isinstance(payload, AffineModel):
                raise ValueError('Servable {} does not support {}'
                                 .format(handle.id, verb))
            predict = self._predict_fn(handle.id)

            if verb == 'predict':
                if 'instances' not in body:
                    raise ValueError('Body must carry "instances"')
                rows = np.asarray(body['instances'], dtype=np.float64)
                if rows.ndim == 1 and len(rows) == 0:
                    rows = rows.reshape(0, payload.in_dim)
                if rows.ndim != 2:
                    raise ShapeMismatch('instances must be a list of rows')
                if rows.shape[1] != payload.in_dim:
                    raise ShapeMismatch('Expected rows of width {}, got {}'
                                        .format(payload.in_dim, rows.shape[1]))
                return handle.id, {
                    'predictions': predict(payload, rows).tolist()}

            if 'examples' not in body:
                raise ValueError('Body must carry "examples"')
            examples = decode_batch(body['examples'])
            if verb == 'classify':
                results = classify(payload, examples, predict=predict)
                return handle.id, {'results': [
                    [[label, score] for label, score in row]
                    for row in results]}
            return handle.id, {
                'results': regress(payload, examples, predict=predict)}

    def handle_request(self, verb, name, version, raw_body: bytes):
        '''Full request path: parse, infer, log; returns (status, body)'''
        start = time.monotonic_ns()
        servable = None
        try:
            if version is not None and parse_version(str(version)) is None:
                raise ValueError('Invalid version {!r}'.format(version))
            body = json.loads(raw_body or b'{}')
            servable, response = self.infer(
                verb, name, None if version is None else int(version), body)
            status = 200
        except Exception as e:
            status = http_status(e)
            if status == 500:
                logger.exception('Request to %s:%s failed', name, verb)
            response = {'error': str(e)}

        latency = time.monotonic_ns() - start
        self.metrics.increment('requests_total')
        self.metrics.increment('responses_{}'.format(status))
        if status == 200:
            self.metrics.observe_latency(servable, latency)
        self.request_log.log('{}:{}'.format(name, verb) if servable is None
                             else '{}:{}'.format(servable, verb),
                             raw_body or b'', status, latency, time.time())
        return status, response

    def handle_status(self, name):
        return self.manager.status(name)

    ##########################################################################
    #                       Command mode
    ##########################################################################

    def aspire_command(self, body):
        '''Applies an aspired-versions push; returns the servable's status'''
        if self.config.source_mode != COMMAND:
            raise ValueError('Server is not in command mode')
        name = body.get('servable_name')
        adapter = body.get('adapter', 'affine')
        try:
            versions = tuple((int(v['version']), v['path'])
                             for v in body.get('versions', []))
        except (KeyError, TypeError, ValueError):
            raise ValueError('versions must be a list of {version, path}')

        source = self._command_sources.get(adapter)
        if source is None:
            source = CommandSource(make_adapter_chain(
                adapter, self.manager, self.config.staging_root))
            self._command_sources.setdefault(adapter, source)
            source = self._command_sources[adapter]
        source.push(AspiredVersionList(name, versions))
        return self.manager.status(name)


def _lookup_response(table, body):
    if not isinstance(table, LookupTable):
        raise ValueError('Servable is not a lookup table')
    keys = body.get('keys')
    if not isinstance(keys, list) or \
            not all(isinstance(k, str) for k in keys):
        raise ValueError('Body must carry "keys" as a list of strings')
    results = lookup(table, [k.encode('utf-8', 'surrogateescape')
                             for k in keys])
    values = [None if isinstance(r, KeyError) else
              r.decode('utf-8', 'surrogateescape') for r in results]
    missing = [i for i, r in enumerate(results) if isinstance(r, KeyError)]
    return {'values': values, 'missing': missing}


##############################################################################
#                           HTTP surface
##############################################################################


def create_app(server: ModelServer) -> FastAPI:
    app = FastAPI(title='servekit')

    def _json(status, content):
        return JSONResponse(status_code=status, content=content)

    async def _infer(request, name, version, verb):
        raw = await request.body()
        status, content = await run_in_threadpool(
            server.handle_request, verb, name, version, raw)
        return _json(status, content)

    @app.get('/v1/models/{name}')
    def model_status(name: str):
        try:
            return _json(200, server.handle_status(name))
        except NotFound as e:
            return _json(404, {'error': str(e)})

    @app.post('/v1/models/{target}')
    async def infer_latest(target: str, request: Request):
        name, _, verb = target.rpartition(':')
        return await _infer(request, name, None, verb)

    @app.post('/v1/models/{name}/versions/{target}')
    async def infer_version(name: str, target: str, request: Request):
        version, _, verb = target.rpartition(':')
        return await _infer(request, name, version, verb)

    @app.post('/v1/admin/aspire')
    async def admin_aspire(request: Request):
        try:
            body = json.loads(await request.body() or b'{}')
            if not isinstance(body, dict):
                raise ValueError('Body must be a JSON object')
            return _json(200, await run_in_threadpool(
                server.aspire_command, body))
        except Exception as e:
            return _json(http_status(e), {'error': str(e)})

    @app.get('/healthz')
    def healthz():
        if server.ready:
            return _json(200, {'status': 'ok'})
        return _json(503, {'status': 'loading'})

    @app.get('/metrics')
    def metrics():
        return PlainTextResponse(server.metrics.render())

    return app


##############################################################################
#                           Command line
##############################################################################


def build_parser():
    parser = argparse.ArgumentParser(
        prog='servekit-server', description='Serve versioned models over HTTP')
    parser.add_argument('--port', type=int, default=8500)
    parser.add_argument('--model_config_file')
    parser.add_argument('--model_base_path')
    parser.add_argument('--model_name', default='default')
    parser.add_argument('--version_policy', default='availability',
                        choices=[p.value for p in VersionPolicy])
    parser.add_argument('--poll_interval_s', type=float)
    parser.add_argument('--enable_batching', action='store_true')
    parser.add_argument('--batching_config_file')
    parser.add_argument('--source_mode', default=FILESYSTEM,
                        choices=[FILESYSTEM, COMMAND])
    parser.add_argument('--log_sample_rate', type=float, default=0.0)
    parser.add_argument('--log_path')
    parser.add_argument('--log_seed', type=int)
    parser.add_argument('--num_load_threads', type=int, default=2)
    parser.add_argument('--num_initial_load_threads', type=int)
    return parser


def config_from_args(args) -> ServerConfig:
    model_config = None
    if args.model_config_file:
        model_config = read_source_config(args.model_config_file)
    elif args.model_base_path:
        model_config = SourceConfig([SourceEntry(
            args.model_name, args.model_base_path, VersionSelection.latest())])
    if model_config is not None and args.poll_interval_s is not None:
        model_config.poll_interval = args.poll_interval_s

    manager = ManagerConfig(policy=VersionPolicy.parse(args.version_policy),
                            num_load_threads=args.num_load_threads)
    if args.num_initial_load_threads:
        manager.num_initial_load_threads = args.num_initial_load_threads

    batching, per_model = None, {}
    if args.enable_batching:
        if args.batching_config_file:
            batching, per_model = read_batching_config(
                args.batching_config_file)
        else:
            batching = BatchingConfig()

    return ServerConfig(
        port=args.port, model_config=model_config, manager=manager,
        batching=batching, batching_per_model=per_model,
        source_mode=args.source_mode, log_sample_rate=args.log_sample_rate,
        log_path=args.log_path, log_seed=args.log_seed)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
    except (ValueError, OSError) as e:
        print('servekit-server: {}'.format(e), file=sys.stderr)
        return 2

    server = ModelServer(config)
    server.start()
    try:
        uvicorn.run(create_app(server), host=os.getenv('SERVEKIT_HOST',
                                                       '0.0.0.0'),
                    port=config.port, log_level='warning')
    finally:
        server.stop()
    return 0


if __name__ == '__main__':
    sys.exit(main())
