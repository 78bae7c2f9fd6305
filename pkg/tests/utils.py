import os
import time

from servekit.core import AspiredVersionList, CallableLoader
from servekit.io import write_affine_model, write_lookup_table
from servekit.models import AffineModel, LookupTable


def write_affine_version(base_path, version, W, b, feature_order=None,
                         class_labels=None):
    W = [list(row) for row in W]
    if feature_order is None:
        feature_order = ['x{}'.format(i) for i in range(len(W[0]))]
    model = AffineModel(W=W, b=b, feature_order=feature_order,
                        class_labels=class_labels)
    version_dir = os.path.join(base_path, str(version))
    os.makedirs(version_dir, exist_ok=True)
    write_affine_model(version_dir, model)
    return version_dir


def write_table_version(base_path, version, entries, default=None):
    version_dir = os.path.join(base_path, str(version))
    os.makedirs(version_dir, exist_ok=True)
    write_lookup_table(version_dir, LookupTable(dict(entries), default))
    return version_dir


def sleep_loader(payload, delay=0.0, fail=False, on_unload=None):
    def factory():
        time.sleep(delay)
        if fail:
            raise IOError('cannot load {!r}'.format(payload))
        return payload
    return CallableLoader(factory, on_unload=on_unload)


def loaders(name, versions, delay=0.0, payload=None):
    '''AspiredVersionList of sleep loaders whose payload is the version'''
    return AspiredVersionList(name, tuple(
        (v, sleep_loader(v if payload is None else payload, delay))
        for v in versions))


def wait_for(predicate, timeout=5.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


def states(manager, name):
    return {row['version']: row['state'] for row in manager.status(name)}
