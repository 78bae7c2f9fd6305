import os
import json
import shutil
import tarfile
import logging
import tempfile

import yaml

from servekit.models import AffineModel, LookupTable

logger = logging.getLogger(__name__)

AFFINE_FILE = 'model.json'
TABLE_FILE = 'table.tsv'
ARCHIVE_FILE = 'model.tar.gz'
DEFAULT_MARKER = b'#default'


##############################################################################
#                           Affine Model Files
##############################################################################


def read_affine_model(version_dir) -> AffineModel:
    with open(os.path.join(version_dir, AFFINE_FILE), 'r') as fh:
        spec = json.load(fh)

    if not isinstance(spec, dict) or spec.get('type') != 'affine':
        raise ValueError('{} is not an affine model file'
                         .format(os.path.join(version_dir, AFFINE_FILE)))
    for key in ('feature_order', 'W', 'b'):
        if key not in spec:
            raise ValueError('Affine model file is missing "{}"'.format(key))

    return AffineModel(W=spec['W'], b=spec['b'],
                       feature_order=list(spec['feature_order']),
                       class_labels=spec.get('class_labels'))


def write_affine_model(version_dir, model: AffineModel):
    spec = {
        'type': 'affine',
        'feature_order': list(model.feature_order),
        'W': model.W.tolist(),
        'b': model.b.tolist(),
    }
    if model.class_labels is not None:
        spec['class_labels'] = list(model.class_labels)
    _atomic_write(os.path.join(version_dir, AFFINE_FILE),
                  json.dumps(spec).encode('utf-8'))


##############################################################################
#                           Lookup Table Files
##############################################################################


def read_lookup_table(version_dir) -> LookupTable:
    table = LookupTable()
    with open(os.path.join(version_dir, TABLE_FILE), 'rb') as fh:
        for i, line in enumerate(fh):
            line = line.rstrip(b'\r\n')
            if not line:
                continue
            key, sep, value = line.partition(b'\t')
            if not sep:
                raise ValueError('Line {} of {} has no tab separator'
                                 .format(i + 1, TABLE_FILE))
            if i == 0 and key == DEFAULT_MARKER:
                table.default_value = value
            else:
                table.entries[key] = value
    return table


def write_lookup_table(version_dir, table: LookupTable):
    lines = []
    if table.default_value is not None:
        lines.append(DEFAULT_MARKER + b'\t' + table.default_value)
    for key, value in table.entries.items():
        if b'\t' in key or b'\n' in key or b'\n' in value:
            raise ValueError('Keys and values cannot contain tabs/newlines')
        lines.append(key + b'\t' + value)
    _atomic_write(os.path.join(version_dir, TABLE_FILE),
                  b'\n'.join(lines) + (b'\n' if lines else b''))


##############################################################################
#                           Archives
##############################################################################


def unpack_archive(archive_path, dest_dir):
    '''Unpacks into dest_dir once; a finished unpack is reused'''
    done_marker = os.path.join(dest_dir, '.unpacked')
    if os.path.exists(done_marker):
        return dest_dir

    os.makedirs(os.path.dirname(dest_dir) or '.', exist_ok=True)
    staging = tempfile.mkdtemp(prefix='.unpack_',
                               dir=os.path.dirname(dest_dir) or '.')
    try:
        with tarfile.open(archive_path, 'r:gz') as tar:
            for member in tar.getmembers():
                target = os.path.realpath(os.path.join(staging, member.name))
                if not target.startswith(os.path.realpath(staging) + os.sep):
                    raise ValueError('Unsafe path {} in {}'
                                     .format(member.name, archive_path))
            tar.extractall(staging)
        open(os.path.join(staging, '.unpacked'), 'w').close()
        if os.path.exists(dest_dir):
            shutil.rmtree(dest_dir)
        os.rename(staging, dest_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return dest_dir


def write_archive(version_dir, source_dir):
    '''Packs the files of source_dir into version_dir/model.tar.gz'''
    os.makedirs(version_dir, exist_ok=True)
    with tarfile.open(os.path.join(version_dir, ARCHIVE_FILE), 'w:gz') as tar:
        for name in sorted(os.listdir(source_dir)):
            tar.add(os.path.join(source_dir, name), arcname=name)


##############################################################################
#                           Config Files
##############################################################################


def read_yaml(file_name):
    with open(file_name, 'r') as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError('{} must contain a mapping at the top level'
                         .format(file_name))
    return data


def _atomic_write(file_name, data: bytes):
    directory = os.path.dirname(file_name) or '.'
    os.makedirs(directory, exist_ok=True)
    fd, temp = tempfile.mkstemp(prefix='.tmp_', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as fh:
            fh.write(data)
        os.replace(temp, file_name)
    except BaseException:
        os.remove(temp)
        raise
