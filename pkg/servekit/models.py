import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

FLOAT = 'float'
INT = 'int'
BYTES = 'bytes'

INT64_MIN, INT64_MAX = -2 ** 63, 2 ** 63 - 1


class EmptyBatch(ValueError):
    pass


class MalformedBatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class MissingFeature(ValueError):
    pass


class NotAClassifier(ValueError):
    pass


class NotARegressor(ValueError):
    pass


class KeyNotFound(KeyError):
    pass


##############################################################################
#                           Examples
##############################################################################


class FeatureValue(object):
    '''A homogeneous float, int64 or byte-string list.

    Equality is bitwise: 0.0 and -0.0 differ, NaN equals an identical NaN.
    '''
    __slots__ = ('kind', 'values', '_key')

    def __init__(self, kind, values):
        if kind not in (FLOAT, INT, BYTES):
            raise ValueError('Unknown feature kind {}'.format(kind))
        self.kind = kind
        self.values = tuple(values)
        self._key = None

    @classmethod
    def infer(cls, values):
        values = list(values)
        if any(isinstance(v, bool) for v in values):
            raise ValueError('Boolean feature values are not supported')
        if all(isinstance(v, (bytes, str)) for v in values) and values:
            return cls(BYTES, [v.encode('utf-8', 'surrogateescape')
                               if isinstance(v, str) else v for v in values])
        if all(isinstance(v, int) for v in values) and values:
            if any(v < INT64_MIN or v > INT64_MAX for v in values):
                raise ValueError('Integer feature values must fit in 64 bits')
            return cls(INT, values)
        if all(isinstance(v, (int, float)) for v in values):
            return cls(FLOAT, [float(v) for v in values])
        raise ValueError('Feature values must be homogeneous, got {!r}'
                         .format(values))

    def key(self):
        if self._key is None:
            if self.kind == FLOAT:
                packed = struct.pack('<{}d'.format(len(self.values)),
                                     *self.values)
            elif self.kind == INT:
                packed = struct.pack('<{}q'.format(len(self.values)),
                                     *self.values)
            else:
                packed = b''.join(struct.pack('<q', len(v)) + v
                                  for v in self.values)
            self._key = (self.kind, packed)
        return self._key

    def __eq__(self, other):
        if not isinstance(other, FeatureValue):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def to_json(self):
        if self.kind == BYTES:
            return [v.decode('utf-8', 'surrogateescape') for v in self.values]
        return list(self.values)

    def __repr__(self):
        return 'FeatureValue({}, {!r})'.format(self.kind, list(self.values))


@dataclass
class Example:
    features: Dict[str, FeatureValue] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise MalformedBatch('An example must be a JSON object, got {}'
                                 .format(type(obj).__name__))
        features = {}
        for name, values in obj.items():
            if not isinstance(values, list):
                raise MalformedBatch('Feature {} must be an array'
                                     .format(name))
            features[name] = FeatureValue.infer(values)
        return cls(features)

    def to_json(self):
        return {name: value.to_json() for name, value in self.features.items()}


##############################################################################
#                           Batch Compression
##############################################################################


@dataclass
class CompressedBatch:
    common: Dict[str, FeatureValue]
    per_example: List[Dict[str, FeatureValue]]
    count: int

    def to_json(self):
        return {
            'common': {n: v.to_json() for n, v in self.common.items()},
            'per_example': [{n: v.to_json() for n, v in features.items()}
                            for features in self.per_example],
        }


def compress_batch(examples: Sequence[Example]) -> CompressedBatch:
    if len(examples) == 0:
        raise EmptyBatch('Cannot compress an empty batch')

    first, rest = examples[0].features, examples[1:]
    common = {
        name: value for name, value in first.items()
        if all(other.features.get(name) == value for other in rest)
    }
    per_example = [
        {name: value for name, value in ex.features.items()
         if name not in common}
        for ex in examples
    ]
    return CompressedBatch(common, per_example, len(examples))


def decompress_batch(batch: CompressedBatch) -> List[Example]:
    if batch.count != len(batch.per_example):
        raise MalformedBatch('Batch count {} does not match {} examples'
                             .format(batch.count, len(batch.per_example)))
    examples = []
    for i, features in enumerate(batch.per_example):
        collisions = set(features) & set(batch.common)
        if collisions:
            raise MalformedBatch('Example {} redefines common features {}'
                                 .format(i, sorted(collisions)))
        merged = dict(batch.common)
        merged.update(features)
        examples.append(Example(merged))
    return examples


def _dumps(obj):
    return json.dumps(obj, separators=(',', ':'), sort_keys=True)


def serialize_examples(examples: Sequence[Example]) -> bytes:
    return _dumps([ex.to_json() for ex in examples]).encode('utf-8')


def serialize_batch(batch: CompressedBatch) -> bytes:
    '''Wire bytes for a batch: the compressed rendering unless it is larger'''
    compressed = _dumps(batch.to_json()).encode('utf-8')
    plain = serialize_examples(decompress_batch(batch))
    return compressed if len(compressed) <= len(plain) else plain


def encode_batch(examples: Sequence[Example]):
    return json.loads(serialize_batch(compress_batch(examples)))


def decode_batch(obj) -> List[Example]:
    '''Accepts a plain example list or a {"common", "per_example"} object'''
    if isinstance(obj, list):
        return [Example.from_json(ex) for ex in obj]
    if isinstance(obj, dict) and set(obj) == {'common', 'per_example'}:
        if not isinstance(obj['per_example'], list):
            raise MalformedBatch('per_example must be an array')
        batch = CompressedBatch(
            common=Example.from_json(obj['common']).features,
            per_example=[Example.from_json(ex).features
                         for ex in obj['per_example']],
            count=len(obj['per_example']))
        return decompress_batch(batch)
    raise MalformedBatch('Expected an example list or a compressed batch')


##############################################################################
#                           Affine Model
##############################################################################


@dataclass
class AffineModel:
    W: np.ndarray
    b: np.ndarray
    feature_order: List[str] = field(default_factory=list)
    class_labels: Optional[List[str]] = None

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64, ndmin=1)
        if self.W.ndim != 2:
            raise ShapeMismatch('W must be a matrix, got shape {}'
                                .format(self.W.shape))
        out_dim, in_dim = self.W.shape
        if self.b.shape != (out_dim,):
            raise ShapeMismatch('W is {} but b is {}'
                                .format(self.W.shape, self.b.shape))
        if self.feature_order and len(self.feature_order) != in_dim:
            raise ShapeMismatch('{} feature names for input width {}'
                                .format(len(self.feature_order), in_dim))
        if self.class_labels is not None and \
                len(self.class_labels) != out_dim:
            raise ShapeMismatch('{} class labels for output width {}'
                                .format(len(self.class_labels), out_dim))
        self.W.setflags(write=False)
        self.b.setflags(write=False)

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]


def affine_predict(model: AffineModel, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1 and len(rows) == 0:
        rows = rows.reshape(0, model.in_dim)
    if rows.ndim != 2 or rows.shape[1] != model.in_dim:
        raise ShapeMismatch('Expected rows of width {}, got shape {}'
                            .format(model.in_dim, rows.shape))
    # Elementwise product then a last-axis sum: each output element is
    # reduced in the same order whatever the number of rows.
    products = rows[:, np.newaxis, :] * model.W[np.newaxis, :, :]
    return products.sum(axis=2) + model.b


def _rows_from_examples(model: AffineModel, examples: Sequence[Example]):
    rows = np.empty((len(examples), model.in_dim), dtype=np.float64)
    for i, example in enumerate(examples):
        for j, name in enumerate(model.feature_order):
            value = example.features.get(name)
            if value is None:
                raise MissingFeature('Example {} is missing feature {}'
                                     .format(i, name))
            if value.kind == BYTES or len(value.values) != 1:
                raise ShapeMismatch('Feature {} of example {} must be a '
                                    'single number'.format(name, i))
            rows[i, j] = value.values[0]
    return rows


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def classify(model: AffineModel, examples: Sequence[Example],
             predict=affine_predict):
    if not model.class_labels:
        raise NotAClassifier('Model has no class labels')
    rows = _rows_from_examples(model, examples)
    scores = softmax(predict(model, rows)) if len(rows) else rows
    results = []
    for row in scores:
        pairs = [(label, float(s)) for label, s in
                 zip(model.class_labels, row)]
        pairs.sort(key=lambda p: (-p[1], p[0]))
        results.append(pairs)
    return results


def regress(model: AffineModel, examples: Sequence[Example],
            predict=affine_predict) -> List[float]:
    if model.out_dim != 1:
        raise NotARegressor('Regression needs one output, model has {}'
                            .format(model.out_dim))
    rows = _rows_from_examples(model, examples)
    return [float(v) for v in predict(model, rows)[:, 0]]


##############################################################################
#                           Lookup Table
##############################################################################


@dataclass
class LookupTable:
    entries: Dict[bytes, bytes] = field(default_factory=dict)
    default_value: Optional[bytes] = None


def lookup(table: LookupTable, keys: Sequence[bytes]):
    '''Per-key value, default, or a KeyNotFound instance at that position'''
    results = []
    for key in keys:
        if key in table.entries:
            results.append(table.entries[key])
        elif table.default_value is not None:
            results.append(table.default_value)
        else:
            results.append(KeyNotFound(key))
    return results
