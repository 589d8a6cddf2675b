'''
Sparse and dense feature matrices from one user's ordered records.

Both featurizers replay their buffer algorithm literally: the target branch
is checked before a feature record is buffered, and buffers are never
cleared after an emission. Rows run oldest (row 0) to newest (row W-1).
'''
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ValidationError
from .records import DatasetSpec, Record, UserRecords
from .utils.text import format_float, format_row, read_text, write_text

logger = logging.getLogger(__name__)

MATRIX_MAGIC = 'HTPSFM'
MATRIX_VERSION = 'v1'

VARIANTS = ('sparse', 'dense')


@dataclass
class SparseFeatureMatrix:
    data: np.ndarray
    label: float
    # one populated cell per row; tracks zero-valued measurements too
    mask: Optional[np.ndarray] = None


@dataclass
class DenseFeatureMatrix:
    data: np.ndarray
    label: float


FeatureMatrix = Union[SparseFeatureMatrix, DenseFeatureMatrix]


class FeaturizerState:

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        # SRL holds (feature index, value) pairs, DRL one value queue per feature
        self.sparse_buffer: Deque[Tuple[int, float]] = deque(maxlen=spec.window)
        self.dense_buffers: List[Deque[float]] = [deque(maxlen=spec.window) for _ in range(spec.n_features)]

    def push(self, record: Record):
        self.sparse_buffer.append((record.feature_type - 1, record.value))
        self.dense_buffers[record.feature_type - 1].append(record.value)

    @property
    def sparse_ready(self) -> bool:
        return len(self.sparse_buffer) == self.spec.window

    @property
    def dense_ready(self) -> bool:
        return all(len(buffer) == self.spec.window for buffer in self.dense_buffers)

    def sparse_matrix(self, label: float) -> SparseFeatureMatrix:
        data = np.zeros((self.spec.window, self.spec.n_features))
        mask = np.zeros((self.spec.window, self.spec.n_features), dtype=bool)
        for row, (column, value) in enumerate(self.sparse_buffer):
            data[row, column] = value
            mask[row, column] = True
        return SparseFeatureMatrix(data, label, mask)

    def dense_matrix(self, label: float) -> DenseFeatureMatrix:
        data = np.array([list(buffer) for buffer in self.dense_buffers], dtype=np.float64).T
        return DenseFeatureMatrix(data.reshape(self.spec.window, self.spec.n_features), label)


def sparse_featurize(records: Iterable[Record], spec: DatasetSpec) -> List[SparseFeatureMatrix]:
    state = FeaturizerState(spec)
    matrices = []

    for record in records:
        if record.is_target:
            if state.sparse_ready:
                matrices.append(state.sparse_matrix(record.value))
        else:
            state.push(record)

    return matrices


def dense_featurize(records: Iterable[Record], spec: DatasetSpec) -> List[DenseFeatureMatrix]:
    state = FeaturizerState(spec)
    matrices = []

    for record in records:
        if record.is_target:
            if state.dense_ready:
                matrices.append(state.dense_matrix(record.value))
        else:
            state.push(record)

    return matrices


def featurize_pairs(records: Iterable[Record], spec: DatasetSpec) -> List[Tuple[DenseFeatureMatrix, SparseFeatureMatrix]]:
    state = FeaturizerState(spec)
    pairs = []

    for record in records:
        if record.is_target:
            # a full DRL holds N*W feature records, so SRL is full as well
            if state.dense_ready:
                pairs.append((state.dense_matrix(record.value), state.sparse_matrix(record.value)))
        else:
            state.push(record)

    return pairs


def featurize_oracle(records: Sequence[Record], spec: DatasetSpec, variant: str) -> List[FeatureMatrix]:
    if variant not in VARIANTS:
        raise ValidationError(f'unknown matrix variant {variant!r}')

    records = list(records)
    window, n_features = spec.window, spec.n_features
    matrices: List[FeatureMatrix] = []

    for t, record in enumerate(records):
        if not record.is_target:
            continue

        # rescan everything before this target
        history = [r for r in records[:t] if not r.is_target]

        if variant == 'sparse':
            if len(history) < window:
                continue
            data = np.zeros((window, n_features))
            mask = np.zeros((window, n_features), dtype=bool)
            for row, r in enumerate(history[-window:]):
                data[row, r.feature_type - 1] = r.value
                mask[row, r.feature_type - 1] = True
            matrices.append(SparseFeatureMatrix(data, record.value, mask))

        else:
            columns = [[r.value for r in history if r.feature_type == j + 1] for j in range(n_features)]
            if any(len(column) < window for column in columns):
                continue
            data = np.array([column[-window:] for column in columns], dtype=np.float64).T
            matrices.append(DenseFeatureMatrix(data.reshape(window, n_features), record.value))

    return matrices


@dataclass
class MatrixSet:
    '''Aligned dense/sparse samples of many users, stacked along axis 0.'''

    dense: np.ndarray
    sparse: np.ndarray
    sparse_mask: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def window(self) -> int:
        return self.dense.shape[1]

    @property
    def n_features(self) -> int:
        return self.dense.shape[2]

    def users(self) -> set:
        return set(self.user_ids.tolist())

    def subset(self, indices: np.ndarray) -> 'MatrixSet':
        return MatrixSet(
            self.dense[indices],
            self.sparse[indices],
            self.sparse_mask[indices],
            self.labels[indices],
            self.user_ids[indices],
        )

    def select_users(self, users: Iterable[str]) -> 'MatrixSet':
        wanted = set(users)
        return self.subset(np.array([user in wanted for user in self.user_ids.tolist()], dtype=bool))

    @classmethod
    def empty(cls, spec: DatasetSpec) -> 'MatrixSet':
        shape = (0, spec.window, spec.n_features)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=bool), np.zeros(0),
                   np.array([], dtype=object))


def featurize_users(groups: UserRecords, spec: DatasetSpec, users: Optional[Iterable[str]] = None) -> MatrixSet:
    users = list(groups.keys()) if users is None else list(users)

    dense, sparse, masks, labels, owners = [], [], [], [], []
    for user in users:
        for dense_matrix, sparse_matrix in featurize_pairs(groups[user], spec):
            dense.append(dense_matrix.data)
            sparse.append(sparse_matrix.data)
            masks.append(sparse_matrix.mask)
            labels.append(dense_matrix.label)
            owners.append(user)

    if not labels:
        return MatrixSet.empty(spec)

    return MatrixSet(
        np.stack(dense),
        np.stack(sparse),
        np.stack(masks),
        np.array(labels, dtype=np.float64),
        np.array(owners, dtype=object),
    )


def matrix_set(dense: Sequence[DenseFeatureMatrix], sparse: Sequence[SparseFeatureMatrix] = ()) -> MatrixSet:
    '''Stack matrices read back from files; sparse ones must be aligned with the dense ones.'''
    if not dense:
        raise ValidationError('no dense matrices given')
    if sparse and len(sparse) != len(dense):
        raise ValidationError(f'{len(dense)} dense and {len(sparse)} sparse matrices are not aligned')

    data = np.stack([m.data for m in dense])
    labels = np.array([m.label for m in dense], dtype=np.float64)

    if sparse:
        if any(s.label != d.label for s, d in zip(sparse, dense)):
            raise ValidationError('dense and sparse matrices disagree on labels')
        sparse_data = np.stack([m.data for m in sparse])
        # files drop the occupancy mask, nonzero cells stand in for it
        mask = np.stack([m.mask if m.mask is not None else m.data != 0 for m in sparse])
    else:
        sparse_data = np.zeros_like(data)
        mask = np.zeros(data.shape, dtype=bool)

    return MatrixSet(data, sparse_data, mask, labels, np.array([''] * len(dense), dtype=object))


def write_matrices(path: Path, variant: str, matrices: Sequence[FeatureMatrix], spec: DatasetSpec):
    if variant not in VARIANTS:
        raise ValidationError(f'unknown matrix variant {variant!r}')

    lines = [f'{MATRIX_MAGIC} {MATRIX_VERSION} {variant} {spec.window} {spec.n_features} {len(matrices)}']
    for matrix in matrices:
        if matrix.data.shape != (spec.window, spec.n_features):
            raise ValidationError(f'matrix of shape {matrix.data.shape} does not match '
                                  f'{spec.window}x{spec.n_features}')
        lines.extend(format_row(row) for row in matrix.data)
        lines.append(format_float(matrix.label))

    write_text(path, '\n'.join(lines))


def read_matrices(path: Path) -> Tuple[str, int, int, List[FeatureMatrix]]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f'matrix file {path} does not exist')

    lines = read_text(path).splitlines()
    header = lines[0].split() if lines else []

    if len(header) != 6 or header[0] != MATRIX_MAGIC:
        raise ValidationError(f'{path}: not a feature matrix file')
    if header[1] != MATRIX_VERSION:
        raise ValidationError(f'{path}: unsupported matrix file version {header[1]}')

    variant = header[2]
    if variant not in VARIANTS:
        raise ValidationError(f'{path}: unknown matrix variant {variant!r}')

    try:
        window, n_features, count = int(header[3]), int(header[4]), int(header[5])
    except ValueError as ex:
        raise ValidationError(f'{path}: malformed header {lines[0]!r}') from ex

    if len(lines) - 1 != count * (window + 1):
        raise ValidationError(f'{path}: expected {count} matrices, file is truncated or padded')

    matrices: List[FeatureMatrix] = []
    cursor = 1
    for _ in range(count):
        try:
            rows = [[float(v) for v in lines[cursor + i].split()] for i in range(window)]
            label = float(lines[cursor + window])
        except ValueError as ex:
            raise ValidationError(f'{path}:{cursor + 1}: malformed matrix block') from ex
        if any(len(row) != n_features for row in rows):
            raise ValidationError(f'{path}:{cursor + 1}: expected {n_features} values per row')
        data = np.array(rows, dtype=np.float64).reshape(window, n_features)
        if variant == 'sparse':
            matrices.append(SparseFeatureMatrix(data, label))
        else:
            matrices.append(DenseFeatureMatrix(data, label))
        cursor += window + 1

    return variant, window, n_features, matrices
