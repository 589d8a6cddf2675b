'''
Record data model, the record CSV format, user filtering and user-level
train/validation/test splits.

Record CSV: header ``user_id,seq,feature_type,value``, UTF-8, one record per
row. Feature type 0 is the prediction target, 1..N are predictor features.
'''
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from .errors import ValidationError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ['user_id', 'seq', 'feature_type', 'value']

TARGET_FEATURE = 0

UserRecords = Dict[str, List['Record']]


@dataclass(frozen=True)
class Record:
    user_id: str
    seq: int
    feature_type: int
    value: float

    @property
    def is_target(self) -> bool:
        return self.feature_type == TARGET_FEATURE


@dataclass(frozen=True)
class DatasetSpec:
    n_features: int
    feature_names: Tuple[str, ...] = ()
    target_name: str = 'target'
    window: int = 3

    def __post_init__(self):
        if self.n_features < 1:
            raise ValidationError(f'n_features must be >= 1, got {self.n_features}')
        if self.window < 1:
            raise ValidationError(f'window must be >= 1, got {self.window}')

        names = tuple(self.feature_names) or tuple(f'feature_{i}' for i in range(1, self.n_features + 1))
        if len(names) != self.n_features:
            raise ValidationError(f'expected {self.n_features} feature names, got {len(names)}')
        if len(set(names)) != len(names):
            raise ValidationError(f'feature names must be distinct: {", ".join(names)}')
        object.__setattr__(self, 'feature_names', names)

    def with_window(self, window: int) -> 'DatasetSpec':
        return DatasetSpec(self.n_features, self.feature_names, self.target_name, window)


@dataclass(frozen=True)
class UserSplit:
    train_users: Tuple[str, ...]
    valid_users: Tuple[str, ...]
    test_users: Tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        train, valid, test = set(self.train_users), set(self.valid_users), set(self.test_users)
        if train & valid or train & test or valid & test:
            raise ValidationError('user splits overlap')

    def all_users(self) -> Set[str]:
        return set(self.train_users) | set(self.valid_users) | set(self.test_users)

    def digest(self) -> str:
        hasher = hashlib.sha256()
        for name, users in (('train', self.train_users), ('valid', self.valid_users), ('test', self.test_users)):
            hasher.update(name.encode('utf-8'))
            for user in sorted(users):
                hasher.update(b'\0' + user.encode('utf-8'))
        return hasher.hexdigest()[:16]


def group_users(records: Iterable[Record]) -> UserRecords:
    groups: UserRecords = {}
    for record in records:
        groups.setdefault(record.user_id, []).append(record)
    return groups


def ingest_csv(path: Path, spec: DatasetSpec) -> UserRecords:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f'record file {path} does not exist')

    logger.info(f'Processing {path}...')

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        return {}
    except pd.errors.ParserError as ex:
        raise ValidationError(f'{path}: malformed row: {ex}') from ex

    if list(frame.columns) != CSV_COLUMNS:
        raise ValidationError(f'{path}: expected header {",".join(CSV_COLUMNS)}, got {",".join(frame.columns)}')

    # line numbers are 1-based and count the header
    lines = np.arange(len(frame)) + 2

    seqs = pd.to_numeric(frame['seq'], errors='coerce')
    feature_types = pd.to_numeric(frame['feature_type'], errors='coerce')
    values = pd.to_numeric(frame['value'], errors='coerce')

    # report the first offending row of each kind
    checks = [
        (frame['user_id'] == '', 'user_id', 'missing user_id'),
        (seqs.isna() | (seqs % 1 != 0) | (seqs < 0), 'seq', 'seq must be a nonnegative integer'),
        (feature_types.isna() | (feature_types % 1 != 0), 'feature_type', 'feature_type must be an integer'),
        ((feature_types < 0) | (feature_types > spec.n_features), 'feature_type',
         f'feature_type is out of range 0..{spec.n_features}'),
        (values.isna(), 'value', 'value must be numeric'),
    ]

    for mask, column, message in checks:
        bad = np.flatnonzero(mask.to_numpy())
        if len(bad):
            index = bad[0]
            raise ValidationError(f'{path}:{lines[index]}: {message}, got {frame[column].iat[index]!r}')

    groups: UserRecords = {}
    last_seq: Dict[str, Tuple[int, int]] = {}

    # parse the raw text so written values read back bit-identical
    rows = zip(frame['user_id'].tolist(), seqs.tolist(), feature_types.tolist(), frame['value'].tolist())
    for index, (user_id, seq, feature_type, value) in enumerate(rows):
        record = Record(user_id, int(seq), int(feature_type), float(value))

        # file order must already be collection order
        if user_id in last_seq and record.seq <= last_seq[user_id][0]:
            raise ValidationError(f'{path}:{lines[index]}: seq {record.seq} of user {user_id} does not increase '
                                  f'(previous {last_seq[user_id][0]} on line {last_seq[user_id][1]})')
        last_seq[user_id] = (record.seq, lines[index])

        groups.setdefault(user_id, []).append(record)

    logger.debug(f'{path}: {len(frame)} records of {len(groups)} users')
    return groups


def write_csv(path: Path, groups: UserRecords):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    rows = [(r.user_id, r.seq, r.feature_type, r.value) for records in groups.values() for r in records]
    frame = pd.DataFrame(rows, columns=CSV_COLUMNS)

    logger.info(f'Writing {path}...')
    frame.to_csv(path, index=False, lineterminator='\n')


def count_targets(records: Sequence[Record]) -> int:
    return sum(1 for record in records if record.is_target)


def filter_users(groups: UserRecords, min_target_records: int = 5) -> UserRecords:
    if min_target_records < 0:
        raise ValidationError(f'min_target_records must be >= 0, got {min_target_records}')

    return {user: records for user, records in groups.items() if count_targets(records) >= min_target_records}


def split_users(
    user_ids: Sequence[str],
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> UserSplit:
    # ensure pre-conditions
    if len(user_ids) == 0:
        raise ValidationError('cannot split an empty user list')
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValidationError(f'expected three nonnegative split fractions, got {tuple(fractions)}')
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f'split fractions must sum to 1, got {sum(fractions)}')

    order = np.random.default_rng(seed).permutation(len(user_ids))
    shuffled = [user_ids[i] for i in order]

    # floor for train and validation, remainder to test
    n_train = int(np.floor(fractions[0] * len(shuffled) + 1e-9))
    n_valid = int(np.floor(fractions[1] * len(shuffled) + 1e-9))

    return UserSplit(
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train:n_train + n_valid]),
        tuple(shuffled[n_train + n_valid:]),
        seed,
    )
