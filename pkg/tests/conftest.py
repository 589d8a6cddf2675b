from typing import List, Sequence, Tuple

import numpy as np
import pytest

from htps.config import ExperimentConfig
from htps.records import DatasetSpec, Record


def _records(pairs: Sequence[Tuple[int, float]], user: str = 'u') -> List[Record]:
    return [Record(user, seq, feature_type, float(value)) for seq, (feature_type, value) in enumerate(pairs)]


@pytest.fixture
def make_records():
    '''Records from (feature_type, value) pairs, seq in list order.'''
    return _records


@pytest.fixture
def spec_2x2():
    return DatasetSpec(2, window=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    # small enough that a full trial runs in about a second
    return ExperimentConfig(
        preset='pair',
        users=30,
        epochs=2,
        trials=1,
        batch_size=64,
        hidden_widths=(4, 8, 3),
    )


@pytest.fixture
def csv_file(tmp_path):

    def write(rows: Sequence[str], header: str = 'user_id,seq,feature_type,value'):
        path = tmp_path.joinpath('records.csv')
        path.write_text('\n'.join([header, *rows]) + '\n', encoding='utf-8')
        return path

    return write
