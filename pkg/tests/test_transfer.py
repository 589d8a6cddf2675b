from typing import Sequence

import numpy as np
import pytest

from htps.errors import ValidationError
from htps.featurize import DenseFeatureMatrix, MatrixSet
from htps.htpsmodel import HtpsModel, build_model
from htps.records import DatasetSpec
from htps.transfer import (TransferMatch, TransferPlan, apply_plan, build_plan, describe_plan, read_plan,
                           score_feature, write_plan)

HIDDEN = (4, 3)


def constant_source(constants: Sequence[float], window: int = 2, seed: int = 0) -> HtpsModel:
    '''Source whose autoencoder j reconstructs the constant vector constants[j] whatever its input.'''
    model = build_model('dsen', window, len(constants), HIDDEN, seed=seed)
    for autoencoder, constant in zip(model.autoencoders, constants):
        last = autoencoder.decoder.layers[-1]
        last.weights[...] = 0.0
        last.bias[...] = constant
    return model


def columns_near(values: Sequence[float], rng, count: int = 20, window: int = 2, noise: float = 0.01) -> np.ndarray:
    '''Dense training matrices whose column j scatters around values[j].'''
    data = np.array(values)[np.newaxis, np.newaxis, :] + noise * rng.standard_normal((count, window, len(values)))
    return data


def test_score_exact_reconstruction_is_zero():
    source = constant_source([1.0, 4.0, -2.0])

    scores = score_feature(source, np.full((5, 2), 4.0))

    assert scores[1] == 0.0
    assert scores.tolist() == [3.0, 0.0, 6.0]


def test_score_single_column():
    source = constant_source([1.0, 4.0])

    assert score_feature(source, np.array([2.0, 2.0])).tolist() == [1.0, 2.0]


def test_score_ties_for_identical_autoencoders():
    source = constant_source([3.0, 3.0])

    scores = score_feature(source, np.array([[1.0, 2.0], [5.0, 0.5]]))

    assert scores[0] == scores[1]


def test_score_window_mismatch():
    with pytest.raises(ValidationError, match='equal window sizes'):
        score_feature(constant_source([1.0]), np.zeros((3, 5)))


def test_plan_picks_lowest_mae(rng):
    source = constant_source([0.0, 10.0, 20.0])
    spec = DatasetSpec(2, window=2)

    plan = build_plan(source, columns_near([20.0, 0.0], rng), spec, 'abc')

    assert plan.mapping() == [3, 1]
    assert [m.target_feature for m in plan.matches] == [1, 2]
    assert plan.source_checkpoint_id == 'abc'
    assert plan.scores.shape == (2, 3)
    assert plan.verify()


def test_plan_ties_take_lowest_index(rng):
    source = constant_source([5.0, 5.0, 5.0])

    plan = build_plan(source, columns_near([5.0], rng, window=2), DatasetSpec(1, window=2))

    assert plan.mapping() == [1]


def test_plan_many_to_one(rng):
    source = constant_source([0.0, 10.0])

    plan = build_plan(source, columns_near([9.0, 9.5, 0.2], rng), DatasetSpec(3, window=2))

    assert plan.mapping() == [2, 2, 1]


def test_plan_single_target_feature(rng):
    plan = build_plan(constant_source([0.0, 1.0]), columns_near([1.0], rng), DatasetSpec(1, window=2))

    assert len(plan.matches) == 1


def test_plan_accepts_matrix_lists(rng):
    data = columns_near([10.0, 0.0], rng, count=3)
    matrices = [DenseFeatureMatrix(m, 0.0) for m in data]

    plan = build_plan(constant_source([0.0, 10.0]), matrices, DatasetSpec(2, window=2))

    assert plan.mapping() == [2, 1]


def test_plan_score_is_argmin_certificate(rng):
    source = build_model('dsen', 2, 4, HIDDEN, seed=5)

    plan = build_plan(source, rng.normal(size=(30, 2, 3)), DatasetSpec(3, window=2))

    for match, row in zip(plan.matches, plan.scores):
        assert match.mae_score == row.min() == row[match.source_autoencoder - 1]
    assert plan.verify()


def test_plan_is_deterministic(rng):
    source = build_model('dsen', 2, 4, HIDDEN, seed=5)
    data = rng.normal(size=(30, 2, 3))

    first = build_plan(source, data, DatasetSpec(3, window=2))
    second = build_plan(source, data, DatasetSpec(3, window=2))

    assert first.matches == second.matches


def test_plan_records_fitted_users(rng):
    data = columns_near([1.0], rng, count=4)
    matrices = MatrixSet(data, np.zeros_like(data), np.zeros(data.shape, dtype=bool), np.zeros(4),
                         np.array(['a', 'a', 'b', 'c'], dtype=object))

    plan = build_plan(constant_source([1.0]), matrices, DatasetSpec(1, window=2))

    assert plan.fitted_users == {'a', 'b', 'c'}


def test_plan_errors(rng):
    source = constant_source([1.0, 2.0])

    with pytest.raises(ValidationError, match='empty training set'):
        build_plan(source, [], DatasetSpec(1, window=2))
    with pytest.raises(ValidationError, match='features'):
        build_plan(source, columns_near([1.0, 2.0], rng), DatasetSpec(3, window=2))
    with pytest.raises(ValidationError, match='window'):
        build_plan(source, columns_near([1.0], rng, window=3), DatasetSpec(1, window=3))


def test_apply_copies_matched_autoencoders(rng):
    source = constant_source([0.0, 10.0, 20.0], seed=1)
    target = build_model('dsent', 2, 2, HIDDEN, seed=2)
    plan = build_plan(source, columns_near([20.0, 0.0], rng), DatasetSpec(2, window=2))

    transferred = apply_plan(plan, source, target)

    for j, m in enumerate(plan.mapping()):
        for p, q in zip(transferred.autoencoders[j].parameters(), source.autoencoders[m - 1].parameters()):
            assert np.array_equal(p, q)
            assert p is not q
    # the rest stays freshly initialised
    for p, q in zip(transferred.prediction.parameters(), target.prediction.parameters()):
        assert np.array_equal(p, q)
    for p, q in zip(transferred.sparse_embed.parameters(), target.sparse_embed.parameters()):
        assert np.array_equal(p, q)
    assert transferred.kind == 'htps'


def test_apply_leaves_source_and_target_untouched(rng):
    source = constant_source([0.0, 10.0], seed=1)
    target = build_model('dsen', 2, 2, HIDDEN, seed=2)
    before_source = [p.copy() for p in source.parameters()]
    before_target = [p.copy() for p in target.parameters()]
    plan = TransferPlan([TransferMatch(1, 2, 0.0), TransferMatch(2, 1, 0.0)])

    transferred = apply_plan(plan, source, target)
    for p in transferred.parameters():
        p += 1.0

    assert all(np.array_equal(p, q) for p, q in zip(source.parameters(), before_source))
    assert all(np.array_equal(p, q) for p, q in zip(target.parameters(), before_target))


def test_apply_all_to_first():
    source = constant_source([0.0, 10.0], seed=1)
    target = build_model('dsen', 2, 3, HIDDEN, seed=2)
    plan = TransferPlan([TransferMatch(j, 1, 0.0) for j in (1, 2, 3)])

    transferred = apply_plan(plan, source, target)

    for autoencoder in transferred.autoencoders[1:]:
        for p, q in zip(autoencoder.parameters(), transferred.autoencoders[0].parameters()):
            assert np.array_equal(p, q)


def test_apply_errors():
    source = constant_source([0.0, 10.0])

    with pytest.raises(ValidationError, match='window'):
        apply_plan(TransferPlan([TransferMatch(1, 1, 0.0)]), source, build_model('dsen', 3, 1, HIDDEN))
    with pytest.raises(ValidationError, match='outside'):
        apply_plan(TransferPlan([TransferMatch(1, 3, 0.0)]), source, build_model('dsen', 2, 1, HIDDEN))
    with pytest.raises(ValidationError, match='shapes differ'):
        apply_plan(TransferPlan([TransferMatch(1, 1, 0.0)]), source, build_model('dsen', 2, 1, (5, 3)))
    with pytest.raises(ValidationError, match='matches'):
        apply_plan(TransferPlan([TransferMatch(1, 1, 0.0)]), source, build_model('dsen', 2, 2, HIDDEN))


def test_plan_file(tmp_path):
    plan = TransferPlan([TransferMatch(1, 3, 0.125), TransferMatch(2, 1, 1 / 3)])
    path = tmp_path.joinpath('plan.txt')

    write_plan(path, plan)

    assert path.read_text().splitlines() == ['1 3 0.125', f'2 1 {1 / 3!r}']
    assert read_plan(path).matches == plan.matches
    assert describe_plan(plan) == '1:3,2:1'


@pytest.mark.parametrize('text', ['1 2\n', '1 2 x\n', '1 1 0.5\n1 2 0.5\n', '2 1 0.5\n'])
def test_read_plan_errors(tmp_path, text):
    path = tmp_path.joinpath('plan.txt')
    path.write_text(text)

    with pytest.raises(ValidationError):
        read_plan(path)
