import json
from dataclasses import replace

import numpy as np
import pytest

from htps import experiment
from htps.config import ExperimentConfig
from htps.errors import TrainingDiverged, ValidationError
from htps.experiment import (DataSplits, Normalizer, build_predictor, evaluate, load_records, prepare_splits,
                             run_ablation, run_trials, self_match_rate, train, train_source_model, transfer_benefit,
                             trial_seeds, validation_mse)
from htps.featurize import MatrixSet
from htps.htpsmodel import MlpBaseline, build_model
from htps.nnengine import AdamState, adam_step, save_checkpoint
from htps.records import DatasetSpec, UserSplit, write_csv
from htps.synthgen import carevue_like, generate


def _matrix_set(rng, count, window=2, n_features=2, users=('a',), label=None):
    dense = rng.normal(size=(count, window, n_features))
    sparse = np.where(rng.uniform(size=dense.shape) < 0.3, rng.normal(size=dense.shape), 0.0)
    labels = np.full(count, label) if label is not None else rng.normal(size=count)
    owners = np.array([users[i % len(users)] for i in range(count)], dtype=object)
    return MatrixSet(dense, sparse, sparse != 0, labels, owners)


def _splits(rng, **kwargs):
    return DataSplits(
        _matrix_set(rng, 16, users=('a', 'b'), **kwargs),
        _matrix_set(rng, 6, users=('c',), **kwargs),
        _matrix_set(rng, 6, users=('d',), **kwargs),
        UserSplit(('a', 'b'), ('c',), ('d',)),
    )


def test_trial_seeds(tiny_config):
    assert trial_seeds(tiny_config, 1) == trial_seeds(tiny_config, 1)
    assert trial_seeds(tiny_config, 1) != trial_seeds(tiny_config, 2)

    fixed = tiny_config.replace(reshuffle_splits=False, seed=5)
    assert trial_seeds(fixed, 1)[0] == trial_seeds(fixed, 2)[0] == 5
    assert trial_seeds(fixed, 1)[1] != trial_seeds(fixed, 2)[1]


def test_prepare_splits_partitions_users(tiny_config):
    spec, groups = load_records(tiny_config)

    splits = prepare_splits(tiny_config, spec, groups, 3)

    users = [splits.train.users(), splits.valid.users(), splits.test.users()]
    assert not (users[0] & users[1] or users[0] & users[2] or users[1] & users[2])
    assert users[0] <= set(splits.split.train_users)
    assert spec.n_features == 4 and splits.train.n_features == 4 and splits.train.window == 3


@pytest.mark.parametrize('task, target_name', [
    ('spo2', 'spo2'),
    ('rr', 'respiratory_rate'),
    ('bp', 'arterial_bp_mean'),
])
def test_task_selects_the_target(tiny_config, task, target_name):
    config = tiny_config.replace(task=task)

    spec, groups = load_records(config)
    source_spec, _ = load_records(config, role='source')

    assert spec.target_name == source_spec.target_name == target_name
    assert spec.feature_names == ('heart_rate', 'respiratory_rate', 'nbp_mean', 'arterial_bp_mean')

    train_set = prepare_splits(config, spec, groups, 0).train
    column = spec.feature_names.index(target_name) if target_name in spec.feature_names else None
    if column is not None:
        # a feature predicting itself: its latest reading tracks the label closely
        assert np.corrcoef(train_set.dense[:, -1, column], train_set.labels)[0, 1] > 0.7


def test_prepare_splits_rejects_empty_split(tiny_config):
    config = tiny_config.replace(users=2)
    spec, groups = load_records(config)

    with pytest.raises(ValidationError):
        prepare_splits(config, spec, groups, 0)


def test_load_source_records(tiny_config):
    spec, groups = load_records(tiny_config, role='source')

    assert spec.n_features == 5
    assert all(user.startswith('cv') for user in groups)

    with pytest.raises(ValidationError, match='no source dataset'):
        load_records(tiny_config.replace(preset='carevue-like'), role='source')


def test_load_record_file(tmp_path, tiny_config):
    path = tmp_path.joinpath('records.csv')
    path.write_text('user_id,seq,feature_type,value\na,0,1,5\na,1,0,9\n')

    spec, groups = load_records(tiny_config.replace(preset=None, records=str(path), n_features=2))

    assert spec.n_features == 2 and list(groups) == ['a']


def test_normalizer(rng):
    train_set = _matrix_set(rng, 50, users=('a', 'b'))
    normalizer = Normalizer.fit(train_set)

    scaled = normalizer.transform(train_set)

    np.testing.assert_allclose(scaled.dense.reshape(-1, 2).mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(scaled.dense.reshape(-1, 2).std(axis=0), 1.0, rtol=1e-10)
    assert not scaled.sparse[~train_set.sparse_mask].any()
    np.testing.assert_allclose(normalizer.restore_labels(scaled.labels), train_set.labels, rtol=1e-12)
    assert normalizer.fitted_users == {'a', 'b'}

    restored = Normalizer.from_metadata(normalizer.to_metadata())
    assert np.array_equal(restored.feature_mean, normalizer.feature_mean)
    assert restored.label_std == normalizer.label_std
    assert Normalizer.from_metadata({}) is None


def test_build_predictor_variants(tiny_config):
    spec = DatasetSpec(4, window=3)

    assert isinstance(build_predictor(tiny_config.replace(variant='mlp'), spec, 0), MlpBaseline)
    assert build_predictor(tiny_config.replace(variant='den'), spec, 0).kind == 'den'
    assert build_predictor(tiny_config.replace(variant='dsent'), spec, 0).kind == 'htps'


def test_matched_baseline_is_close_to_dsen(tiny_config):
    spec = DatasetSpec(4, window=3)
    dsen = build_predictor(tiny_config.replace(variant='dsen'), spec, 0).parameter_count()

    matched = build_predictor(tiny_config.replace(variant='mlp'), spec, 0).parameter_count()
    plain = build_predictor(tiny_config.replace(variant='mlp', match_parameters=False), spec, 0).parameter_count()

    assert abs(matched - dsen) <= abs(plain - dsen)
    assert abs(matched - dsen) / dsen <= 0.15


def test_save_best_returns_minimum_validation_epoch(monkeypatch, rng, tiny_config):
    scores = iter([5.0, 3.0, 4.0])
    monkeypatch.setattr(experiment, 'validation_mse', lambda model, data, normalizer=None: next(scores))

    snapshots = {}

    def on_epoch(epoch, model, valid):
        snapshots[epoch] = [p.copy() for p in model.parameters()]

    config = tiny_config.replace(epochs=3, batch_size=4)
    outcome = train(config, _splits(rng, window=3, n_features=4), seed=1, on_epoch=on_epoch)

    assert outcome.valid_curve == [5.0, 3.0, 4.0]
    assert outcome.best_epoch == 2 and outcome.best_valid_mse == 3.0
    assert outcome.checkpoint.metadata['epoch'] == '2'
    for best, snapshot in zip(outcome.model.parameters(), snapshots[2]):
        assert np.array_equal(best, snapshot)
    assert not all(np.array_equal(a, b) for a, b in zip(snapshots[2], snapshots[3]))


def test_training_diverges_on_nan(rng, tiny_config):
    splits = _splits(rng, window=3, n_features=4)
    splits.train.labels[0] = np.nan

    with pytest.raises(TrainingDiverged, match='epoch 1'):
        train(tiny_config, splits, seed=0)


def test_training_needs_validation_data(rng, tiny_config):
    splits = _splits(rng, window=3, n_features=4)
    splits.valid = splits.valid.subset(np.zeros(len(splits.valid), dtype=bool))

    with pytest.raises(ValidationError):
        train(tiny_config, splits, seed=0)


def test_constant_label_is_learned(rng):
    data = _matrix_set(rng, 32, window=2, n_features=2, label=2.0)
    model = build_model('dsen', 2, 2, (4, 8, 3), loss_weight_lambda=0.0, seed=0)
    state = AdamState(learning_rate=0.01)

    for _ in range(500):
        _, grads = model.loss_and_gradients(data.dense, data.sparse, data.labels)
        adam_step(state, model.parameters(), grads)

    assert validation_mse(model, data) < 1e-2


def test_training_is_deterministic(rng, tiny_config):
    splits = _splits(rng, window=3, n_features=4)

    first = train(tiny_config, splits, seed=3)
    second = train(tiny_config, splits, seed=3)

    assert first.checkpoint.to_text() == second.checkpoint.to_text()
    assert first.train_curve == second.train_curve


def test_evaluate_model_and_checkpoint(rng, tiny_config):
    splits = _splits(rng, window=3, n_features=4)
    outcome = train(tiny_config, splits, seed=0)

    direct = evaluate(outcome.model, splits.test)

    assert direct == evaluate(outcome.checkpoint, splits.test)
    assert direct == validation_mse(outcome.model, splits.test)


def test_evaluate_uses_stored_normalization(rng, tiny_config):
    splits = _splits(rng, window=3, n_features=4)
    normalizer = Normalizer.fit(splits.train)
    outcome = train(tiny_config, splits, seed=0, normalizer=normalizer)

    assert evaluate(outcome.checkpoint, splits.test) == evaluate(outcome.model, splits.test, normalizer)


def test_evaluate_errors(rng):
    model = build_model('dsen', 3, 4, (4, 8, 3))

    with pytest.raises(ValidationError, match='empty'):
        evaluate(model, MatrixSet.empty(DatasetSpec(4, window=3)))
    with pytest.raises(ValidationError, match='model expects'):
        evaluate(model, _matrix_set(rng, 3, window=2, n_features=4))


def test_evaluate_rejects_dense_only_input_for_sparse_models(rng):
    data = _matrix_set(rng, 4, window=3, n_features=4)
    blank = np.zeros_like(data.sparse)
    dense_only = MatrixSet(data.dense, blank, blank != 0, data.labels, data.user_ids)

    with pytest.raises(ValidationError, match='needs sparse'):
        evaluate(build_model('dsen', 3, 4, (4, 8, 3)), dense_only)
    assert evaluate(build_model('den', 3, 4, (4, 8, 3)), dense_only) >= 0.0


def test_run_trials_report(tiny_config):
    report = run_trials(tiny_config.replace(trials=2))

    assert [t.trial for t in report.trials] == [1, 2]
    assert report.trials[0].split_hash != report.trials[1].split_hash
    assert report.mean_test_mse is not None and report.n_diverged == 0
    assert len(report.trials[0].valid_curve) == tiny_config.epochs

    document = json.loads(report.to_json())
    assert document['schema'] == 'htps.metrics/1'
    assert document['aggregate']['n_trials'] == 2
    assert document['config']['hidden_widths'] == [4, 8, 3]
    assert 'mean test mse' in report.to_table()


def test_run_trials_is_reproducible(tmp_path, tiny_config):
    first = run_trials(tiny_config, tmp_path.joinpath('a'))
    second = run_trials(tiny_config, tmp_path.joinpath('b'))

    assert first.to_json() == second.to_json()
    assert tmp_path.joinpath('a', 'trial-01.ckpt').read_bytes() == tmp_path.joinpath('b', 'trial-01.ckpt').read_bytes()


def test_diverged_trials_are_excluded(monkeypatch, tiny_config):
    real_train = experiment.train
    calls = []

    def flaky_train(*args, **kwargs):
        calls.append(1)
        if len(calls) == 1:
            raise TrainingDiverged(1, float('nan'))
        return real_train(*args, **kwargs)

    monkeypatch.setattr(experiment, 'train', flaky_train)
    report = run_trials(tiny_config.replace(trials=2))

    assert [t.diverged for t in report.trials] == [True, False]
    assert report.n_diverged == 1
    assert report.mean_test_mse == report.trials[1].test_mse
    assert json.loads(report.to_json())['trials'][0]['test_mse'] is None


def test_transfer_scores_training_users_only(monkeypatch, tmp_path, tiny_config):
    source = train_source_model(tiny_config, tmp_path.joinpath('source.ckpt'))
    seen = []
    real_build_plan = experiment.build_plan

    def spy(source_model, matrices, spec, source_id=''):
        seen.append(matrices.users())
        return real_build_plan(source_model, matrices, spec, source_id)

    monkeypatch.setattr(experiment, 'build_plan', spy)
    config = tiny_config.replace(variant='dsent', source_checkpoint=str(tmp_path.joinpath('source.ckpt')))
    spec, groups = load_records(config)

    report = run_trials(config)

    split_seed, _ = trial_seeds(config, 1)
    split = prepare_splits(config, spec, groups, split_seed).split
    assert seen == [set(seen[0])] and seen[0] <= set(split.train_users)
    assert not seen[0] & (set(split.valid_users) | set(split.test_users))
    assert report.trials[0].transfer_plan.count(':') == 4
    assert source.metadata['role'] == 'source'


def test_normalization_is_fitted_on_training_users_only(monkeypatch, tiny_config):
    seen = []
    real_fit = Normalizer.fit

    def spy(cls, train_data):
        seen.append(train_data.users())
        return real_fit(train_data)

    monkeypatch.setattr(Normalizer, 'fit', classmethod(spy))
    config = tiny_config.replace(normalize=True)
    spec, groups = load_records(config)

    run_trials(config)

    split_seed, _ = trial_seeds(config, 1)
    split = prepare_splits(config, spec, groups, split_seed).split
    assert len(seen) == 1 and seen[0] <= set(split.train_users)
    assert not seen[0] & (set(split.valid_users) | set(split.test_users))


def test_ablation_pair_runs_all_legs(tmp_path, tiny_config):
    report = run_ablation(tiny_config, tmp_path)

    assert [row.variant for row in report.rows] == ['mlp', 'den', 'dsen', 'dsent']
    assert not any(row.skipped for row in report.rows)
    assert tmp_path.joinpath('source.ckpt').is_file()
    assert tmp_path.joinpath('dsent', 'trial-01.ckpt').is_file()

    # every leg saw the same splits
    hashes = {tuple(t.split_hash for t in row.report.trials) for row in report.rows}
    assert len(hashes) == 1

    document = json.loads(report.to_json())
    assert document['schema'] == 'htps.ablation/1'
    assert [row['variant'] for row in document['rows']] == ['mlp', 'den', 'dsen', 'dsent']


def test_ablation_without_source_skips_transfer_leg(tiny_config):
    report = run_ablation(tiny_config.replace(preset='carevue-like'), variants=('den', 'dsent'))

    assert report.row('den').report is not None
    assert report.row('dsent').skipped
    assert 'no source checkpoint' in report.row('dsent').notice
    assert json.loads(report.to_json())['rows'][1]['mean_test_mse'] is None


def test_ablation_uses_given_source(tmp_path, tiny_config):
    checkpoint = build_model('dsen', 3, 5, (4, 8, 3), seed=1).to_checkpoint()
    path = tmp_path.joinpath('given.ckpt')
    save_checkpoint(checkpoint, path)

    report = run_ablation(tiny_config.replace(source_checkpoint=str(path)), variants=('dsent',))

    assert report.row('dsent').report.trials[0].transfer_plan is not None


@pytest.mark.slow
def test_source_features_match_their_own_autoencoders():
    config = ExperimentConfig(preset='pair', epochs=30, hidden_widths=(8, 32, 4))

    assert self_match_rate(carevue_like(n_users=120), config) >= 0.9


@pytest.mark.slow
def test_transfer_lowers_initial_loss():
    config = ExperimentConfig(preset='pair', epochs=30, hidden_widths=(8, 32, 4))

    wins, seeds = transfer_benefit(carevue_like(n_users=120), [1, 3, 5], config)

    assert wins >= 8 and seeds == 10


@pytest.mark.slow
def test_ablation_trend_on_pair():
    report = run_ablation(ExperimentConfig(preset='pair', epochs=100, trials=10))

    assert report.row('dsent').report.mean_test_mse <= report.row('mlp').report.mean_test_mse
    assert report.row('dsen').report.mean_test_mse <= report.row('mlp').report.mean_test_mse


@pytest.mark.slow
def test_noiseless_targets_are_learned_closely(tmp_path):
    generator = replace(carevue_like(n_users=120), target_noise=0.0)
    path = tmp_path.joinpath('records.csv')
    write_csv(path, generate(generator))

    report = run_trials(ExperimentConfig(records=str(path), n_features=5, normalize=True, trials=3))

    assert report.mean_test_mse < 0.05
