import json

import pytest

from htps import experiment
from htps.__main__ import main
from htps.errors import TrainingDiverged

TINY = ['--set', 'users=30', '--set', 'epochs=2', '--set', 'trials=1', '--set', 'hidden_widths=4,8,3']


@pytest.fixture
def pair_data(tmp_path):
    assert main(['generate', '--preset', 'pair', '--users', '30', '--out', str(tmp_path.joinpath('data'))]) == 0
    return tmp_path.joinpath('data')


@pytest.fixture
def paired_matrices(tmp_path, pair_data):
    out = tmp_path.joinpath('matrices')
    code = main(['featurize', str(pair_data.joinpath('target.csv')), '--n-features', '4', '--paired', '--out', str(out)])
    assert code == 0
    return out


@pytest.fixture
def source_checkpoint(tmp_path):
    out = tmp_path.joinpath('source')
    assert main(['train', '--preset', 'carevue-like', *TINY, '--out', str(out), '-q']) == 0
    return out.joinpath('trial-01.ckpt')


def test_usage(capsys):
    assert main([]) == 1
    assert main(['deploy']) == 1
    assert 'Usage: htps' in capsys.readouterr().err


def test_unknown_flag_exits_with_one():
    with pytest.raises(SystemExit) as ex:
        main(['train', '--bogus'])

    assert ex.value.code == 1


def test_generate(capsys, pair_data):
    assert pair_data.joinpath('source.csv').is_file()
    assert pair_data.joinpath('target.csv').read_text().startswith('user_id,seq,feature_type,value\n')
    assert 'generated pair' in capsys.readouterr().out


def test_generate_task(tmp_path, capsys):
    out = tmp_path.joinpath('data')

    assert main(['generate', '--preset', 'carevue-like', '--task', 'rr', '--users', '5', '--out', str(out)]) == 0
    assert 'generated carevue-like (rr)' in capsys.readouterr().out
    assert out.joinpath('records.csv').is_file()

    assert main(['generate', '--task', 'hr', '--out', str(out)]) == 1
    assert 'unknown task' in capsys.readouterr().err


@pytest.mark.parametrize('task', ['spo2', 'rr', 'bp'])
def test_train_task(tmp_path, task):
    out = tmp_path.joinpath('run')

    assert main(['train', '--preset', 'pair', '--task', task, '--no-normalize', *TINY, '--out', str(out), '-q']) == 0

    config = json.loads(out.joinpath('report.json').read_text())['config']
    assert config['task'] == task and config['normalize'] is False


def test_featurize_variants(tmp_path, pair_data, capsys):
    out = tmp_path.joinpath('fm')

    code = main(['featurize', str(pair_data.joinpath('target.csv')), '--n-features', '4', '--window', '2',
                 '--variant', 'sparse', '--out', str(out)])

    assert code == 0
    assert out.joinpath('sparse.fm').read_text().startswith('HTPSFM v1 sparse 2 4')
    assert not out.joinpath('dense.fm').exists()
    assert '(W=2, N=4)' in capsys.readouterr().out


def test_featurize_paired(paired_matrices):
    dense = paired_matrices.joinpath('dense.fm').read_text().splitlines()
    sparse = paired_matrices.joinpath('sparse.fm').read_text().splitlines()

    assert len(dense) == len(sparse)
    assert dense[0].startswith('HTPSFM v1 dense 3 4')


def test_featurize_unknown_user(tmp_path, pair_data, capsys):
    code = main(['featurize', str(pair_data.joinpath('target.csv')), '--n-features', '4', '--user', 'nobody',
                 '--out', str(tmp_path.joinpath('fm'))])

    assert code == 1
    assert "ERROR: user 'nobody'" in capsys.readouterr().err


def test_train_and_evaluate(tmp_path, paired_matrices, capsys):
    out = tmp_path.joinpath('run')

    assert main(['train', '--preset', 'pair', *TINY, '--out', str(out)]) == 0
    assert 'variant dsen: mean test mse' in capsys.readouterr().out

    report = json.loads(out.joinpath('report.json').read_text())
    assert report['schema'] == 'htps.metrics/1'
    assert out.joinpath('report.txt').is_file() and out.joinpath('timing.json').is_file()

    code = main(['evaluate', str(out.joinpath('trial-01.ckpt')), '--dense', str(paired_matrices.joinpath('dense.fm')),
                 '--sparse', str(paired_matrices.joinpath('sparse.fm')), '--out', str(out)])
    assert code == 0
    assert 'dsen test mse' in capsys.readouterr().out

    evaluation = json.loads(out.joinpath('evaluation.json').read_text())
    assert evaluation['schema'] == 'htps.evaluation/1' and evaluation['model_kind'] == 'dsen'
    assert evaluation['samples'] > 0


def test_evaluate_needs_sparse_matrices(tmp_path, paired_matrices, capsys):
    out = tmp_path.joinpath('run')
    assert main(['train', '--preset', 'pair', *TINY, '--out', str(out), '-q']) == 0

    code = main(['evaluate', str(out.joinpath('trial-01.ckpt')), '--dense', str(paired_matrices.joinpath('dense.fm'))])

    assert code == 1
    assert 'needs --sparse' in capsys.readouterr().err


def test_transfer_on_preset(tmp_path, source_checkpoint, capsys):
    out = tmp_path.joinpath('transfer')

    code = main(['transfer', '--preset', 'pair', *TINY, '--source-checkpoint', str(source_checkpoint),
                 '--out', str(out)])

    assert code == 0
    assert len(out.joinpath('plan.txt').read_text().splitlines()) == 4
    assert out.joinpath('transferred.ckpt').read_text().startswith('HTPSCKPT 1\nmodel_kind htps\n')
    assert capsys.readouterr().out.startswith('transfer plan 1:')


def test_transfer_on_matrix_file(tmp_path, source_checkpoint, paired_matrices):
    out = tmp_path.joinpath('transfer')

    code = main(['transfer', '--matrices', str(paired_matrices.joinpath('dense.fm')), '--set', 'hidden_widths=4,8,3',
                 '--source-checkpoint', str(source_checkpoint), '--out', str(out)])

    assert code == 0
    assert len(out.joinpath('plan.txt').read_text().splitlines()) == 4


def test_transfer_without_source(tmp_path, capsys):
    code = main(['transfer', '--preset', 'pair', '--out', str(tmp_path)])

    assert code == 1
    assert 'source-checkpoint' in capsys.readouterr().err


def test_ablate_is_reproducible(tmp_path, capsys):
    out = tmp_path.joinpath('ablate')
    argv = ['ablate', '--preset', 'pair', *TINY, '--out', str(out), '-q']

    assert main(argv) == 0
    summary = capsys.readouterr().out
    first = [out.joinpath(name).read_bytes() for name in ('ablation.json', 'ablation.txt', 'dsent/trial-01.ckpt')]

    assert main(argv) == 0
    second = [out.joinpath(name).read_bytes() for name in ('ablation.json', 'ablation.txt', 'dsent/trial-01.ckpt')]

    assert first == second
    assert summary.startswith('mean test mse: mlp ')
    rows = json.loads(first[0])['rows']
    assert [row['variant'] for row in rows] == ['mlp', 'den', 'dsen', 'dsent']


def test_bad_config_key(tmp_path, capsys):
    assert main(['train', '--preset', 'pair', '--set', 'bogus=1', '--out', str(tmp_path)]) == 1
    assert "unknown config key 'bogus'" in capsys.readouterr().err


def test_missing_records_file(tmp_path):
    code = main(['train', '--records', str(tmp_path.joinpath('none.csv')), '--set', 'n_features=2',
                 '--out', str(tmp_path)])

    assert code == 1


def test_config_file(tmp_path, capsys):
    config = tmp_path.joinpath('run.cfg')
    config.write_text('preset = pair\nusers = 30\nepochs = 1\ntrials = 1\nhidden_widths = 4,8,3\nvariant = den\n')

    assert main(['train', '--config', str(config), '--out', str(tmp_path.joinpath('run')), '-q']) == 0
    assert capsys.readouterr().out.startswith('variant den:')


def test_runtime_failure_exits_with_two(monkeypatch, tmp_path, capsys):
    def diverge(*args, **kwargs):
        raise TrainingDiverged(1, float('nan'))

    monkeypatch.setattr(experiment, 'train_source_model', diverge)

    assert main(['ablate', '--preset', 'pair', *TINY, '--out', str(tmp_path), '-q']) == 2
    assert capsys.readouterr().err.startswith('ERROR: ')
