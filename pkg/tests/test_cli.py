import json
import os

import pandas as pd

from lesiontl.cli import main
from lesiontl.config import config_from_dict, default_config_dict
from lesiontl.evaluation import TABLE_COLUMNS


def write_document(tmp_path, document, name='experiment.json'):
    path = tmp_path / name
    path.write_text(json.dumps(document), encoding='utf-8')
    return str(path)


def test_init_writes_starter_config(tmp_path, capsys):
    output = str(tmp_path / 'experiment.json')
    assert main(['init', 'data', '--output', output]) == 0

    with open(output, encoding='utf-8') as f:
        assert json.load(f) == default_config_dict('data')

    assert 'Wrote' in capsys.readouterr().out


def test_init_refuses_to_overwrite(tmp_path):
    output = tmp_path / 'experiment.json'
    output.write_text('{}', encoding='utf-8')

    assert main(['init', 'data', '--output', str(output)]) == 2
    assert output.read_text(encoding='utf-8') == '{}'
    assert main(['init', 'data', '--output', str(output), '--force']) == 0


def test_check_valid_config(tmp_path, capsys, experiment_document):
    path = write_document(tmp_path, experiment_document)
    assert main(['check', '--config', path]) == 0
    assert 'OK (run id %s)' % config_from_dict(experiment_document).run_id in capsys.readouterr().out


def test_check_reports_every_problem(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv('LESIONTL_DATASET_ROOT', raising=False)
    path = write_document(tmp_path, {'training': {'batch_size': 0}})

    assert main(['check', '--config', path]) == 2
    err = capsys.readouterr().err
    assert 'dataset_root: This option is required.' in err
    assert 'training.batch_size' in err
    assert 'environ key: LESIONTL_DATASET_ROOT' in err


def test_check_lists_options(tmp_path, capsys, experiment_document):
    path = write_document(tmp_path, experiment_document)
    assert main(['check', '--config', path, '--options']) == 0

    out = capsys.readouterr().out
    assert '* training.early_stopping.patience:' in out
    assert 'LESIONTL_KFOLD_K' in out


def test_dry_run_trains_nothing(tmp_path, capsys, experiment_document):
    path = write_document(tmp_path, experiment_document)
    assert main(['compare-opt', '--config', path, '--dry-run']) == 0

    out = capsys.readouterr().out
    assert out.count('member ') == 2
    assert not os.path.exists(experiment_document['output_dir'])


def test_run_then_report(tmp_path, capsys, experiment_document):
    path = write_document(tmp_path, experiment_document)
    assert main(['run', '--config', path]) == 0

    report_path = capsys.readouterr().out.strip().splitlines()[-1]
    assert os.path.isfile(report_path)

    table_path = str(tmp_path / 'table.csv')
    assert main(['report', experiment_document['output_dir'], '--output', table_path]) == 0
    assert 'tests.tiny.tiny_backbone' in capsys.readouterr().out
    table = pd.read_csv(table_path, dtype=str)
    assert list(table.columns) == TABLE_COLUMNS
    assert len(table) == 1


def test_seed_override_changes_run_id(tmp_path, capsys, experiment_document):
    path = write_document(tmp_path, experiment_document)
    assert main(['run', '--config', path, '--seed', '11', '--dry-run']) == 0

    expected = config_from_dict(experiment_document, seed=11).run_id
    assert expected.startswith('single-11-')
    assert expected in capsys.readouterr().out


def test_missing_dataset_exit_code(tmp_path, experiment_document):
    path = write_document(tmp_path, experiment_document)
    assert main(['run', '--config', path, '--dataset-root', str(tmp_path / 'nowhere')]) == 3


def test_report_without_reports(tmp_path):
    assert main(['report', str(tmp_path)]) == 1


def test_check_rejects_non_finite_environment_value(tmp_path, capsys, monkeypatch, experiment_document):
    monkeypatch.setenv('LESIONTL_DATASET_BALANCING_RATIO', 'inf')
    experiment_document.pop('dataset', None)
    path = write_document(tmp_path, experiment_document)

    assert main(['check', '--config', path]) == 2
    err = capsys.readouterr().err
    assert 'dataset.balancing_ratio: Could not parse: not a finite number' in err
    assert 'environ key: LESIONTL_DATASET_BALANCING_RATIO' in err


def test_dry_run_rejects_unbuildable_model(tmp_path, capsys, experiment_document):
    experiment_document['model']['freeze'] = {'freeze_first_n': 40}
    path = write_document(tmp_path, experiment_document)

    assert main(['run', '--config', path, '--dry-run']) == 2
    assert 'model.freeze.freeze_first_n' in capsys.readouterr().err
    assert not os.path.exists(experiment_document['output_dir'])
