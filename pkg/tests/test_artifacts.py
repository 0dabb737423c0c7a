import json

import pytest

from services.artifacts import read_csv, write_csv, write_json


def test_csv_text_is_exact(tmp_path):
    path = write_csv(tmp_path / 'out' / 't.csv', ['fold', 'loss'], [[0, 0.1], [1, 1 / 3]], 'abc', 4)
    assert path.read_bytes() == b"# config_hash=abc seed=4\nfold,loss\n0,0.1\n1,0.3333333333333333\n"


def test_csv_reads_back_as_text(tmp_path):
    write_csv(tmp_path / 't.csv', ['region', 'feature', 'value'], [[1, 'energy', 18.0], [2, 'NA', 0.5]], 'h', 0)
    assert read_csv(tmp_path / 't.csv') == [
        {"region": "1", "feature": "energy", "value": "18.0"},
        {"region": "2", "feature": "NA", "value": "0.5"},
    ]


def test_csv_without_rows_keeps_header(tmp_path):
    path = write_csv(tmp_path / 't.csv', ['epoch', 'val_loss'], [], 'h', 1)
    assert path.read_text().splitlines() == ["# config_hash=h seed=1", "epoch,val_loss"]
    assert read_csv(path) == []


def test_json_is_stamped_and_sorted(tmp_path):
    path = write_json(tmp_path / 'r.json', {"b": 1, "a": [0.5]}, 'h', 9)
    text = path.read_text()
    assert json.loads(text) == {"a": [0.5], "b": 1, "config_hash": "h", "seed": 9}
    assert text.index('"a"') < text.index('"b"') < text.index('"config_hash"')


def test_json_refuses_nan(tmp_path):
    with pytest.raises(ValueError):
        write_json(tmp_path / 'r.json', {"loss": float('nan')}, 'h', 0)
