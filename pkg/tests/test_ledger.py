import database
from services import ledger_service


def cv_report():
    agg = {name: {"mean": 0.5, "sd": 0.1, "summary": "50.00 ± 10.00"} for name in ("accuracy", "recall", "f1")}
    fold = {"fold": 0, "accuracy": 0.5, "recall": 0.4, "f1": 0.3, "best_epoch": 2, "stopped_epoch": 4,
            "selected_features": {"Genes": ["GENE0003", "GENE0001"]}}
    return {"config_hash": "h", "seed": 1, "aggregate": agg, "per_fold": [fold],
            "masked_eval": {"Genes,Meta": {"aggregate": agg}}}


def test_disabled_ledger():
    assert ledger_service.record_run("cv", cv_report(), uri='none') is None
    assert ledger_service.recent_runs(uri='none') == []


def test_round_trip(tmp_path):
    uri = f"sqlite:///{tmp_path / 'l.db'}"
    first = ledger_service.record_run("cv", cv_report(), 'data', 'out', uri=uri)
    second = ledger_service.record_run("eval", {"config_hash": "h", "seed": 1, "accuracy": 0.7}, uri=uri)
    assert second > first
    rows = ledger_service.recent_runs(uri=uri)
    assert [r["command"] for r in rows] == ["eval", "cv"]
    assert rows[0]["accuracy"] == 0.7 and rows[0]["folds"] == []
    assert rows[1]["folds"][0]["stopped_epoch"] == 4
    assert rows[1]["extra"] == {"Genes,Meta": "50.00 ± 10.00"}


def test_unreachable_database_is_swallowed(tmp_path):
    uri = f"sqlite:///{tmp_path / 'missing' / 'dir' / 'l.db'}"
    assert ledger_service.record_run("cv", cv_report(), uri=uri) is None


def test_engine_is_reused_per_url(tmp_path, monkeypatch):
    first = database.init_db(f"sqlite:///{tmp_path / 'a.db'}")
    assert database.init_db(f"sqlite:///{tmp_path / 'a.db'}") is first

    disposed = []
    monkeypatch.setattr(first, 'dispose', lambda: disposed.append(True))
    second = database.init_db(f"sqlite:///{tmp_path / 'b.db'}")
    assert second is not first and disposed == [True]
    assert ledger_service.record_run("eval", {"config_hash": "h", "seed": 1}, uri=f"sqlite:///{tmp_path / 'b.db'}")
