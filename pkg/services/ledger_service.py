"""
Run ledger: one RunRecord per cv / train / eval / ablate invocation.

Best-effort by contract. Any database failure is logged and swallowed so the
ledger never changes artifacts or exit codes.
"""
import json

from sqlalchemy.exc import SQLAlchemyError

import database
from models.models import FoldResult, RunRecord, SelectedFeature
from services.run_log import get_logger

log = get_logger('LEDGER')


def _session(uri):
    if database.init_db(uri) is None:
        return None
    return database.Session()


def record_run(command, report, data_dir=None, out_dir=None, uri=None):
    """
    Append a run built from a report dict (cv, train, eval or ablate shape).

    Returns:
        The new RunRecord id, or None when the ledger is disabled or unavailable.
    """
    try:
        session = _session(uri)
        if session is None:
            return None
        agg = report.get("aggregate", {})
        scores = {name: (agg[name]["mean"] if name in agg else report.get(name))
                  for name in ("accuracy", "recall", "f1")}
        run = RunRecord(
            command=command,
            config_hash=report.get("config_hash", ""),
            seed=report.get("seed"),
            data_dir=str(data_dir) if data_dir else None,
            out_dir=str(out_dir) if out_dir else None,
            accuracy=scores["accuracy"],
            recall=scores["recall"],
            f1=scores["f1"],
            accuracy_sd=agg.get("accuracy", {}).get("sd"),
            extra=json.dumps({k: v.get("aggregate", {}).get("accuracy", {}).get("summary")
                              for k, v in report.get("masked_eval", {}).items()}, sort_keys=True),
        )
        for row in report.get("per_fold", []):
            run.folds.append(FoldResult(fold=row["fold"], accuracy=row["accuracy"], recall=row["recall"],
                                        f1=row["f1"], best_epoch=row.get("best_epoch"),
                                        stopped_epoch=row.get("stopped_epoch")))
            for modality, names in row.get("selected_features", {}).items():
                for rank, name in enumerate(names):
                    run.features.append(SelectedFeature(fold=row["fold"], modality=modality, name=name, rank=rank))
        for modality, names in report.get("selected_features", {}).items():
            for rank, name in enumerate(names):
                run.features.append(SelectedFeature(fold=None, modality=modality, name=name, rank=rank))
        with session:
            session.add(run)
            session.commit()
            log.info(f"Recorded {command} run #{run.id}")
            return run.id
    except SQLAlchemyError as e:
        log.warning(f"Could not write run ledger: {e}")
        return None


def recent_runs(limit=20, uri=None):
    """Most recent ledger rows as dicts, newest first."""
    try:
        session = _session(uri)
        if session is None:
            return []
        with session:
            rows = session.query(RunRecord).order_by(RunRecord.id.desc()).limit(limit).all()
            return [r.to_dict() for r in rows]
    except SQLAlchemyError as e:
        log.warning(f"Could not read run ledger: {e}")
        return []
