from sqlalchemy import create_engine
from sqlalchemy.engine import make_url
from sqlalchemy.orm import declarative_base, sessionmaker

from config import DB_URI

Base = declarative_base()

_engine = None
Session = sessionmaker()


def init_db(uri=None):
    """
    Bind the session factory to the ledger database and create missing tables.

    The engine is built once per URL; switching to another URL disposes the
    previous engine's pool.

    Args:
        uri: SQLAlchemy URL. Defaults to OMNIFUSE_DB; 'none' disables the ledger.

    Returns:
        The engine, or None when the ledger is disabled.
    """
    global _engine
    uri = uri or DB_URI
    if uri.strip().lower() == 'none':
        return None
    if _engine is not None and _engine.url == make_url(uri):
        return _engine
    import models.models  # noqa: F401  (registers tables on Base)
    engine = create_engine(uri)
    try:
        Base.metadata.create_all(engine)
    except Exception:
        engine.dispose()
        raise
    if _engine is not None:
        _engine.dispose()
    _engine = engine
    Session.configure(bind=_engine)
    return _engine
