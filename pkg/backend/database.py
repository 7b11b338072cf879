# NOTE: Settlement ledger connection; SQLite by default, any SQLAlchemy URL via PARSEC_DATABASE_URL
import logging
from contextlib import contextmanager

from sqlalchemy import create_engine, text
from sqlalchemy.engine import Engine
from sqlalchemy.orm import sessionmaker

from config import DATABASE_URL, ENVIRONMENT

logger = logging.getLogger(__name__)


def make_engine(url: str) -> Engine:
    options = {"echo": ENVIRONMENT == "development"}  # SQL logging in dev mode
    if url.startswith("sqlite"):
        options["connect_args"] = {"check_same_thread": False}
    else:
        options.update(pool_size=10, max_overflow=20, pool_recycle=300)
    return create_engine(url, **options)


engine = make_engine(DATABASE_URL)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def configure(url: str) -> Engine:
    """Point the module-level engine and session factory at another ledger."""
    global engine
    engine.dispose()
    engine = make_engine(url)
    SessionLocal.configure(bind=engine)
    logger.info(f"Ledger database set to {engine.url.render_as_string(hide_password=True)}")
    return engine


@contextmanager
def get_db_session():
    """Session with commit on success and rollback on error."""
    session = SessionLocal()
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def check_connection() -> bool:
    try:
        with engine.connect() as conn:
            conn.execute(text("SELECT 1"))
        return True
    except Exception as e:
        logger.warning(f"Ledger database unreachable: {e}")
        return False


def create_tables() -> None:
    """Create ledger tables if they don't exist."""
    from models import Base
    try:
        Base.metadata.create_all(bind=engine)
    except Exception as e:
        logger.error(f"Error creating tables: {e}")
        raise
