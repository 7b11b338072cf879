# NOTE: Settlement ledger bootstrap: connectivity check and table creation
import logging
import sys

from sqlalchemy import inspect

import database
from config import configure_logging

logger = logging.getLogger(__name__)

LEDGER_TABLES = ("scenario_runs", "settlements", "checkpoints")


def setup_database() -> bool:
    """Verify the ledger connection and create tables if they don't exist."""
    if not database.check_connection():
        logger.error(f"Cannot connect to {database.engine.url.render_as_string(hide_password=True)}")
        return False
    try:
        database.create_tables()
    except Exception as e:
        logger.error(f"Ledger setup failed: {e}")
        return False
    logger.info(f"Ledger ready with tables: {', '.join(LEDGER_TABLES)}")
    return True


def check_tables() -> bool:
    try:
        existing = set(inspect(database.engine).get_table_names())
    except Exception:
        return False
    return all(table in existing for table in LEDGER_TABLES)


if __name__ == "__main__":
    configure_logging("INFO")
    if setup_database():
        print("Ledger ready.")
    else:
        print("Please fix ledger database issues before running with --ledger", file=sys.stderr)
        sys.exit(1)
