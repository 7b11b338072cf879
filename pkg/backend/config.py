# NOTE: Environment-driven settings for the Parsec channel simulator
import logging
import os
import sys

# Settlement ledger (SQLite by default, any SQLAlchemy URL works)
DATABASE_URL = os.getenv("PARSEC_DATABASE_URL", "sqlite:///parsec_ledger.db")

ENVIRONMENT = os.getenv("PARSEC_ENVIRONMENT", "production")
LOG_LEVEL = os.getenv("PARSEC_LOG_LEVEL", "WARNING")

# Escrow challenge window in logical ticks
DEFAULT_CHALLENGE_PERIOD = int(os.getenv("PARSEC_CHALLENGE_PERIOD", "100"))

# Partition count of the transaction topic
DEFAULT_PARTITIONS = int(os.getenv("PARSEC_PARTITIONS", "4"))

TRANSACTION_TOPIC = "transactions"
CONTROL_TOPIC = "control"

_configured = False


def configure_logging(level: str = LOG_LEVEL) -> None:
    """Route all diagnostics to stderr; stdout is reserved for reports."""
    global _configured
    if _configured:
        logging.getLogger().setLevel(level.upper())
        return
    logging.basicConfig(
        level=level.upper(),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    _configured = True
