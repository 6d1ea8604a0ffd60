import logging
import os

import psutil
from dotenv import load_dotenv

load_dotenv()

VERBOSITY_ENV = "GMM_BRIDGE_VERBOSITY"
WORKERS_ENV = "GMM_BRIDGE_WORKERS"

_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def get_verbosity():
    """Logging level name from the environment (.env is honoured)"""
    level = os.getenv(VERBOSITY_ENV, "INFO").strip().upper()
    if level not in _LEVELS:
        print(f"Unknown {VERBOSITY_ENV}={level!r}, falling back to INFO")
        return "INFO"
    return level


def get_worker_count():
    """Number of threads used for independent per-pair solves"""
    override = os.getenv(WORKERS_ENV)
    if override:
        try:
            return max(1, int(override))
        except ValueError:
            print(f"Ignoring non-integer {WORKERS_ENV}={override!r}")
    try:
        # Physical cores only
        count = psutil.cpu_count(logical=False)
    except Exception:
        count = None
    return count or os.cpu_count() or 1


def configure_logging(level=None):
    logging.basicConfig(
        level=getattr(logging, level or get_verbosity()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
