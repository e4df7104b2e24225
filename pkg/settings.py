import logging
import os

from dotenv import load_dotenv

load_dotenv()

SEED = int(os.getenv("UWOC_SEED", "1"))
WORKERS = int(os.getenv("UWOC_WORKERS", "1"))
LOG_LEVEL = os.getenv("UWOC_LOG_LEVEL", "INFO").upper()
RESULTS_DIR = os.getenv("UWOC_RESULTS_DIR", "results")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level=None):
    """
    Root logger setup shared by the CLI and the figure scripts.

    Args:
        level (str | None): Overrides UWOC_LOG_LEVEL.
    """
    logging.basicConfig(level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
                        format=LOG_FORMAT, force=True)
