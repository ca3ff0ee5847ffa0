import os
import logging
import random

import numpy as np
import torch
from sqlalchemy import create_engine
from sqlalchemy.orm import DeclarativeBase, sessionmaker

__version__ = "0.1.0"

logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


def configure_logging(level=None):
    """Configure root logging once for command-line use."""
    level = level or os.environ.get("SIMFACE_LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def ledger_url(workdir):
    return os.environ.get("SIMFACE_LEDGER_URL", f"sqlite:///{os.path.join(workdir, 'ledger.db')}")


def open_ledger(workdir):
    """Create (if needed) the run ledger for a work directory and return a session factory."""
    # models registers its tables on Base
    import models  # noqa: F401

    os.makedirs(workdir, exist_ok=True)
    engine = create_engine(ledger_url(workdir))
    Base.metadata.create_all(engine)
    logger.debug(f"Ledger opened at {engine.url}")
    return sessionmaker(bind=engine, expire_on_commit=False)


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
