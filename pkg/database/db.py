# database/db.py
"""Database connection and session management for benchmark results."""
import logging
import os

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, scoped_session, sessionmaker

logger = logging.getLogger(__name__)

load_dotenv(os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), ".env"))

DATABASE_URL = os.getenv("SHIFTADAPT_DATABASE_URL", "sqlite:///shiftadapt.db")

# Convert postgres:// to postgresql:// if needed
if DATABASE_URL.startswith("postgres://"):
    DATABASE_URL = DATABASE_URL.replace("postgres://", "postgresql://", 1)

Base = declarative_base()


def make_engine(url: str = DATABASE_URL):
    """Engine with pooling options chosen by backend."""
    engine_kwargs = {
        "pool_pre_ping": True,
        "future": True,
        "echo": False,
    }
    if url.startswith("sqlite://"):
        # SQLite - no pooling needed
        engine_kwargs["pool_pre_ping"] = False
        logger.debug("Configuring SQLite connection")
    else:
        engine_kwargs["pool_size"] = 5
        engine_kwargs["max_overflow"] = 10
        engine_kwargs["pool_recycle"] = 3600
        logger.debug("Configuring pooled connection")
    return create_engine(url, **engine_kwargs)


engine = make_engine()

# Session factory
SessionLocal = scoped_session(
    sessionmaker(
        bind=engine,
        autoflush=False,
        autocommit=False,
        future=True,
        expire_on_commit=False,
    )
)


def init_db(bind=None):
    """Create all tables."""
    from .models import BenchCell, BenchRun  # noqa: F401
    Base.metadata.create_all(bind=bind or engine)
    logger.info("Results database initialized")


def get_session():
    """Get a new database session. Remember to close it when done!"""
    return SessionLocal()
