# database/__init__.py
"""Database package for recorded benchmark results."""
from .db import Base, SessionLocal, engine, get_session, init_db, make_engine
from .models import BenchCell, BenchRun
from .records import record_run

__all__ = [
    "engine",
    "SessionLocal",
    "Base",
    "init_db",
    "get_session",
    "make_engine",
    "BenchRun",
    "BenchCell",
    "record_run",
]
