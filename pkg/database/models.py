# database/models.py
"""SQLAlchemy models for recorded benchmark runs."""
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, func
from sqlalchemy.orm import relationship

from .db import Base


class BenchRun(Base):
    """One CLI invocation that produced result rows."""
    __tablename__ = "bench_runs"

    id = Column(Integer, primary_key=True)
    command = Column(String(32), nullable=False, index=True)  # "bench", "ablate components", ...
    output_dir = Column(String(512), nullable=False)
    config_json = Column(Text, nullable=False)  # resolved flat config
    exit_status = Column(Integer, nullable=False, default=0)
    num_cells = Column(Integer, nullable=False, default=0)

    created_at = Column(DateTime(timezone=True), server_default=func.now())

    # Relationships
    cells = relationship("BenchCell", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<BenchRun {self.id} {self.command} status={self.exit_status}>"


class BenchCell(Base):
    """One method x direction x rho_t x seed result row."""
    __tablename__ = "bench_cells"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("bench_runs.id"), nullable=False, index=True)

    method = Column(String(64), nullable=False, index=True)  # e.g. "tent+adapter"
    direction = Column(String(16), nullable=False)  # forward / uniform / backward
    rho_t = Column(Float, nullable=False)
    seed = Column(Integer, nullable=False)

    accuracy = Column(Float, nullable=True)  # null when the cell aborted
    macro_accuracy = Column(Float, nullable=True)
    prior_l1 = Column(Float, nullable=True)
    status = Column(String(16), nullable=False, default="ok")  # "ok" or "aborted"

    run = relationship("BenchRun", back_populates="cells")

    def __repr__(self):
        return f"<BenchCell {self.method} {self.direction} {self.rho_t:g} seed={self.seed}>"
