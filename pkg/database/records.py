# database/records.py
"""Write benchmark tables into the results database."""
import json
import logging
import math
from typing import Dict

import pandas as pd

from .models import BenchCell, BenchRun

logger = logging.getLogger(__name__)


def _nullable(value):
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


def record_run(session, command: str, output_dir: str, config: Dict[str, str],
               results: pd.DataFrame, exit_status: int) -> BenchRun:
    """
    Store one invocation and its result rows.

    Args:
        session: open SQLAlchemy session; committed here
        command: CLI command name
        output_dir: where the CSV/JSON outputs went
        config: resolved flat config
        results: rows with method, direction, rho_t, seed, accuracy, macro_accuracy, prior_L1, status
        exit_status: process exit code

    Returns:
        The persisted BenchRun
    """
    run = BenchRun(
        command=command,
        output_dir=output_dir,
        config_json=json.dumps(config, sort_keys=True),
        exit_status=exit_status,
        num_cells=len(results),
    )
    for row in results.itertuples(index=False):
        run.cells.append(BenchCell(
            method=row.method,
            direction=row.direction,
            rho_t=float(row.rho_t),
            seed=int(row.seed),
            accuracy=_nullable(row.accuracy),
            macro_accuracy=_nullable(row.macro_accuracy),
            prior_l1=_nullable(row.prior_L1),
            status=getattr(row, "status", "ok"),
        ))
    try:
        session.add(run)
        session.commit()
    except Exception:
        session.rollback()
        raise
    logger.info(f"Recorded run {run.id} ({len(results)} cells) to the results database")
    return run
