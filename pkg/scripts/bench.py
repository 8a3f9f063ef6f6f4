#!/usr/bin/env python3
# scripts/bench.py
"""Run every method over the seven test label distributions and tabulate accuracy."""
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

# Add parent directory to path
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, PROJECT_ROOT)

from scripts.common import (
    ADAPTER_CHECKPOINT,
    MODEL_CHECKPOINT,
    banner,
    file_digest,
    load_adapter,
    load_model,
    output_path,
    write_csv,
    write_json,
)
from services.errors import DivergenceError
from services.label_shift_adapter import LabelShiftAdapter
from services.losses import LabelDistribution
from services.network import Classifier
from services.shift_benchmark import COLUMN_LABELS, TEST_COLUMNS, column_label
from services.tta_engine import get_method, run_stream
from utils.accounting import cost_table
from utils.run_config import RunConfig, resolved

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["method", "direction", "rho_t", "seed", "accuracy", "macro_accuracy", "prior_L1", "status"]


@dataclass(frozen=True)
class Cell:
    """One independent stream run. `label` names the result row; `method` picks the registry entry."""

    label: str
    method: str
    direction: str
    rho_t: float
    seed: int
    adapter_key: Optional[str] = None
    oracle_prior: bool = False


def build_cells(rows: Sequence[Tuple[str, str, Optional[str], bool]], seeds: Sequence[int]) -> List[Cell]:
    """Cells in report order: row, then column, then seed."""
    return [
        Cell(label, method, direction, rho_t, seed, adapter_key, oracle)
        for label, method, adapter_key, oracle in rows
        for direction, rho_t in TEST_COLUMNS
        for seed in seeds
    ]


class CellRunner:
    """Evaluates cells against shared read-only model and adapters."""

    def __init__(self, config: RunConfig, model: Classifier, logit_prior: LabelDistribution,
                 adapters: Optional[Dict[str, LabelShiftAdapter]] = None):
        self.config = config
        self.model = model
        self.logit_prior = logit_prior
        self.adapters = adapters or {}
        self.scenario = config.shift_scenario()

    def run_cell(self, cell: Cell) -> Tuple[Dict, Optional[pd.DataFrame]]:
        method = get_method(cell.method)
        adapter = self.adapters[cell.adapter_key] if method.adapter else None
        scenario = self.scenario.with_target(cell.direction, cell.rho_t, cell.seed)
        row = {
            "method": cell.label,
            "direction": cell.direction,
            "rho_t": cell.rho_t,
            "seed": cell.seed,
        }
        try:
            result = run_stream(
                method, self.model, adapter, scenario,
                config=self.config.tta_config(oracle_prior=cell.oracle_prior),
                logit_prior=self.logit_prior,
            )
        except DivergenceError as e:
            logger.error(f"Cell {cell.label} {column_label(cell.direction, cell.rho_t)} seed={cell.seed} aborted: {e}")
            row.update(accuracy=np.nan, macro_accuracy=np.nan, prior_L1=np.nan, status="aborted")
            return row, None
        row.update(
            accuracy=np.nan if result.accuracy is None else result.accuracy,
            macro_accuracy=np.nan if result.macro_accuracy is None else result.macro_accuracy,
            prior_L1=result.prior_l1,
            status="ok",
        )
        logger.info(
            f"  {cell.label:<24} {column_label(cell.direction, cell.rho_t):>4} seed={cell.seed} "
            f"acc={row['accuracy']:.4f} prior_L1={row['prior_L1']:.4f}"
        )
        return row, result.trajectory

    def run(self, cells: Sequence[Cell], workers: int = 1) -> Tuple[pd.DataFrame, Dict[Cell, pd.DataFrame]]:
        """
        Run cells, in parallel when workers > 1.

        Results are collected in cell order regardless of completion order.
        """
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outputs = list(pool.map(self.run_cell, cells))
        else:
            outputs = [self.run_cell(cell) for cell in cells]
        results = pd.DataFrame([row for row, _ in outputs], columns=RESULT_COLUMNS)
        trajectories = {cell: traj for cell, (_, traj) in zip(cells, outputs) if traj is not None}
        return results, trajectories


def aggregate_table(results: pd.DataFrame, row_order: Sequence[str]) -> pd.DataFrame:
    """
    Mean accuracy over seeds per row and test column, plus their average.

    Columns: F50, F25, F10, U, B10, B25, B50, Avg. An aborted cell makes its
    seed mean and the row's Avg NaN instead of averaging over fewer runs.
    """
    labelled = results.assign(
        column=[column_label(d, r) for d, r in zip(results["direction"], results["rho_t"])]
    )
    grouped = labelled.groupby(["method", "column"])["accuracy"]
    table = grouped.agg(lambda runs: runs.mean(skipna=False)).unstack("column")
    table = table.reindex(index=list(row_order), columns=list(COLUMN_LABELS))
    table["Avg"] = table[list(COLUMN_LABELS)].mean(axis=1, skipna=False)
    table.index.name = "method"
    return table


def write_trajectories(config: RunConfig, subdir: str, trajectories: Dict[Cell, pd.DataFrame]):
    for cell, traj in trajectories.items():
        name = f"trajectory_{cell.label.replace('+', '-')}_{column_label(cell.direction, cell.rho_t)}_s{cell.seed}.csv"
        write_csv(traj, output_path(config, subdir, name))


class BenchRunner:
    """Evaluate the configured methods on all test columns and seeds."""

    def __init__(self, config: RunConfig, workers: Optional[int] = None):
        self.config = config
        self.workers = workers or config.bench.workers
        self.methods = [get_method(name) for name in config.bench.methods]
        self.model, self.pi_s, self.logit_prior = load_model(config)
        needs_adapter = any(m.adapter for m in self.methods)
        self.adapter = load_adapter(config) if needs_adapter else None

    def costs(self) -> pd.DataFrame:
        return cost_table(self.config.network_spec(), self.config.adapter.hidden)

    def run(self) -> Tuple[pd.DataFrame, pd.DataFrame, int]:
        banner("TEST-TIME ADAPTATION BENCHMARK")
        costs = self.costs()
        logger.info("Computational cost:\n" + costs.to_string(index=False))

        rows = [(m.name, m.name, "default" if m.adapter else None, False) for m in self.methods]
        cells = build_cells(rows, self.config.seeds)
        logger.info(f"{len(cells)} cells, {self.workers} worker(s)")

        adapters = {"default": self.adapter} if self.adapter is not None else {}
        runner = CellRunner(self.config, self.model, self.logit_prior, adapters)
        results, trajectories = runner.run(cells, self.workers)
        aggregate = aggregate_table(results, [m.name for m in self.methods])

        write_csv(results, output_path(self.config, "bench", "results.csv"))
        write_csv(aggregate, output_path(self.config, "bench", "aggregate.csv"), index=True)
        if self.config.tta.trajectory:
            write_trajectories(self.config, "bench", trajectories)

        aborted = results[results["status"] == "aborted"]
        checkpoints = {MODEL_CHECKPOINT: file_digest(os.path.join(self.config.output_dir, MODEL_CHECKPOINT))}
        if self.adapter is not None:
            checkpoints[ADAPTER_CHECKPOINT] = file_digest(os.path.join(self.config.output_dir, ADAPTER_CHECKPOINT))
        write_json(output_path(self.config, "bench", "manifest.json"), {
            "stage": "bench",
            "config": resolved(self.config),
            "methods": [m.name for m in self.methods],
            "columns": list(COLUMN_LABELS),
            "seeds": list(self.config.seeds),
            "checkpoints": checkpoints,
            "cost_table": costs.to_dict(orient="records"),
            "average_accuracy": {k: None if pd.isna(v) else float(v) for k, v in aggregate["Avg"].items()},
            "aborted_cells": aborted[["method", "direction", "rho_t", "seed"]].to_dict(orient="records"),
        })

        logger.info("Aggregate accuracy:\n" + aggregate.to_string(float_format=lambda v: f"{v:.4f}"))
        exit_code = 1 if len(aborted) else 0
        if exit_code:
            logger.error(f"{len(aborted)} cell(s) aborted")
        return results, aggregate, exit_code


def main(argv=None):
    """Standalone entry point; same flags as `shiftadapt.py bench`."""
    from shiftadapt import main as cli_main
    return cli_main(["bench"] + list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
