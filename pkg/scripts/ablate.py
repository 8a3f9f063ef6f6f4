#!/usr/bin/env python3
# scripts/ablate.py
"""
Ablation sweeps:
    components  one adapter per component mask, each evaluated with iabn+adapter
    taus        one adapter per tau triple, each evaluated with iabn+adapter
    prior       estimated prior versus the true target prior for each adapter method
"""
import logging
import os
import sys
from typing import Dict, List, Tuple

import pandas as pd

# Add parent directory to path
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, PROJECT_ROOT)

from scripts.bench import CellRunner, aggregate_table, build_cells, write_trajectories
from scripts.common import banner, load_adapter, load_model, output_path, write_csv, write_json
from scripts.train_adapter import AdapterTrainer
from services.errors import ConfigError
from services.label_shift_adapter import ABLATION_MASKS, mask_label
from services.tta_engine import get_method
from utils.run_config import RunConfig, resolved

logger = logging.getLogger(__name__)

ABLATIONS = ("components", "taus", "prior")
EVAL_METHOD = "iabn+adapter"


def tau_label(taus) -> str:
    return "tau=" + ",".join(f"{t:g}" for t in taus)


class AblationRunner:
    """Train the adapters an ablation needs, then evaluate them on every test column."""

    def __init__(self, config: RunConfig, kind: str, workers: int = None):
        if kind not in ABLATIONS:
            raise ConfigError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")
        self.config = config
        self.kind = kind
        self.workers = workers or config.bench.workers
        self.model, self.pi_s, self.logit_prior = load_model(config)

    def _train(self, key: str, **kwargs) -> Tuple[object, Dict]:
        trainer = AdapterTrainer(self.config, **kwargs)
        name = os.path.join("ablate", self.kind, f"adapter_{key.replace('+', '-').replace('=', '_')}.shad")
        summary = trainer.run(checkpoint=name, manifest=None)
        return trainer.adapter, summary

    def plan(self) -> Tuple[List[Tuple[str, str, str, bool]], Dict[str, object], Dict[str, Dict]]:
        """Result rows (label, method, adapter key, oracle) plus the adapters they use."""
        rows, adapters, summaries = [], {}, {}
        if self.kind == "components":
            for mask in ABLATION_MASKS:
                label = mask_label(mask)
                adapters[label], summaries[label] = self._train(label, components=mask)
                rows.append((label, EVAL_METHOD, label, False))
        elif self.kind == "taus":
            for taus in self.config.tau_triples():
                label = tau_label(taus)
                adapters[label], summaries[label] = self._train(label, taus=taus)
                rows.append((label, EVAL_METHOD, label, False))
        else:
            adapters["default"] = load_adapter(self.config)
            methods = [get_method(name) for name in self.config.bench.methods]
            adapter_methods = [m.name for m in methods if m.adapter] or [EVAL_METHOD]
            for name in adapter_methods:
                rows.append((f"{name} (estimated)", name, "default", False))
                rows.append((f"{name} (oracle)", name, "default", True))
        return rows, adapters, summaries

    def run(self) -> Tuple[pd.DataFrame, pd.DataFrame, int]:
        banner(f"ABLATION: {self.kind.upper()}")
        rows, adapters, summaries = self.plan()
        cells = build_cells(rows, self.config.seeds)
        runner = CellRunner(self.config, self.model, self.logit_prior, adapters)
        results, trajectories = runner.run(cells, self.workers)
        aggregate = aggregate_table(results, [label for label, _, _, _ in rows])

        write_csv(results, output_path(self.config, "ablate", self.kind, "results.csv"))
        write_csv(aggregate, output_path(self.config, "ablate", self.kind, "aggregate.csv"), index=True)
        if self.config.tta.trajectory:
            write_trajectories(self.config, os.path.join("ablate", self.kind), trajectories)

        aborted = results[results["status"] == "aborted"]
        write_json(output_path(self.config, "ablate", self.kind, "manifest.json"), {
            "stage": f"ablate_{self.kind}",
            "config": resolved(self.config),
            "rows": [label for label, _, _, _ in rows],
            "adapters": {k: {"final_losses": s["final_losses"], "probe_tail_mass": s["probe_tail_mass"]}
                         for k, s in summaries.items()},
            "average_accuracy": {k: None if pd.isna(v) else float(v) for k, v in aggregate["Avg"].items()},
            "aborted_cells": aborted[["method", "direction", "rho_t", "seed"]].to_dict(orient="records"),
        })
        logger.info("Aggregate accuracy:\n" + aggregate.to_string(float_format=lambda v: f"{v:.4f}"))
        exit_code = 1 if len(aborted) else 0
        if exit_code:
            logger.error(f"{len(aborted)} cell(s) aborted")
        return results, aggregate, exit_code


def main(argv=None):
    """Standalone entry point; same flags as `shiftadapt.py ablate`."""
    from shiftadapt import main as cli_main
    return cli_main(["ablate"] + list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
