#!/usr/bin/env python3
# shiftadapt.py
"""
Command-line entry point for the label-shift adapter pipeline.

    python shiftadapt.py pretrain       [--config FILE] [--section.key VALUE ...]
    python shiftadapt.py train-adapter  [--config FILE] [...]
    python shiftadapt.py bench          [--config FILE] [--workers N] [--record-db] [...]
    python shiftadapt.py ablate {components,taus,prior} [...]

Stages read and write checkpoints and manifests in the output directory,
so each one can be rerun on its own.
"""
import argparse
import logging
import sys
import traceback
from typing import List, Optional, Tuple

import pandas as pd

from scripts.ablate import ABLATIONS, AblationRunner
from scripts.bench import RESULT_COLUMNS, BenchRunner
from scripts.common import setup_logging
from scripts.pretrain import SourceModelTrainer
from scripts.train_adapter import AdapterTrainer
from services.errors import ShiftAdaptError
from utils.run_config import RunConfig, load_config, parse_overrides, resolved

logger = logging.getLogger("shiftadapt")


def cmd_pretrain(config: RunConfig, args) -> Tuple[int, Optional[pd.DataFrame]]:
    SourceModelTrainer(config).run()
    return 0, None


def cmd_train_adapter(config: RunConfig, args) -> Tuple[int, Optional[pd.DataFrame]]:
    AdapterTrainer(config).run()
    return 0, None


def cmd_bench(config: RunConfig, args) -> Tuple[int, Optional[pd.DataFrame]]:
    results, _, exit_code = BenchRunner(config, workers=args.workers).run()
    return exit_code, results


def cmd_ablate(config: RunConfig, args) -> Tuple[int, Optional[pd.DataFrame]]:
    results, _, exit_code = AblationRunner(config, args.kind, workers=args.workers).run()
    return exit_code, results


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-adapter": cmd_train_adapter,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftadapt",
        description="Label-shift adapter for test-time adaptation: pretrain, train-adapter, bench, ablate",
        epilog="Any config key can be overridden with --section.key VALUE or --section.key=VALUE.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, allow_abbrev=False)
        p.add_argument("--config", help="Config file of 'key = value' lines")
        p.add_argument("--output-dir", help="Output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, default=None, help="Parallel bench cells")
        p.add_argument("--record-db", action="store_true",
                       help="Also record results in the database at SHIFTADAPT_DATABASE_URL")
        if name == "ablate":
            p.add_argument("kind", choices=ABLATIONS, help="Which ablation to run")
    return parser


def record(command: str, config: RunConfig, results: Optional[pd.DataFrame], exit_code: int):
    from database import get_session, init_db, record_run

    init_db()
    session = get_session()
    try:
        frame = results if results is not None else pd.DataFrame(columns=RESULT_COLUMNS)
        record_run(session, command, config.output_dir, resolved(config), frame, exit_code)
    finally:
        session.close()


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    command = args.command if args.command != "ablate" else f"ablate_{args.kind}"

    try:
        overrides = parse_overrides(extra)
        if args.output_dir:
            overrides.append(("output_dir", args.output_dir))
        config = load_config(args.config, overrides)
    except ShiftAdaptError as e:
        logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        logger.error(f"Configuration error: {e}")
        return 2

    setup_logging(config.output_dir, command)
    results = None
    try:
        exit_code, results = COMMANDS[args.command](config, args)
    except ShiftAdaptError as e:
        logger.error(f"{command} failed: {e}")
        exit_code = 1
    except Exception as e:
        logger.error(f"{command} crashed: {e}")
        traceback.print_exc()
        raise

    if args.record_db:
        record(command, config, results, exit_code)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
