# scripts/common.py
"""Shared plumbing for the pipeline stages: logging, paths, manifests, checkpoints."""
import hashlib
import json
import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from services.checkpoints import (
    load_checkpoint,
    model_entries,
    restore_model,
    save_checkpoint,
    strip_prefix,
    with_prefix,
)
from services.errors import ConfigError
from services.label_shift_adapter import LabelShiftAdapter
from services.losses import LabelDistribution
from services.network import Classifier
from utils.run_config import RunConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
FLOAT_FORMAT = "%.10f"

MODEL_CHECKPOINT = "model.shad"
ADAPTER_CHECKPOINT = "adapter.shad"
PRETRAIN_MANIFEST = "pretrain_manifest.json"
ADAPTER_MANIFEST = "adapter_manifest.json"


def setup_logging(output_dir: str, command: str, level: Optional[str] = None):
    """Console plus `<output_dir>/logs/<command>.log`."""
    log_dir = os.path.join(output_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    level = (level or os.getenv("SHIFTADAPT_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(os.path.join(log_dir, f"{command}.log")),
            logging.StreamHandler(),
        ],
        force=True,
    )


def banner(title: str):
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


def output_path(config: RunConfig, *parts: str) -> str:
    path = os.path.join(config.output_dir, *parts)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def write_json(path: str, payload: Dict):
    """Sorted keys, fixed indent, trailing newline: equal payloads give equal bytes."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Manifest written to: {path}")


def read_json(path: str) -> Dict:
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path}; run the earlier stage first")
    with open(path) as f:
        return json.load(f)


def write_csv(df: pd.DataFrame, path: str, index: bool = False):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Table written to: {path}")


def file_digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def pretrain_tau(config: RunConfig) -> float:
    return {"balanced_softmax": 1.0, "cross_entropy": 0.0}.get(config.pretrain.loss, config.pretrain.tau)


def logit_prior_for(config: RunConfig, pi_s: LabelDistribution) -> LabelDistribution:
    """
    Prior baked into the logits by the pretraining loss.

    Training on logits + tau * log(pi_s) leaves logits carrying pi_s^(1 - tau):
    uniform for balanced softmax, pi_s for plain cross-entropy.
    """
    tau = pretrain_tau(config)
    weights = np.exp((1.0 - tau) * pi_s.log())
    return LabelDistribution(weights / weights.sum())


def save_model(config: RunConfig, model: Classifier, pi_s: LabelDistribution,
               logit_prior: LabelDistribution) -> str:
    entries = model_entries(model)
    entries.update(with_prefix({"pi_s": pi_s.as_row(), "logit_prior": logit_prior.as_row()}, "meta"))
    path = output_path(config, MODEL_CHECKPOINT)
    save_checkpoint(path, entries)
    return path


def load_model(config: RunConfig) -> Tuple[Classifier, LabelDistribution, LabelDistribution]:
    """Restore the pretrained classifier with its source prior and logit prior."""
    path = os.path.join(config.output_dir, MODEL_CHECKPOINT)
    if not os.path.exists(path):
        raise ConfigError(f"model checkpoint not found: {path}; run pretrain first")
    entries = load_checkpoint(path)
    model = Classifier(
        config.network_spec(),
        seed=config.network.init_seed,
        alpha_shrink=config.network.alpha_shrink,
        m_iabn=config.network.m_iabn,
    )
    restore_model(model, entries)
    meta = strip_prefix(entries, "meta")
    return model, LabelDistribution(meta["pi_s"].reshape(-1)), LabelDistribution(meta["logit_prior"].reshape(-1))


def save_adapter(config: RunConfig, adapter: LabelShiftAdapter, name: str = ADAPTER_CHECKPOINT) -> str:
    path = output_path(config, name)
    save_checkpoint(path, with_prefix(adapter.entries(), "adapter"))
    return path


def load_adapter(config: RunConfig, name: str = ADAPTER_CHECKPOINT) -> LabelShiftAdapter:
    path = os.path.join(config.output_dir, name)
    if not os.path.exists(path):
        raise ConfigError(f"adapter checkpoint not found: {path}; run train-adapter first")
    return LabelShiftAdapter.from_entries(strip_prefix(load_checkpoint(path), "adapter"))
