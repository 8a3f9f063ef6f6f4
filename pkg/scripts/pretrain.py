#!/usr/bin/env python3
# scripts/pretrain.py
"""Train the source classifier on the long-tailed synthetic source set."""
import logging
import os
import sys
from typing import Dict

import numpy as np
from sklearn.metrics import accuracy_score, recall_score

import gradcore as gc

# Add parent directory to path
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, PROJECT_ROOT)

from scripts.common import (
    PRETRAIN_MANIFEST,
    banner,
    file_digest,
    logit_prior_for,
    output_path,
    pretrain_tau,
    save_model,
    write_json,
)
from services.errors import DivergenceError
from services.losses import generalized_logit_adjusted
from services.network import Classifier
from services.optimizer import SGD
from services.shift_benchmark import make_probe, make_source
from utils.run_config import RunConfig, resolved

logger = logging.getLogger(__name__)


def tail_recall(per_class: np.ndarray) -> float:
    """Mean recall over the rarer half of the classes (higher indices)."""
    C = per_class.size
    return float(per_class[C - C // 2:].mean())


class SourceModelTrainer:
    """Pretrain backbone and head with a (generalized) logit-adjusted loss."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.scenario = config.shift_scenario()
        self.source = make_source(self.scenario)
        self.model = Classifier(
            config.network_spec(),
            seed=config.network.init_seed,
            alpha_shrink=config.network.alpha_shrink,
            m_iabn=config.network.m_iabn,
        )

    @property
    def tau(self) -> float:
        return pretrain_tau(self.config)

    def train(self) -> float:
        """
        Minibatch SGD over the source set.

        Returns:
            Mean loss of the final epoch
        """
        p = self.config.pretrain
        model, source = self.model, self.source
        model.set_stage("pretrain")
        optimizer = SGD(model.params, p.lr, p.momentum, p.weight_decay)
        rng = np.random.default_rng([self.scenario.seed, 10])
        n = len(source.y)
        epoch_loss = float("nan")

        for epoch in range(p.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, p.batch_size):
                idx = order[start:start + p.batch_size]
                if idx.size < 2:
                    continue
                try:
                    logits = model.forward(source.x[idx], norm_mode="train")
                    loss = generalized_logit_adjusted(logits, source.y[idx], source.pi_s, self.tau)
                except gc.NonFiniteError as e:
                    raise DivergenceError(f"pretraining diverged in epoch {epoch + 1}: {e}", step=epoch) from e
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"pretraining loss became non-finite in epoch {epoch + 1}",
                                          step=epoch, loss=value)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(value)
            epoch_loss = float(np.mean(losses))
            logger.info(f"  epoch {epoch + 1}/{p.epochs} loss={epoch_loss:.4f}")
        return epoch_loss

    def evaluate(self) -> Dict:
        """Accuracy and per-class recall on a balanced, unshifted probe set."""
        x, y = make_probe(self.scenario, self.config.pretrain.probe_per_class)
        pred = self.model.predict_proba(x).argmax(axis=1)
        per_class = recall_score(y, pred, labels=list(range(self.model.num_classes)), average=None, zero_division=0)
        return {
            "probe_accuracy": float(accuracy_score(y, pred)),
            "per_class_recall": [float(r) for r in per_class],
            "tail_recall": tail_recall(per_class),
        }

    def run(self) -> Dict:
        banner("SOURCE MODEL PRETRAINING")
        logger.info(f"Loss: {self.config.pretrain.loss} (tau={self.tau})")
        logger.info(f"Source counts: {self.source.counts.tolist()}")

        final_loss = self.train()
        metrics = self.evaluate()
        logger.info(f"Balanced probe accuracy: {metrics['probe_accuracy']:.4f}")
        logger.info(f"Tail-half recall: {metrics['tail_recall']:.4f}")

        logit_prior = logit_prior_for(self.config, self.source.pi_s)
        path = save_model(self.config, self.model, self.source.pi_s, logit_prior)
        manifest = {
            "stage": "pretrain",
            "config": resolved(self.config),
            "source_counts": self.source.counts.tolist(),
            "final_loss": final_loss,
            "checkpoint_sha256": file_digest(path),
            **metrics,
        }
        write_json(output_path(self.config, PRETRAIN_MANIFEST), manifest)
        return manifest


def main(argv=None):
    """Standalone entry point; same flags as `shiftadapt.py pretrain`."""
    from shiftadapt import main as cli_main
    return cli_main(["pretrain"] + list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
