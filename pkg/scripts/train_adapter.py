#!/usr/bin/env python3
# scripts/train_adapter.py
"""Train the label shift adapter against the frozen pretrained classifier."""
import logging
import os
import sys
from typing import Dict, Iterable, Optional, Sequence

# Add parent directory to path
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, PROJECT_ROOT)

from scripts.common import (
    ADAPTER_CHECKPOINT,
    ADAPTER_MANIFEST,
    banner,
    file_digest,
    load_model,
    output_path,
    save_adapter,
    write_json,
)
from services.errors import StageError
from services.label_shift_adapter import (
    LabelShiftAdapter,
    MappingVector,
    map_distribution,
    mask_label,
    tail_mass,
    train_adapter,
)
from services.losses import LabelDistribution
from services.shift_benchmark import make_probe, make_source
from utils.run_config import RunConfig, resolved

logger = logging.getLogger(__name__)


class AdapterTrainer:
    """Fit one adapter; component mask and tau triple default to the config's."""

    def __init__(self, config: RunConfig, components: Optional[Iterable[str]] = None,
                 taus: Optional[Sequence[float]] = None):
        self.config = config
        self.components = config.adapter.components if components is None else components
        self.taus = taus
        self.scenario = config.shift_scenario()
        self.model, self.pi_s, _ = load_model(config)
        self.adapter: Optional[LabelShiftAdapter] = None

    def build(self) -> LabelShiftAdapter:
        spec = self.config.network_spec()
        return LabelShiftAdapter(
            spec.feature_dim,
            spec.num_classes,
            MappingVector.from_prior(self.pi_s),
            hidden=self.config.adapter.hidden,
            components=self.components,
            seed=self.config.adapter.seed,
        )

    def run(self, checkpoint: str = ADAPTER_CHECKPOINT, manifest: Optional[str] = ADAPTER_MANIFEST) -> Dict:
        banner("LABEL SHIFT ADAPTER TRAINING")
        schedule = self.config.adapter_schedule(self.taus)
        logger.info(f"Components: {mask_label(self.components)}  taus: {schedule.taus}  K={schedule.iterations}")

        source = make_source(self.scenario, holdout=self.config.adapter.data == "holdout")
        logger.info(f"Adapter data: {self.config.adapter.data} ({len(source.y)} samples)")
        self.model.set_stage("adapter_train")
        digest_before = self.model.params.digest()

        adapter = self.build()
        report = train_adapter(adapter, self.model, source.x, source.y, self.pi_s, schedule)
        self.adapter = adapter

        digest_after = self.model.params.digest()
        if digest_after != digest_before:
            raise StageError("model parameters changed during adapter training; no adapter written")

        x_probe, _ = make_probe(self.scenario, self.config.pretrain.probe_per_class)
        reversed_prior = self.pi_s.reversed()
        masses = {
            "source": tail_mass(adapter, self.model, x_probe, self.pi_s),
            "uniform": tail_mass(adapter, self.model, x_probe, LabelDistribution.uniform(self.pi_s.num_classes)),
            "reversed": tail_mass(adapter, self.model, x_probe, reversed_prior),
        }
        logger.info(f"Probe tail mass: source={masses['source']:.4f} reversed={masses['reversed']:.4f}")

        path = save_adapter(self.config, adapter, checkpoint)
        result = {
            "stage": "train_adapter",
            "config": resolved(self.config),
            "components": mask_label(adapter.components),
            "taus": list(schedule.taus),
            "adapter_data": self.config.adapter.data,
            "iterations": report.iterations,
            "branch_counts": report.branch_counts,
            "final_losses": report.final_losses,
            "mapped_inputs": {
                "source": map_distribution(adapter.mapping, self.pi_s),
                "reversed": map_distribution(adapter.mapping, reversed_prior),
            },
            "probe_tail_mass": masses,
            "adapter_parameters": adapter.num_parameters(),
            "model_digest": digest_after,
            "model_unchanged": digest_after == digest_before,
            "checkpoint_sha256": file_digest(path),
        }
        if manifest:
            write_json(output_path(self.config, manifest), result)
        return result


def main(argv=None):
    """Standalone entry point; same flags as `shiftadapt.py train-adapter`."""
    from shiftadapt import main as cli_main
    return cli_main(["train-adapter"] + list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
