# services/tta_engine.py
"""Online test-time adaptation: method registry, per-batch step, full-stream runs."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, recall_score

import gradcore as gc

from .errors import DivergenceError, InputError, StageError
from .label_shift_adapter import LabelShiftAdapter
from .losses import (
    LabelDistribution,
    entropy_loss,
    info_max_loss,
    posthoc_logit_adjust,
    pseudo_label_loss,
)
from .network import Classifier
from .optimizer import SGD
from .prior_estimator import PriorEstimate
from .shift_benchmark import ShiftScenario, TargetStream, make_target_stream

logger = logging.getLogger(__name__)

LOSSES = {
    "entropy": entropy_loss,
    "pseudo_label": pseudo_label_loss,
    "info_max": info_max_loss,
}


@dataclass(frozen=True)
class TtaMethod:
    name: str
    norm_mode: str
    loss: str = "none"
    adapter: bool = False
    posthoc: bool = False

    def __post_init__(self):
        if self.loss != "none" and self.loss not in LOSSES:
            raise InputError(f"unknown TTA loss {self.loss!r}")

    @property
    def tracks_prior(self) -> bool:
        """Methods whose step reads the running prior estimate."""
        return self.adapter or self.posthoc


METHODS: Dict[str, TtaMethod] = {
    m.name: m
    for m in (
        TtaMethod("source", "eval_source"),
        TtaMethod("bn_stats", "eval_batch"),
        TtaMethod("pseudo_label", "eval_batch", "pseudo_label"),
        TtaMethod("tent", "eval_batch", "entropy"),
        TtaMethod("iabn", "eval_iabn", "entropy"),
        TtaMethod("logit_adjust", "eval_iabn", "entropy", posthoc=True),
        TtaMethod("im_loss", "eval_iabn", "info_max"),
        TtaMethod("pseudo_label+adapter", "eval_batch", "pseudo_label", adapter=True),
        TtaMethod("tent+adapter", "eval_batch", "entropy", adapter=True),
        TtaMethod("iabn+adapter", "eval_iabn", "entropy", adapter=True),
    )
}


def get_method(name: str) -> TtaMethod:
    try:
        return METHODS[name]
    except KeyError:
        raise InputError(f"unknown method {name!r}; available: {sorted(METHODS)}") from None


@dataclass(frozen=True)
class TtaConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    alpha: float = 0.1
    top_k: Optional[int] = None
    # number of top blocks whose normalization stays frozen
    freeze_top: int = 1
    # score logits from a second forward pass after the update
    reforward: bool = False
    oracle_prior: bool = False


@dataclass
class TtaState:
    step: int
    estimate: PriorEstimate
    optimizer: SGD
    logit_prior: LabelDistribution
    last_loss: float = float("nan")

    @property
    def lr(self) -> float:
        return self.optimizer.lr


def init_state(model: Classifier, config: TtaConfig, logit_prior: Optional[LabelDistribution] = None) -> TtaState:
    C = model.num_classes
    return TtaState(
        step=0,
        estimate=PriorEstimate.initial(C, config.alpha, config.top_k),
        optimizer=SGD(model.params, config.lr, config.momentum, config.weight_decay),
        logit_prior=logit_prior or LabelDistribution.uniform(C),
    )


def tta_step(
    method: TtaMethod,
    model: Classifier,
    adapter: Optional[LabelShiftAdapter],
    state: TtaState,
    x: np.ndarray,
    reforward: bool = False,
    oracle_prior: Optional[LabelDistribution] = None,
) -> Tuple[np.ndarray, TtaState]:
    """
    Adapt on one unlabeled batch and predict it.

    Args:
        method: registry entry
        model: classifier in stage tta
        adapter: required when method.adapter
        state: step counter, prior estimate, optimizer
        x: n x D batch
        reforward: score post-update logits instead of pre-update ones
        oracle_prior: feed this distribution to the adapter instead of the estimate

    Returns:
        (n x C prediction probabilities, state)
    """
    if model.stage != "tta":
        raise StageError(f"tta_step needs stage tta, model is in {model.stage!r}")
    if method.adapter and adapter is None:
        raise InputError(f"method {method.name} needs an adapter")

    prior_used = oracle_prior if oracle_prior is not None else state.estimate.y_hat
    try:
        adapt = adapter.condition(prior_used).detached() if method.adapter else None
        logits = model.forward(x, norm_mode=method.norm_mode, adapt=adapt)
        loss = LOSSES[method.loss](logits) if method.loss != "none" else None
    except gc.NonFiniteError as e:
        raise DivergenceError(f"{method.name}: {e} at step {state.step}", step=state.step) from e
    scored = logits.value

    if loss is not None:
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(
                f"{method.name}: non-finite loss {value} at step {state.step}", step=state.step, loss=value
            )
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.last_loss = value
        if reforward:
            try:
                scored = model.forward(x, norm_mode=method.norm_mode, adapt=adapt, update_stats=False).value
            except gc.NonFiniteError as e:
                raise DivergenceError(f"{method.name}: {e} after the update at step {state.step}",
                                      step=state.step) from e

    if method.posthoc:
        scored = posthoc_logit_adjust(scored, prior_used, state.logit_prior)
    probs = gc.softmax_rows(scored)

    if method.tracks_prior:
        state.estimate = state.estimate.update(probs)
    state.step += 1
    return probs, state


@dataclass
class StreamResult:
    """Metrics of one pass over a target stream; metric fields are None for an empty stream."""

    method: str
    num_samples: int
    accuracy: Optional[float]
    macro_accuracy: Optional[float]
    per_class_accuracy: Optional[np.ndarray]
    final_prior: LabelDistribution
    prior_l1: float
    trajectory: pd.DataFrame
    adapted_model: Classifier = field(repr=False)


def stream_metrics(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int):
    """Overall accuracy, per-class recall, and macro accuracy over classes present."""
    if len(y_true) == 0:
        return None, None, None
    labels = list(range(num_classes))
    per_class = recall_score(y_true, y_pred, labels=labels, average=None, zero_division=0)
    present = np.bincount(y_true, minlength=num_classes) > 0
    return float(accuracy_score(y_true, y_pred)), float(per_class[present].mean()), per_class


def run_stream(
    method: TtaMethod,
    model: Classifier,
    adapter: Optional[LabelShiftAdapter],
    scenario: ShiftScenario,
    seed: Optional[int] = None,
    config: Optional[TtaConfig] = None,
    logit_prior: Optional[LabelDistribution] = None,
    stream: Optional[TargetStream] = None,
) -> StreamResult:
    """
    Adapt a private copy of the model over one target stream.

    The stream is regenerated from (scenario, seed) unless given. Labels are
    read only for scoring after each step.
    """
    config = config or TtaConfig()
    if seed is not None:
        scenario = scenario.with_target(scenario.direction, scenario.rho_t, seed)
    stream = stream if stream is not None else make_target_stream(scenario)

    model = model.copy()
    model.set_stage("tta", freeze_top=config.freeze_top)
    state = init_state(model, config, logit_prior)
    # Prior tracking for methods that do not read it themselves; reporting only.
    monitor = state.estimate
    true_prior = stream.prior
    oracle = true_prior if config.oracle_prior else None

    preds: List[np.ndarray] = []
    rows = []
    for x, y in stream.batches():
        probs, state = tta_step(method, model, adapter, state, x, config.reforward, oracle)
        if method.tracks_prior:
            monitor = state.estimate
        else:
            monitor = monitor.update(probs)
        pred = probs.argmax(axis=1)
        preds.append(pred)
        l1 = monitor.y_hat.l1(true_prior)
        row = {
            "t": state.step,
            "batch_accuracy": float(np.mean(pred == y)),
            "loss": state.last_loss if method.loss != "none" else float("nan"),
            "prior_l1": l1,
        }
        row.update({f"yhat_{c}": p for c, p in enumerate(monitor.y_hat.probs)})
        rows.append(row)
        logger.debug(f"{method.name} t={state.step} loss={row['loss']:.4f} prior_l1={l1:.4f}")

    y_pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    accuracy, macro, per_class = stream_metrics(stream.y, y_pred, model.num_classes)
    columns = ["t", "batch_accuracy", "loss", "prior_l1"] + [f"yhat_{c}" for c in range(model.num_classes)]
    return StreamResult(
        method=method.name,
        num_samples=len(stream),
        accuracy=accuracy,
        macro_accuracy=macro,
        per_class_accuracy=per_class,
        final_prior=monitor.y_hat,
        prior_l1=monitor.y_hat.l1(true_prior),
        trajectory=pd.DataFrame(rows, columns=columns),
        adapted_model=model,
    )
