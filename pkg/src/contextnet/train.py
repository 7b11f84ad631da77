"""Training loop and evaluation for segmentation graphs.

The loop is plain full-batch-sequential SGD machinery: shuffle, augment,
stack, forward, loss, backward, weight decay, RMSprop step under a poly
learning-rate schedule.  Evaluation runs the graph in inference mode and
accumulates a confusion matrix over whole samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ops
from .autodiff import (OptimizerState, backward, contextnet_loss, forward,
                       poly_lr, rmsprop_step)
from .data import (AugmentConfig, SegSample, augment, compute_miou,
                   confusion_update, new_confusion)
from .errors import ConfigError, NumericsError
from .graphdef import GraphSpec

CSV_FIELDS = ("epoch", "loss", "lr", "train_miou", "val_miou")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    base_lr: float = 0.045
    lr_power: float = 0.98
    aux_weight: float = 0.4
    weight_decay: float = 4e-5
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    eval_every: int = 1
    stop_train_miou: float = 0.0  # early-stop threshold; 0 disables
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs and batch_size must be >= 1, got {self.epochs}, "
                f"{self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 <= self.aux_weight:
            raise ConfigError(f"aux_weight must be >= 0, got {self.aux_weight}")


@dataclass
class EvalResult:
    ious: np.ndarray
    miou: float
    confusion: np.ndarray


@dataclass
class TrainResult:
    history: list
    step_losses: list
    steps: int
    stopped_early: bool
    final_train_miou: float
    final_val_miou: float


def stack_batch(samples: list[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate sample images/labels into one batch."""
    x = np.concatenate([s.image for s in samples], axis=0)
    labels = np.stack([s.labels for s in samples], axis=0)
    return x, labels


def _num_classes(graph: GraphSpec) -> int:
    return graph.output_layer("logits").out_shape[2]


def predict(graph: GraphSpec, params: dict, image: np.ndarray,
            zero_layers: tuple = ()) -> np.ndarray:
    """Full-resolution argmax labels for a batch, inference mode."""
    tape = forward(graph, params, image, training=False, zero_layers=zero_layers)
    logits = tape.values[graph.outputs["logits"]]
    return logits.argmax(axis=3).astype(np.int32)


_EVAL_MODES = ("normal", "zero_context", "zero_detail")


def evaluate(graph: GraphSpec, params: dict, samples: list[SegSample],
             mode: str = "normal", batch_size: int = 4) -> EvalResult:
    """Score a sample list; mode may ablate one branch at the fusion input."""
    if mode not in _EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}, expected one of {_EVAL_MODES}")
    zero: tuple = ()
    if mode == "zero_context":
        zero = (graph.outputs["context_feature"],)
    elif mode == "zero_detail":
        zero = (graph.outputs["detail_feature"],)
    cm = new_confusion(_num_classes(graph))
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, labels = stack_batch(chunk)
        pred = predict(graph, params, x, zero_layers=zero)
        confusion_update(cm, pred, labels)
    ious, miou = compute_miou(cm)
    return EvalResult(ious=ious, miou=miou, confusion=cm)


def evaluate_ensemble(graph_a: GraphSpec, params_a: dict, graph_b: GraphSpec,
                      params_b: dict, samples: list[SegSample],
                      batch_size: int = 4) -> EvalResult:
    """Average the two models' softmax outputs, then argmax and score."""
    cm = new_confusion(_num_classes(graph_a))
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, labels = stack_batch(chunk)
        pa = forward(graph_a, params_a, x).values[graph_a.outputs["probs"]]
        pb = forward(graph_b, params_b, x).values[graph_b.outputs["probs"]]
        pred = ((pa + pb) * 0.5).argmax(axis=3).astype(np.int32)
        confusion_update(cm, pred, labels)
    ious, miou = compute_miou(cm)
    return EvalResult(ious=ious, miou=miou, confusion=cm)


def evaluate_aux_head(graph: GraphSpec, params: dict, samples: list[SegSample],
                      batch_size: int = 4) -> EvalResult:
    """Score the auxiliary head alone, bilinearly upsampled to label size."""
    cm = new_confusion(_num_classes(graph))
    aux_name = graph.outputs["aux_logits"]
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, labels = stack_batch(chunk)
        tape = forward(graph, params, x, training=False)
        aux = tape.values[aux_name]
        aux = ops.resize_bilinear(aux, labels.shape[1], labels.shape[2])
        confusion_update(cm, aux.argmax(axis=3).astype(np.int32), labels)
    ious, miou = compute_miou(cm)
    return EvalResult(ious=ious, miou=miou, confusion=cm)


def train(graph: GraphSpec, params: dict, train_set: list[SegSample],
          val_set: Optional[list[SegSample]], cfg: TrainConfig,
          log_path: Optional[str] = None,
          progress: Optional[Callable] = None) -> TrainResult:
    """Optimize params in place; returns the per-epoch history.

    Writes one CSV row per epoch to log_path when given.  Early-stops once
    the training-set mIoU reaches cfg.stop_train_miou (checked every
    cfg.eval_every epochs when enabled).
    """
    cfg.validate()
    if not train_set:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState()
    decay_keys = [k for k in graph.decay_keys()]
    has_aux = "aux_logits" in graph.outputs
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch

    history: list = []
    step_losses: list = []
    step = 0
    stopped = False
    last_train_miou = float("nan")
    last_val_miou = float("nan")

    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=CSV_FIELDS)
        writer.writeheader()

    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            lr = 0.0
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = [train_set[i] for i in idx]
                if cfg.augment is not None:
                    batch = [augment(s, cfg.augment, rng) for s in batch]
                x, labels = stack_batch(batch)
                lr = poly_lr(cfg.base_lr, step, max_iter, cfg.lr_power)
                tape = forward(graph, params, x, training=True, rng=rng)
                logits = tape.values[graph.outputs["logits"]]
                aux = tape.values[graph.outputs["aux_logits"]] if has_aux else None
                loss, g_logits, g_aux = contextnet_loss(
                    logits, aux, labels, aux_weight=cfg.aux_weight)
                if not np.isfinite(loss):
                    raise NumericsError(f"non-finite loss at step {step}")
                out_grads = {graph.outputs["logits"]: g_logits}
                if has_aux and g_aux is not None:
                    out_grads[graph.outputs["aux_logits"]] = g_aux
                grads, _ = backward(graph, params, tape, out_grads)
                if cfg.weight_decay:
                    for key in decay_keys:
                        if key in grads:
                            grads[key] += cfg.weight_decay * params[key]
                rmsprop_step(params, grads, opt, lr)
                losses.append(loss)
                step_losses.append(loss)
                step += 1

            row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
                   "train_miou": "", "val_miou": ""}
            measure = (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
            if measure:
                if val_set:
                    last_val_miou = evaluate(graph, params, val_set,
                                             batch_size=cfg.batch_size).miou
                    row["val_miou"] = f"{last_val_miou:.6f}"
                if cfg.stop_train_miou > 0.0:
                    last_train_miou = evaluate(graph, params, train_set,
                                               batch_size=cfg.batch_size).miou
                    row["train_miou"] = f"{last_train_miou:.6f}"
                    if last_train_miou >= cfg.stop_train_miou:
                        stopped = True
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                log_file.flush()
            if progress is not None:
                progress(row)
            if stopped:
                break
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(history=history, step_losses=step_losses, steps=step,
                       stopped_early=stopped, final_train_miou=last_train_miou,
                       final_val_miou=last_val_miou)
