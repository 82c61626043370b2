"""SGD with momentum, cosine warm restarts, and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Sample, accuracy, f1_score, stack_images
from .mlfe import EVAL, TRAIN
from .model import MafConfig, MafParams, maf_forward
from .tensor import Rng, Tape, Tensor, backward, cross_entropy

log = logging.getLogger(__name__)

EVAL_BATCH = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lr_period: int = 40
    seed: int = 0

    def violations(self) -> list[str]:
        bad = []
        if self.epochs < 1:
            bad.append("epochs must be >= 1")
        if self.batch_size < 1:
            bad.append("batch_size must be >= 1")
        if self.lr < 0:
            bad.append("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            bad.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            bad.append("weight_decay must be non-negative")
        if self.lr_period < 1:
            bad.append("lr_period must be >= 1")
        return bad


# Full-length schedule: 200 epochs, batch 32.
LONG_TRAIN_CONFIG = TrainConfig(epochs=200, batch_size=32)


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(epoch: int, base_lr: float, period: int) -> float:
    """Cosine annealing restarted every ``period`` epochs."""
    if period < 1:
        raise ValueError("period must be >= 1")
    t = epoch % period
    return base_lr * (1.0 + math.cos(math.pi * t / period)) / 2.0


def sgd_step(params: MafParams, grads: dict[str, np.ndarray],
             state: OptimState) -> tuple[MafParams, OptimState]:
    """``v <- momentum*v + g + wd*w``; ``w <- w - lr*v``."""
    velocity = dict(state.velocity)

    def update(name: str, w: Tensor) -> Tensor:
        g = grads.get(name)
        if g is None:
            g = np.zeros(w.shape)
        elif g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        v = velocity.get(name)
        step = g + state.weight_decay * w.data
        v = step if v is None else state.momentum * v + step
        velocity[name] = v
        return Tensor(w.data - state.lr * v, requires_grad=w.requires_grad)

    new_params = params.map_tensors(update)
    return new_params, OptimState(state.lr, state.momentum, state.weight_decay, velocity)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float
    test_f1: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_acc", "test_f1")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        for r in self.records:
            writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc),
                             repr(r.test_acc), repr(r.test_f1)])
        return buf.getvalue()


def predict(params: MafParams, samples: Sequence[Sample], config: MafConfig) -> np.ndarray:
    """Eval-mode argmax predictions; ties go to the lower class index."""
    preds = []
    for start in range(0, len(samples), EVAL_BATCH):
        logits, _ = maf_forward(stack_images(samples[start:start + EVAL_BATCH]), params, config, None, EVAL)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def evaluate(params: MafParams, samples: Sequence[Sample], config: MafConfig) -> tuple[float, float, np.ndarray]:
    """(ACC, F1, predictions) with every dropout path disabled."""
    if not samples:
        raise ValueError("evaluate needs a non-empty dataset")
    preds = predict(params, samples, config)
    labels = [s.label for s in samples]
    return accuracy(preds, labels), f1_score(preds, labels), preds


def batch_loss(params: MafParams, samples: Sequence[Sample], config: MafConfig,
               rng: Rng | None, mode: str) -> tuple[Tensor, Tensor]:
    logits, _ = maf_forward(stack_images(samples), params, config, rng, mode)
    return cross_entropy(logits, [s.label for s in samples]), logits


def train(config: MafConfig, params: MafParams, train_set: Sequence[Sample],
          test_set: Sequence[Sample], tc: TrainConfig) -> tuple[MafParams, TrainHistory]:
    """Mini-batch training; deterministic in ``tc.seed``."""
    if not train_set or not test_set:
        raise ValueError("train needs non-empty train and test sets")
    bad = tc.violations()
    if bad:
        raise ValueError("invalid TrainConfig: " + "; ".join(bad))
    root = Rng(tc.seed)
    state = OptimState(tc.lr, tc.momentum, tc.weight_decay)
    history = TrainHistory()
    n = len(train_set)

    for epoch in range(tc.epochs):
        state.lr = cosine_lr(epoch, tc.lr, tc.lr_period)
        order = root.split(0, epoch).permutation(n)
        losses, correct = [], 0
        for b, start in enumerate(range(0, n, tc.batch_size)):
            batch = [train_set[i] for i in order[start:start + tc.batch_size]]
            with Tape() as tape:
                loss, logits = batch_loss(params, batch, config, root.split(1, epoch, b), TRAIN)
            grads = backward(tape, loss)
            named = params.named_tensors()
            params, state = sgd_step(params, {k: grads[t] for k, t in named.items()}, state)
            losses.append(loss.item() * len(batch))
            correct += int(np.count_nonzero(np.argmax(logits.data, -1) == [s.label for s in batch]))
        test_acc, test_f1, _ = evaluate(params, test_set, config)
        rec = EpochRecord(epoch, state.lr, float(sum(losses) / n), correct / n, test_acc, test_f1)
        history.records.append(rec)
        log.info("epoch %d lr=%.5f loss=%.4f train_acc=%.4f test_acc=%.4f test_f1=%.4f",
                 epoch, rec.lr, rec.train_loss, rec.train_acc, rec.test_acc, rec.test_f1)
    return params, history
