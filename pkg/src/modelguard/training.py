"""Training and evaluation loops."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageBatch
from .models import Classifier

log = logging.getLogger(__name__)

Regularizer = Callable[[Classifier], torch.Tensor]

OPTIMIZERS = ("adam", "sgd")


class TrainingError(Exception):
    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    ``optimizer`` is ``"adam"`` (adaptive moment) or ``"sgd"`` (momentum).
    When ``regularizer`` is set the optimized loss is
    ``cross_entropy + reg_strength * regularizer(model)``.
    """

    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    regularizer: Optional[Regularizer] = field(default=None, repr=False, compare=False)
    reg_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.reg_strength < 0:
            raise ValueError("reg_strength must be >= 0")

    def settings(self) -> dict:
        out = asdict(self)
        out.pop("regularizer")
        out["regularized"] = self.regularizer is not None
        return out


@dataclass
class TrainReport:
    final_accuracy: float
    loss_history: list[float]
    settings: dict


def make_optimizer(model: Classifier, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)


def objective(model: Classifier, pixels: torch.Tensor, labels: torch.Tensor,
              regularizer: Optional[Regularizer] = None, reg_strength: float = 0.0) -> torch.Tensor:
    """Mean cross-entropy plus the optional weighted regularizer."""
    loss = F.cross_entropy(model(pixels), labels)
    if regularizer is not None:
        loss = loss + reg_strength * regularizer(model)
    return loss


def train(model: Classifier, data: ImageBatch, cfg: TrainConfig) -> TrainReport:
    """Train ``model`` in place. Shuffling is driven by ``cfg.seed`` only."""
    if len(data) == 0:
        raise ValueError("training data is empty")
    dtype = next(model.parameters()).dtype
    x_all = torch.as_tensor(data.pixels, dtype=dtype)
    y_all = torch.as_tensor(data.labels)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    history = []
    accuracy = 0.0
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(data), generator=gen)
        total, correct = 0.0, 0
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            opt.zero_grad()
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if cfg.regularizer is not None:
                loss = loss + cfg.reg_strength * cfg.regularizer(model)
            if not torch.isfinite(loss):
                raise TrainingError(epoch, f"non-finite loss {loss.item()}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        history.append(total / len(data))
        accuracy = correct / len(data)
        log.info("epoch %d/%d loss %.4f train acc %.4f", epoch + 1, cfg.epochs, history[-1], accuracy)
        if not math.isfinite(history[-1]):
            raise TrainingError(epoch, "non-finite epoch loss")
    return TrainReport(final_accuracy=accuracy, loss_history=history, settings=cfg.settings())


def evaluate(model: Classifier, data: ImageBatch) -> float:
    """Fraction of items whose top-1 prediction equals the label."""
    if len(data) == 0:
        raise ValueError("evaluation data is empty")
    predictions = model.predict(data.pixels)
    return float(np.mean(predictions == data.labels))


def clone(model: Classifier) -> Classifier:
    return copy.deepcopy(model)
