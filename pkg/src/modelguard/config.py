"""Experiment configuration: defaults, JSON loading with field-path errors, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DATA_ENV
from .fingerprint import DEFAULT_CONFIDENCES, DEFAULT_TOLERANCE
from .watermark import DEFAULT_STRENGTH, WARMUP_EPOCHS, WM1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9


@dataclass
class WatermarkSection:
    digits: list = field(default_factory=lambda: list(WM1))
    layer: str = "conv 2"
    strength: float = DEFAULT_STRENGTH
    seed: int = 7
    mode: str = "from-scratch"
    warmup_epochs: int = WARMUP_EPOCHS
    finetune_epochs: int = 20


@dataclass
class PolicySection:
    legal_classes: list = field(default_factory=lambda: list(range(10)))
    confidences: list = field(default_factory=lambda: list(DEFAULT_CONFIDENCES))
    tolerance: float = DEFAULT_TOLERANCE


@dataclass
class GenerationSection:
    learning_rate: float = 0.005
    alpha_range: list = field(default_factory=lambda: [0.0, 40.0])
    initial_alpha: float = 20.0
    max_iterations: int = 1000
    tolerance: float = 0.005
    search_steps: int = 5
    random_start: float = 0.3
    retries: int = 3
    eval_per_fo: int = 20


@dataclass
class AttackSection:
    forgery_budget: int = 1000
    cw_budget: int = 200
    fgsm_eps: float = 0.1
    finetune_epochs: list = field(default_factory=lambda: [30, 50])
    finetune_samples: int = 7000
    prune_rates: list = field(default_factory=lambda: [r / 10 for r in range(10)])


@dataclass
class ExperimentConfig:
    dataset: str = field(default_factory=lambda: os.environ.get(DATA_ENV, "data/mnist"))
    model: str = "lenet5"
    seed: int = 0
    out: str = "runs/default"
    full_fidelity: bool = False
    train: TrainSection = field(default_factory=TrainSection)
    watermark: WatermarkSection = field(default_factory=WatermarkSection)
    policy: PolicySection = field(default_factory=PolicySection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    attacks: AttackSection = field(default_factory=AttackSection)

    def apply_full_fidelity(self) -> None:
        """Switch to full-scale experiment sizes."""
        self.full_fidelity = True
        self.train.epochs = 50
        self.generation.eval_per_fo = 100
        self.attacks.forgery_budget = 10000
        self.attacks.cw_budget = 10000

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that influences results (output location excluded)."""
        payload = self.to_dict()
        payload.pop("out")
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _merge(target: Any, updates: dict, path: str) -> None:
    if not isinstance(updates, dict):
        raise ConfigError(path or "<root>", "expected an object")
    known = {f.name: f for f in dataclasses.fields(target)}
    for key, value in updates.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(where, "unknown field")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, where)
            continue
        if isinstance(current, bool):
            ok = isinstance(value, bool)
        elif isinstance(current, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(current, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif isinstance(current, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise ConfigError(where, f"expected {type(current).__name__}, got {type(value).__name__}")
        setattr(target, key, value)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(str(path), "config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON ({exc})") from None
        _merge(cfg, raw, "")
    if overrides:
        _merge(cfg, overrides, "")
    return cfg
