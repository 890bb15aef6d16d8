"""Adversary bench: fingerprint forgery, fine-tuning and magnitude pruning."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .authorization import gate_batch
from .data import ImageBatch
from .fingerprint import AuthPolicy, tanh_box_search
from .models import Classifier
from .training import TrainConfig, clone, evaluate, train
from .watermark import WatermarkSpec, extract

FORGERY_METHODS = ("clean", "fgsm", "cw")
FGSM_EPS_MNIST = 0.1
FGSM_EPS_CIFAR = 8 / 255
FINETUNE_SAMPLES = 7000

CSV_COLUMNS = ("attack", "params", "accuracy", "wm_matched", "forgery_rate", "seed", "config_hash")


@dataclass
class AttackReport:
    attack: str
    params: dict
    accuracy: Optional[float] = None
    wm_matched: Optional[bool] = None
    forgery_rate: Optional[float] = None
    seed: int = 0
    config_hash: str = ""
    details: dict = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        return {
            "attack": self.attack,
            "params": json.dumps(self.params, sort_keys=True),
            "accuracy": "" if self.accuracy is None else f"{self.accuracy:.6f}",
            "wm_matched": "" if self.wm_matched is None else str(self.wm_matched).lower(),
            "forgery_rate": "" if self.forgery_rate is None else f"{self.forgery_rate:.6f}",
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


def append_csv(path, reports: Sequence[AttackReport]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new:
            writer.writeheader()
        for report in reports:
            writer.writerow(report.row())
    return path


# -- forgery ---------------------------------------------------------------

def fgsm(model: Classifier, images, labels, eps: float) -> np.ndarray:
    """Single-step untargeted sign-gradient perturbation, clipped to [0, 1]."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(images), dtype=dtype).clone().requires_grad_(True)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    loss = F.cross_entropy(model(x), y)
    (grad,) = torch.autograd.grad(loss, x)
    return torch.clamp(x + eps * grad.sign(), 0.0, 1.0).detach().cpu().numpy()


def cw_forgeries(model: Classifier, images, labels, seed: int = 0, learning_rate: float = 5e-3,
                 max_iterations: int = 1000, search_steps: int = 5, initial_const: float = 1e-2,
                 batch_size: int = 500) -> np.ndarray:
    """Targeted C&W L2 examples toward a random wrong class, no confidence term."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    k = model.num_classes
    targets = (labels + rng.integers(1, k, size=len(labels))) % k
    out = []
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        res = tanh_box_search(model, np.asarray(images)[sl], targets[sl], None, learning_rate=learning_rate,
                              alpha_range=(0.0, math.inf), initial_alpha=initial_const,
                              max_iterations=max_iterations, search_steps=search_steps, expand_upper=True)
        out.append(res.images)
    return np.concatenate(out)


def forgery_attack(model: Classifier, policy: AuthPolicy, data: ImageBatch, method: str = "clean",
                   budget: int = 1000, *, eps: float = FGSM_EPS_MNIST, seed: int = 0,
                   cw_params: dict | None = None) -> AttackReport:
    """Craft ``budget`` fake fingerprints from the first images of ``data`` and gate them."""
    if method not in FORGERY_METHODS:
        raise ValueError(f"method must be one of {FORGERY_METHODS}")
    if not 1 <= budget <= len(data):
        raise ValueError(f"budget must lie in 1..{len(data)}, got {budget}")
    batch = data.head(budget)
    params = {"method": method, "budget": budget}
    if method == "clean":
        candidates = batch.pixels
    elif method == "fgsm":
        candidates = fgsm(model, batch.pixels, batch.labels, eps)
        params["eps"] = eps
    else:
        cw_params = dict(cw_params or {})
        candidates = cw_forgeries(model, batch.pixels, batch.labels, seed=seed, **cw_params)
        params.update(cw_params)
    decisions = gate_batch(model, candidates, policy, np.random.default_rng(seed))
    admitted = np.array([d.authorized for d in decisions])
    return AttackReport(f"forgery-{method}", params, forgery_rate=float(admitted.mean()), seed=seed,
                        details={"admitted": int(admitted.sum()),
                                 "top_confidence": np.array([d.top_confidence for d in decisions])})


# -- fine-tuning -------------------------------------------------------------

def finetune_attack(model: Classifier, attack_data: ImageBatch, epochs: int, spec: WatermarkSpec | None,
                    cfg: TrainConfig | None = None, eval_data: ImageBatch | None = None,
                    seed: int = 0) -> tuple[AttackReport, Classifier]:
    """Continue training a copy of ``model`` on ``attack_data`` with the plain loss."""
    victim = clone(model)
    cfg = cfg or TrainConfig()
    history = []
    if epochs > 0:
        run = TrainConfig(epochs=epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                          optimizer=cfg.optimizer, momentum=cfg.momentum, seed=seed)
        history = train(victim, attack_data, run).loss_history
    report = AttackReport(
        "finetune", {"epochs": epochs, "samples": len(attack_data), "learning_rate": cfg.learning_rate,
                     "optimizer": cfg.optimizer},
        accuracy=evaluate(victim, eval_data) if eval_data is not None else None,
        wm_matched=extract(victim, spec).matched if spec is not None else None,
        seed=seed, details={"loss_history": history})
    return report, victim


# -- pruning ---------------------------------------------------------------

def pruned_count(rate: float, size: int) -> int:
    """ceil(rate * size), immune to representation error such as 0.3 * 2400 = 720.0000000000001."""
    return min(size, math.ceil(round(rate * size, 9)))


def prune_weights(model: Classifier, rate: float) -> dict[str, int]:
    """Zero the ``rate`` fraction of smallest-magnitude weights in every conv/dense layer, in place."""
    if not 0 <= rate < 1:
        raise ValueError(f"pruning rate must lie in [0, 1), got {rate}")
    zeroed = {}
    with torch.no_grad():
        for name in model.prunable_names:
            weight = model.layer(name).weight
            flat = weight.view(-1)
            k = pruned_count(rate, flat.numel())
            if k:
                order = torch.argsort(flat.abs(), stable=True)
                flat[order[:k]] = 0.0
            zeroed[name] = k
    return zeroed


def prune_attack(model: Classifier, rate: float, spec: WatermarkSpec | None,
                 eval_data: ImageBatch | None = None) -> tuple[AttackReport, Classifier]:
    victim = clone(model)
    zeroed = prune_weights(victim, rate)
    report = AttackReport(
        "prune", {"rate": rate},
        accuracy=evaluate(victim, eval_data) if eval_data is not None else None,
        wm_matched=extract(victim, spec).matched if spec is not None else None,
        details={"zeroed": zeroed})
    return report, victim


def prune_sweep(model: Classifier, spec: WatermarkSpec | None, eval_data: ImageBatch | None = None,
                rates: Sequence[float] = tuple(r / 10 for r in range(10))) -> list[AttackReport]:
    return [prune_attack(model, r, spec, eval_data)[0] for r in rates]


def predict_wm_survival(spec: WatermarkSpec, model: Classifier, rate: float) -> bool:
    """True when every watermark weight is strictly larger in magnitude than the
    layer's pruning threshold at ``rate``, so pruning cannot touch it."""
    magnitudes = np.sort(np.abs(model.get_conv_weight(spec.layer)).ravel())
    k = pruned_count(rate, magnitudes.size)
    if k == 0:
        return True
    threshold = magnitudes[k - 1]
    component = model.get_conv_weight(spec.layer)[..., spec.component_index].ravel()
    return bool(np.all(np.abs(component[spec.positions]) > threshold))
