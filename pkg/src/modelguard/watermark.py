"""Numeric weight watermarks.

An n-digit watermark (digits 0..9) lives at n secret positions of one output
channel slice of a convolutional kernel. A linear map ``d = a*h + b`` sends the
slice's clean weight range onto [0, 9]; training adds the mean squared error
between the mapped weights and the digits to the loss, and extraction maps the
weights back, rounds and compares.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ImageBatch
from .models import DEFAULT_WATERMARK_LAYER, Classifier
from .training import TrainConfig, TrainReport, evaluate, train

WM1 = (1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 2, 1, 0)
WM2 = (3, 8, 7, 6, 8, 7, 6, 9, 9, 4, 8, 6, 5)

DEFAULT_STRENGTH = 0.01
WARMUP_EPOCHS = 2


class CapacityError(ValueError):
    pass


class DegenerateRangeError(ValueError):
    pass


class ExtractionError(Exception):
    """The suspect model does not have the layer or shape the watermark spec expects."""


@dataclass(frozen=True)
class MapParams:
    a: float
    b: float
    w_min: float
    w_max: float

    def __call__(self, h):
        return self.a * h + self.b

    def preimage(self, digit):
        return (np.asarray(digit, dtype=np.float64) - self.b) / self.a


def solve_map(w_min: float, w_max: float) -> MapParams:
    """Solve ``[w_min, w_max] * a + b = [0, 9]``."""
    w_min, w_max = float(w_min), float(w_max)
    if not w_max > w_min:
        raise DegenerateRangeError(f"weight range [{w_min}, {w_max}] is empty or inverted")
    span = w_max - w_min
    return MapParams(a=9.0 / span, b=-9.0 * w_min / span, w_min=w_min, w_max=w_max)


def select_target_component(weight) -> tuple[int, np.ndarray]:
    """Pick the output channel with the largest L1 norm.

    ``weight`` is (F, F, I, O). Returns the channel index and the row-major
    flattening of its (F, F, I) slice. Ties resolve to the lowest index.
    """
    weight = np.asarray(weight)
    if weight.ndim != 4:
        raise ValueError(f"expected a (F, F, I, O) tensor, got shape {weight.shape}")
    norms = np.abs(weight).reshape(-1, weight.shape[3]).sum(axis=0)
    index = int(np.argmax(norms))
    return index, weight[..., index].reshape(-1).copy()


def capacity(weight_shape) -> int:
    """Maximum watermark length F*F*I for a (F, F, I, O) kernel."""
    f1, f2, i, _ = weight_shape
    return int(f1 * f2 * i)


def select_positions(m: int, n: int, seed: int) -> list[int]:
    if n < 1:
        raise CapacityError("a watermark needs at least one digit")
    if n > m:
        raise CapacityError(f"{n} digits do not fit in {m} positions (maximum length is F*F*I = {m})")
    rng = np.random.default_rng(seed)
    return [int(p) for p in rng.choice(m, size=n, replace=False)]


@dataclass
class WatermarkSpec:
    """Everything the owner must keep to re-extract the watermark."""

    layer: str
    component_index: int
    positions: list[int]
    digits: list[int]
    map: MapParams
    strength: float = DEFAULT_STRENGTH
    seed: int = 0
    config_hash: Optional[str] = None

    def __post_init__(self):
        self.positions = [int(p) for p in self.positions]
        self.digits = [int(d) for d in self.digits]
        if isinstance(self.map, dict):
            self.map = MapParams(**self.map)
        if len(self.positions) != len(self.digits):
            raise ValueError("positions and digits differ in length")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("watermark positions must be distinct")
        if any(not 0 <= d <= 9 for d in self.digits):
            raise ValueError("watermark digits must lie in 0..9")
        if min(self.positions, default=0) < 0:
            raise ValueError("positions must be non-negative")
        if not self.strength >= 0:
            raise ValueError("strength must be non-negative")

    def __len__(self):
        return len(self.digits)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("strength")
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> WatermarkSpec:
        payload = dict(payload)
        payload["strength"] = payload.pop("lambda")
        payload["map"] = MapParams(**payload["map"])
        return cls(**payload)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> WatermarkSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


def plan_watermark(model: Classifier, digits: Sequence[int], layer: str = DEFAULT_WATERMARK_LAYER,
                   strength: float = DEFAULT_STRENGTH, seed: int = 0) -> WatermarkSpec:
    """Choose component, map and positions from the model's current weights."""
    try:
        weight = model.get_conv_weight(layer)
    except KeyError as exc:
        raise ExtractionError(str(exc)) from exc
    index, w = select_target_component(weight)
    params = solve_map(w.min(), w.max())
    positions = select_positions(w.size, len(digits), seed)
    return WatermarkSpec(layer, index, positions, list(digits), params, strength, seed)


def _embedded_weights(model: Classifier, spec: WatermarkSpec) -> torch.Tensor:
    try:
        weight = model.conv_weight(spec.layer)
    except KeyError as exc:
        raise ExtractionError(str(exc)) from exc
    if spec.component_index >= weight.shape[3]:
        raise ExtractionError(
            f"component {spec.component_index} out of range for {spec.layer} with {weight.shape[3]} outputs")
    w = weight[..., spec.component_index].reshape(-1)
    if max(spec.positions) >= w.numel():
        raise ExtractionError(f"position {max(spec.positions)} out of range for {w.numel()} weights")
    return w[torch.as_tensor(spec.positions)]


def wm_regularizer(model: Classifier, spec: WatermarkSpec) -> torch.Tensor:
    """Mean squared error between the digits and the mapped weights at the positions."""
    v = _embedded_weights(model, spec)
    digits = torch.as_tensor(spec.digits, dtype=v.dtype)
    return torch.mean((digits - (spec.map.a * v + spec.map.b)) ** 2)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class VerificationResult:
    digits: list[int]
    matched: bool
    raw: list[float]
    hamming: int = 0


def extract(model: Classifier, spec: WatermarkSpec) -> VerificationResult:
    """Read the digits back from ``model`` and compare them with ``spec.digits``."""
    with torch.no_grad():
        v = _embedded_weights(model, spec).detach().cpu().numpy().astype(np.float64)
    raw = spec.map(v)
    digits = np.clip(round_half_away(raw), 0, 9).astype(int)
    mismatches = int(np.sum(digits != np.asarray(spec.digits)))
    return VerificationResult(digits=digits.tolist(), matched=mismatches == 0,
                              raw=raw.tolist(), hamming=mismatches)


@dataclass
class EmbedReport:
    spec: WatermarkSpec
    accuracy: Optional[float]
    verification: VerificationResult
    mode: str
    train_reports: list[TrainReport] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.verification.matched


def embed_with_spec(model: Classifier, data: ImageBatch, spec: WatermarkSpec,
                    cfg: TrainConfig) -> TrainReport:
    """Train with ``L = L0 + strength * wm_regularizer`` using a fixed spec."""
    cfg = replace(cfg, regularizer=lambda m: wm_regularizer(m, spec), reg_strength=spec.strength)
    return train(model, data, cfg)


def embed(model: Classifier, data: ImageBatch, digits: Sequence[int], cfg: TrainConfig, *,
          mode: str = "from-scratch", layer: str = DEFAULT_WATERMARK_LAYER,
          strength: float = DEFAULT_STRENGTH, seed: int = 0, warmup_epochs: int = WARMUP_EPOCHS,
          eval_data: ImageBatch | None = None) -> EmbedReport:
    """Embed ``digits`` into ``model``.

    from-scratch: ``warmup_epochs`` of plain training, then the map is frozen
    from the warmed-up weights and the remaining ``cfg.epochs - warmup_epochs``
    epochs run with the regularizer. fine-tune: the model is assumed trained;
    the map comes from its current weights and all ``cfg.epochs`` are regularized.

    Failure to embed shows up as ``report.success == False``, not an exception.
    """
    reports = []
    if mode == "from-scratch":
        if not 0 < warmup_epochs < cfg.epochs:
            raise ValueError(f"warmup_epochs must lie in 1..{cfg.epochs - 1}")
        reports.append(train(model, data, replace(cfg, epochs=warmup_epochs, regularizer=None)))
        rest = replace(cfg, epochs=cfg.epochs - warmup_epochs, seed=cfg.seed + 1)
    elif mode == "fine-tune":
        rest = cfg
    else:
        raise ValueError(f"mode must be 'from-scratch' or 'fine-tune', got {mode!r}")
    spec = plan_watermark(model, digits, layer, strength, seed)
    reports.append(embed_with_spec(model, data, spec, rest))
    accuracy = evaluate(model, eval_data) if eval_data is not None else None
    return EmbedReport(spec, accuracy, extract(model, spec), mode, reports)


def digits_from_string(text: str) -> list[int]:
    """Parse ``"1234"`` or ``"1,2,3,4"`` into a digit list."""
    cleaned = text.replace(",", "").replace(" ", "")
    if not cleaned.isdigit():
        raise ValueError(f"watermark must be a string of digits, got {text!r}")
    return [int(c) for c in cleaned]


def digit_preimages(spec: WatermarkSpec) -> np.ndarray:
    """Weight values that map exactly onto each watermark digit."""
    return spec.map.preimage(spec.digits)

