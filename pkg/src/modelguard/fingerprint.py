"""User fingerprints: adversarial examples pinned to a (class, confidence) pair.

Generation minimizes, over the tanh-reparameterized image
``x' = (tanh(delta) + 1) / 2``::

    ||x' - x||^2 + alpha * (max(max_{k != t} Z_k - Z_t, 0) + |P_t(x') - c|)

where Z are logits and P softmax confidences. The logit term makes ``t`` the
top class; the second term holds its confidence at ``c``. ``alpha`` is tuned per
image by bisection inside a fixed range.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ImageBatch
from .models import Classifier

log = logging.getLogger(__name__)

LOW_CONFIDENCE_BAND = (0.10, 0.50)
DEFAULT_CONFIDENCES = (0.20, 0.30, 0.40)
DEFAULT_TOLERANCE = 0.01


@dataclass(frozen=True)
class AuthPolicy:
    """Legal classes, legal confidences and the tolerable confidence error."""

    legal_classes: tuple[int, ...] = tuple(range(10))
    confidences: tuple[float, ...] = DEFAULT_CONFIDENCES
    tolerance: float = DEFAULT_TOLERANCE

    def __post_init__(self):
        object.__setattr__(self, "legal_classes", tuple(sorted(int(k) for k in self.legal_classes)))
        object.__setattr__(self, "confidences", tuple(sorted(float(c) for c in self.confidences)))
        if not self.legal_classes:
            raise ValueError("at least one legal class is required")
        if not self.confidences:
            raise ValueError("at least one legal confidence is required")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        lo, hi = LOW_CONFIDENCE_BAND
        for c in self.confidences:
            if not lo < c < hi:
                raise ValueError(f"confidence {c} is outside the low-confidence band ({lo}, {hi})")
        for a, b in zip(self.confidences, self.confidences[1:]):
            if not b - a > 2 * self.tolerance:
                raise ValueError(f"confidences {a} and {b} are closer than 2 * tolerance; windows would overlap")

    @classmethod
    def default(cls, num_classes: int = 10) -> AuthPolicy:
        return cls(legal_classes=tuple(range(num_classes)))

    @property
    def T(self) -> int:
        return len(self.confidences)

    def to_dict(self) -> dict:
        return {"legal_classes": list(self.legal_classes), "confidences": list(self.confidences),
                "tolerance": self.tolerance}

    @classmethod
    def from_dict(cls, payload: dict) -> AuthPolicy:
        return cls(tuple(payload["legal_classes"]), tuple(payload["confidences"]), payload["tolerance"])


@dataclass
class GenConfig:
    learning_rate: float = 0.005
    alpha_range: tuple[float, float] = (0.0, 40.0)
    initial_alpha: float = 20.0
    max_iterations: int = 1000
    tolerance: float = 0.005
    search_steps: int = 5
    abort_early: bool = True
    # pixel-noise scale for restarting examples that have not hit yet; 0 disables
    random_start: float = 0.3
    warm_start: bool = False

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not lo < self.initial_alpha < hi:
            raise ValueError(f"initial_alpha {self.initial_alpha} must lie inside {self.alpha_range}")
        if not self.tolerance > 0:
            raise ValueError("generation tolerance must be positive")
        if self.max_iterations < 1 or self.search_steps < 1:
            raise ValueError("max_iterations and search_steps must be >= 1")
        if self.random_start < 0:
            raise ValueError("random_start must be >= 0")

    @classmethod
    def for_mnist(cls) -> GenConfig:
        return cls()

    @classmethod
    def for_cifar(cls) -> GenConfig:
        return cls(learning_rate=0.001, alpha_range=(0.0, 1.0), initial_alpha=0.5)


class GenerationError(Exception):
    """No candidate met both the class and the confidence condition."""

    def __init__(self, candidate: np.ndarray, top_class: int, residual: float):
        self.candidate = candidate
        self.top_class = top_class
        self.residual = residual
        super().__init__(f"generation failed: best candidate has top class {top_class}, |P_t - c| = {residual:.4f}")


@dataclass
class FingerprintRecord:
    user_id: int
    image: np.ndarray
    target: int
    confidence: float
    seed: int = 0
    iterations: int = 0
    alpha: float = float("nan")
    residual: float = float("nan")
    distortion: float = float("nan")
    source_index: int = -1

    @property
    def batch(self) -> ImageBatch:
        return ImageBatch(self.image[None], np.array([self.target]))

    def manifest_entry(self) -> dict:
        return {"user_id": self.user_id, "target": self.target, "confidence": self.confidence,
                "seed": self.seed, "iterations": self.iterations, "alpha": self.alpha,
                "residual": self.residual, "distortion": self.distortion,
                "source_index": self.source_index}


@dataclass
class SearchResult:
    """Per-image output of the tanh-box search (arrays of length N)."""

    images: np.ndarray
    success: np.ndarray
    alpha: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    top_class: np.ndarray
    distortion: np.ndarray


def to_tanh_space(x: torch.Tensor) -> torch.Tensor:
    return torch.atanh((2 * x - 1) * (1 - 1e-6))


def from_tanh_space(delta: torch.Tensor) -> torch.Tensor:
    return (torch.tanh(delta) + 1) / 2


def tanh_box_search(model: Classifier, images, targets, confidences=None, *, learning_rate: float,
                    alpha_range: tuple[float, float], initial_alpha: float, max_iterations: int,
                    search_steps: int, tolerance: float = 0.0, abort_early: bool = True,
                    expand_upper: bool = False, warm_start: bool = False,
                    random_start: float = 0.0, seed: int = 0) -> SearchResult:
    """Batched C&W-style search over the [0, 1] box.

    With ``confidences`` the objective carries the confidence control term and
    success needs ``|P_t - c| <= tolerance``; without it this is the plain
    targeted L2 attack. ``expand_upper`` multiplies alpha by 10 while no success
    has been seen, as in the original attack; otherwise alpha is bisected inside
    ``alpha_range``. With ``warm_start`` each alpha step resumes from the
    previous step's last iterate instead of the seed image. ``random_start`` > 0
    adds Gaussian pixel noise of that scale to the starting point of every
    example that has no hit yet (distortion is still measured from the seed).
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    n = len(x)
    t = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    c = None if confidences is None else torch.as_tensor(np.asarray(confidences), dtype=dtype)
    rows = torch.arange(n)
    lo = torch.full((n,), float(alpha_range[0]), dtype=torch.float64)
    hi = torch.full((n,), float(alpha_range[1]), dtype=torch.float64)
    if expand_upper:
        hi.fill_(math.inf)
    alpha = torch.full((n,), float(initial_alpha), dtype=torch.float64)

    best = x.clone()
    best_l2 = torch.full((n,), math.inf, dtype=torch.float64)
    found = torch.zeros(n, dtype=torch.bool)
    best_alpha = torch.full((n,), math.nan, dtype=torch.float64)
    best_iter = torch.zeros(n, dtype=torch.long)
    # closest miss, kept for failure reports
    fallback = x.clone()
    fallback_score = torch.full((n,), math.inf, dtype=torch.float64)
    total_iters = 0
    base = to_tanh_space(x)
    start = base
    noise_gen = torch.Generator().manual_seed(seed)

    for _ in range(search_steps):
        if random_start > 0:
            pixels = from_tanh_space(start)
            jitter = random_start * torch.randn(pixels.shape, generator=noise_gen, dtype=pixels.dtype)
            jittered = to_tanh_space(torch.clamp(pixels + jitter, 0, 1))
            start = torch.where(found.view(-1, *([1] * (x.dim() - 1))), start, jittered)
        delta = start.clone().requires_grad_(True)
        opt = torch.optim.Adam([delta], lr=learning_rate)
        round_success = torch.zeros(n, dtype=torch.bool)
        previous = math.inf
        a = alpha.to(dtype)
        for it in range(max_iterations):
            adv = from_tanh_space(delta)
            logits = model(adv)
            probs = torch.softmax(logits, dim=1)
            z_t = logits[rows, t]
            others = logits.clone()
            others[rows, t] = -math.inf
            g = torch.clamp(others.max(dim=1).values - z_t, min=0)
            p_t = probs[rows, t]
            if c is not None:
                g = g + torch.abs(p_t - c)
            dist = ((adv - x) ** 2).flatten(1).sum(1)
            loss = (dist + a * g).sum()
            (delta.grad,) = torch.autograd.grad(loss, delta)
            opt.step()
            total_iters += 1

            with torch.no_grad():
                top = logits.argmax(1)
                on_target = top == t
                residual = torch.abs(p_t - c) if c is not None else torch.zeros_like(p_t)
                ok = on_target & (residual <= tolerance) if c is not None else on_target
                d64 = dist.double()
                better = ok & (d64 < best_l2)
                if better.any():
                    best[better] = adv.detach()[better]
                    best_l2[better] = d64[better]
                    best_alpha[better] = alpha[better]
                    best_iter[better] = total_iters
                found |= ok
                round_success |= ok
                score = torch.where(on_target, residual.double(), 1.0 + g.double())
                closer = score < fallback_score
                fallback[closer] = adv.detach()[closer]
                fallback_score[closer] = score[closer]

            if abort_early and it % max(1, max_iterations // 10) == 0:
                current = loss.item()
                if current > previous * 0.9999:
                    break
                previous = current

        if warm_start:
            # examples still without a hit keep walking; the rest restart from the seed image
            keep = (~found).view(-1, *([1] * (x.dim() - 1)))
            start = torch.where(keep, delta.detach(), base)
        hi = torch.where(round_success, torch.minimum(hi, alpha), hi)
        lo = torch.where(round_success, lo, torch.maximum(lo, alpha))
        alpha = torch.where(torch.isfinite(hi), (lo + hi) / 2, alpha * 10)

    out = torch.where(found.view(-1, *([1] * (x.dim() - 1))), best, fallback)
    with torch.no_grad():
        logits = model(out)
        probs = torch.softmax(logits, dim=1)
    p_t = probs[rows, t]
    residual = torch.abs(p_t - c) if c is not None else torch.zeros_like(p_t)
    return SearchResult(
        images=out.detach().cpu().numpy(),
        success=found.numpy(),
        alpha=best_alpha.numpy(),
        iterations=best_iter.numpy(),
        residual=residual.double().numpy(),
        top_class=logits.argmax(1).numpy(),
        distortion=((out - x) ** 2).flatten(1).sum(1).sqrt().double().numpy(),
    )


def pinned_search(model: Classifier, images, targets, confidences, cfg: GenConfig, seed: int = 0) -> SearchResult:
    return tanh_box_search(model, images, targets, confidences, learning_rate=cfg.learning_rate,
                           alpha_range=cfg.alpha_range, initial_alpha=cfg.initial_alpha,
                           max_iterations=cfg.max_iterations, search_steps=cfg.search_steps,
                           tolerance=cfg.tolerance, abort_early=cfg.abort_early,
                           random_start=cfg.random_start, warm_start=cfg.warm_start, seed=seed)


def check_fo(target: int, confidence: float, policy: AuthPolicy) -> None:
    if target not in policy.legal_classes:
        raise ValueError(f"class {target} is not in the legal class set")
    if not any(math.isclose(confidence, c, abs_tol=1e-12) for c in policy.confidences):
        raise ValueError(f"confidence {confidence} is not in the legal confidence set {policy.confidences}")


def generate_fingerprint(model: Classifier, image, target: int, confidence: float,
                         cfg: GenConfig | None = None, policy: AuthPolicy | None = None,
                         user_id: int = 0, seed: int = 0) -> FingerprintRecord:
    """Turn one seed image into a fingerprint classified as ``target`` at ``confidence``."""
    cfg = cfg or GenConfig()
    policy = policy or AuthPolicy.default(model.num_classes)
    check_fo(target, confidence, policy)
    image = np.asarray(image, dtype=np.float32)
    if image.min() < 0 or image.max() > 1:
        raise ValueError("seed image must lie in the [0, 1] box")
    res = pinned_search(model, image[None], [target], [confidence], cfg, seed=seed)
    if not res.success[0]:
        raise GenerationError(res.images[0], int(res.top_class[0]), float(res.residual[0]))
    return FingerprintRecord(user_id=user_id, image=res.images[0], target=target, confidence=confidence,
                             seed=seed, iterations=int(res.iterations[0]), alpha=float(res.alpha[0]),
                             residual=float(res.residual[0]), distortion=float(res.distortion[0]))


def allocate(K: int, T: int, confidences: Sequence[float]) -> dict[int, tuple[int, float]]:
    """User ``i*T + j`` gets class ``i`` and confidence ``c_j`` (j counted from 1)."""
    if len(confidences) != T:
        raise ValueError(f"expected {T} confidences, got {len(confidences)}")
    return {i * T + j: (i, float(confidences[j - 1])) for i in range(K) for j in range(1, T + 1)}


def allocation_for(policy: AuthPolicy) -> dict[int, tuple[int, float]]:
    K = max(policy.legal_classes) + 1
    table = allocate(K, policy.T, policy.confidences)
    return {u: fo for u, fo in table.items() if fo[0] in policy.legal_classes}


def capacity(K: int, epsilon: float, z1: float, z2: float) -> int:
    """Number of users the confidence band (z1, z2) supports at tolerance epsilon."""
    if not z1 < z2:
        raise ValueError("need z1 < z2")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    # the nudge absorbs binary representation error, e.g. 0.4 / 0.02 = 19.999...
    return int(math.floor(K * (z2 - z1) / (2 * epsilon) + 1e-9))


def pick_seed_indices(labels: np.ndarray, target: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Random seed-image indices whose ground truth is not ``target``."""
    pool = np.flatnonzero(labels != target)
    if len(pool) < count:
        raise ValueError(f"only {len(pool)} seed images available for class {target}, need {count}")
    return rng.choice(pool, size=count, replace=False)


def validate_record(model: Classifier, record: FingerprintRecord, tolerance: float) -> bool:
    """Fresh forward pass: top-1 is the target and its confidence within tolerance of c."""
    probs = model.probabilities(record.image[None])[0]
    top = int(np.argmax(probs))
    return top == record.target and abs(float(probs[top]) - record.confidence) < tolerance


@dataclass
class FingerprintLibrary:
    records: dict[int, FingerprintRecord]
    failures: list[dict] = field(default_factory=list)
    policy: Optional[AuthPolicy] = None
    config_hash: Optional[str] = None

    def __len__(self):
        return len(self.records)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for uid in sorted(self.records):
            rec = self.records[uid]
            rel = Path(f"user_{uid:04d}") / "image.npy"
            (directory / rel).parent.mkdir(parents=True, exist_ok=True)
            np.save(directory / rel, rec.image.astype(np.float32))
            entry = rec.manifest_entry()
            entry["image"] = rel.as_posix()
            entries.append(entry)
        manifest = {"records": entries, "failures": self.failures,
                    "policy": self.policy.to_dict() if self.policy else None,
                    "config_hash": self.config_hash}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> FingerprintLibrary:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        records = {}
        for entry in manifest["records"]:
            entry = dict(entry)
            image = np.load(directory / entry.pop("image"))
            records[entry["user_id"]] = FingerprintRecord(image=image, **entry)
        policy = AuthPolicy.from_dict(manifest["policy"]) if manifest.get("policy") else None
        return cls(records, manifest.get("failures", []), policy, manifest.get("config_hash"))


def build_library(model: Classifier, seed_images: ImageBatch, policy: AuthPolicy, cfg: GenConfig | None = None,
                  seed: int = 0, retries: int = 3) -> FingerprintLibrary:
    """Generate and verify one fingerprint per FO of ``policy``.

    FOs that keep failing after ``retries`` fresh seed images land in
    ``library.failures``; the rest are returned.
    """
    cfg = cfg or GenConfig()
    if len(seed_images) == 0:
        raise ValueError("seed image pool is empty")
    table = allocation_for(policy)
    rng = np.random.default_rng(seed)
    pending = sorted(table)
    records: dict[int, FingerprintRecord] = {}
    attempts_left = {u: 1 + retries for u in pending}
    last_error: dict[int, float] = {}
    while pending:
        sources = np.array([pick_seed_indices(seed_images.labels, table[u][0], 1, rng)[0] for u in pending])
        targets = [table[u][0] for u in pending]
        confs = [table[u][1] for u in pending]
        res = pinned_search(model, seed_images.pixels[sources], targets, confs, cfg,
                            seed=int(rng.integers(2**31)))
        still = []
        for k, uid in enumerate(pending):
            attempts_left[uid] -= 1
            rec = FingerprintRecord(user_id=uid, image=res.images[k], target=targets[k], confidence=confs[k],
                                    seed=seed, iterations=int(res.iterations[k]), alpha=float(res.alpha[k]),
                                    residual=float(res.residual[k]), distortion=float(res.distortion[k]),
                                    source_index=int(sources[k]))
            if res.success[k] and validate_record(model, rec, policy.tolerance):
                records[uid] = rec
            else:
                last_error[uid] = float(res.residual[k])
                if attempts_left[uid] > 0:
                    still.append(uid)
        pending = still
    failures = [{"user_id": u, "target": table[u][0], "confidence": table[u][1], "residual": last_error[u]}
                for u in sorted(table) if u not in records]
    for f in failures:
        log.warning("fingerprint for user %d (%d, %.2f) failed", f["user_id"], f["target"], f["confidence"])
    return FingerprintLibrary(records, failures, policy)
