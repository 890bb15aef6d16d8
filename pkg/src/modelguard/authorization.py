"""The control layer that sits after the classifier.

An input is admitted when its top-1 confidence lies within the tolerance of a
legal confidence and its top-1 class is legal; the admitted (class, confidence)
pair names the user. Anything else gets a random answer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import ImageBatch
from .fingerprint import (AuthPolicy, FingerprintRecord, GenConfig, SearchResult, allocation_for, check_fo,
                          pick_seed_indices, pinned_search)
from .models import Classifier


class AuthenticationError(Exception):
    pass


class AccessError(Exception):
    pass


@dataclass
class GateDecision:
    authorized: bool
    top_class: int
    top_confidence: float
    error: float  # E_c: distance from the top-1 confidence to the nearest legal confidence
    identity: Optional[tuple[int, float]]
    label: int
    confidences: np.ndarray


def random_output(num_classes: int, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """A uniform point on the probability simplex and its argmax.

    Normalized i.i.d. exponentials are Dirichlet(1, ..., 1); by symmetry the
    argmax is a uniformly random class.
    """
    draws = rng.standard_exponential(num_classes)
    confidences = draws / draws.sum()
    return int(np.argmax(confidences)), confidences


def decide(probs: np.ndarray, policy: AuthPolicy, rng: np.random.Generator) -> GateDecision:
    """Gate one confidence vector."""
    probs = np.asarray(probs, dtype=np.float64)
    top = int(np.argmax(probs))
    p_top = float(probs[top])
    legal = np.asarray(policy.confidences)
    gaps = np.abs(p_top - legal)
    j = int(np.argmin(gaps))
    error = float(gaps[j])
    if error < policy.tolerance and top in policy.legal_classes:
        return GateDecision(True, top, p_top, error, (top, float(legal[j])), top, probs)
    label, fake = random_output(len(probs), rng)
    return GateDecision(False, top, p_top, error, None, label, fake)


def gate_batch(model: Classifier, images, policy: AuthPolicy, rng: np.random.Generator) -> list[GateDecision]:
    probs = model.probabilities(images)
    return [decide(p, policy, rng) for p in probs]


def gate(model: Classifier, image, policy: AuthPolicy, rng: np.random.Generator) -> GateDecision:
    image = np.asarray(image, dtype=np.float32)
    if image.min() < 0 or image.max() > 1:
        raise ValueError("input must lie in the [0, 1] box")
    return gate_batch(model, image[None], policy, rng)[0]


def identity_to_user(identity: tuple[int, float], allocation: dict[int, tuple[int, float]]) -> int:
    t, c = identity
    for uid, (ft, fc) in allocation.items():
        if ft == t and abs(fc - c) < 1e-12:
            return uid
    raise AuthenticationError(f"FO {identity} is not allocated to any user")


def authenticate_image(model: Classifier, image, policy: AuthPolicy,
                       allocation: dict[int, tuple[int, float]] | None = None) -> int:
    # the gate verdict never depends on rng; rng only feeds the rejected payload
    decision = gate(model, image, policy, np.random.default_rng(0))
    if not decision.authorized:
        raise AuthenticationError(
            f"rejected: top class {decision.top_class} at confidence {decision.top_confidence:.4f} (E_c={decision.error:.4f})")
    return identity_to_user(decision.identity, allocation if allocation is not None else allocation_for(policy))


def authenticate(record: FingerprintRecord, model: Classifier, policy: AuthPolicy,
                 allocation: dict[int, tuple[int, float]] | None = None) -> int:
    """Return the user id the submitted fingerprint authenticates as."""
    return authenticate_image(model, record.image, policy, allocation)


@dataclass
class Session:
    user_id: Optional[int]
    granted: bool
    policy: AuthPolicy


def open_session(model: Classifier, image, policy: AuthPolicy,
                 allocation: dict[int, tuple[int, float]] | None = None) -> Session:
    try:
        uid = authenticate_image(model, image, policy, allocation)
    except AuthenticationError:
        return Session(None, False, policy)
    return Session(uid, True, policy)


def unauthorized_predict(model: Classifier, images, policy: AuthPolicy, rng: np.random.Generator) -> np.ndarray:
    """Labels served through the control layer.

    Admitted inputs keep the model's top-1 class; everything else gets the
    random label of its gate decision.
    """
    return np.array([d.label for d in gate_batch(model, images, policy, rng)], dtype=np.int64)


def authorized_predict(session: Session, model: Classifier, images) -> tuple[np.ndarray, np.ndarray]:
    """Plain model inference, available only to granted sessions."""
    if not session.granted:
        raise AccessError("session was not granted; submit a valid fingerprint first")
    probs = model.probabilities(images)
    return probs.argmax(axis=1), probs


def authentication_rates(model: Classifier, seed_images: ImageBatch, policy: AuthPolicy, cfg: GenConfig,
                         fos, per_fo: int, seed: int = 0) -> tuple[list[dict], SearchResult]:
    """Run one pinned search per seed image, ``per_fo`` seeds per FO, and count how many
    of the resulting fingerprints authenticate as the FO's user.

    A search that never hits its FO still yields an image; it simply fails the gate.
    """
    allocation = allocation_for(policy)
    rng = np.random.default_rng(seed)
    sources, targets, confs = [], [], []
    for t, c in fos:
        check_fo(t, c, policy)
        sources.extend(pick_seed_indices(seed_images.labels, t, per_fo, rng))
        targets.extend([t] * per_fo)
        confs.extend([c] * per_fo)
    res = pinned_search(model, seed_images.pixels[np.array(sources)], targets, confs, cfg, seed=seed)
    decisions = gate_batch(model, res.images, policy, rng)
    rows = []
    for k, (t, c) in enumerate(fos):
        uid = identity_to_user((t, float(c)), allocation)
        chunk = decisions[k * per_fo : (k + 1) * per_fo]
        ok = sum(1 for d in chunk if d.authorized and identity_to_user(d.identity, allocation) == uid)
        rows.append({"user_id": uid, "target": t, "confidence": c, "generated": per_fo, "authenticated": ok,
                     "success_rate": ok / per_fo})
    return rows, res
