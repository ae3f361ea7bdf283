"""Prototype replay for old classes: noisy copies and pairwise mixtures.

Only the classifier sees augmented prototypes; they carry no pixels, so the
extractor receives no gradient from this loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .numgrad import Model, classifier_grad, soft_ce_logits_grad
from .protocore import PrototypeStore


@dataclass
class AugmentedPrototype:
    vector: np.ndarray
    source_class: int
    kind: str  # "self" | "inter"
    partner_class: int | None = None
    lam: float | None = None


def scaling_factor(t: int, store: PrototypeStore) -> float:
    """Noise scale for step ``t`` from the recorded per-step feature stds.

    t == 1: sigma_0. t > 1: the class-count weighted blend
    (|C_{t-1}| sigma_{t-1} + sum_{m<=t-2} |C_m| sigma_{t-2}) / sum_{m<=t-1} |C_m|.
    """
    if t < 1:
        raise ConfigError("scaling factor is defined for t >= 1")
    sig, counts = store.sigma_history, store.class_counts
    needed = [t - 1] if t == 1 else [t - 1, t - 2]
    missing = [m for m in needed if m not in sig] + [m for m in range(t) if m not in counts]
    if missing:
        raise ConfigError(f"missing sigma/count history for steps {sorted(set(missing))}")
    if t == 1:
        return float(sig[0])
    older = sum(counts[m] for m in range(t - 1))
    total = older + counts[t - 1]
    return float((counts[t - 1] * sig[t - 1] + older * sig[t - 2]) / total)


def self_augment(eta: np.ndarray, s_t: float, rng, source_class: int = -1) -> AugmentedPrototype:
    if s_t < 0:
        raise ConfigError("scale must be non-negative")
    mu = rng.standard_normal(np.shape(eta))
    return AugmentedPrototype(eta + mu * s_t, source_class, "self")


def inter_augment(eta: np.ndarray, eta_partner: np.ndarray, rng, source_class: int = -1,
                  partner_class: int = -2) -> AugmentedPrototype:
    if source_class == partner_class:
        raise InputError("inter augmentation needs two distinct classes")
    lam = float(rng.random())
    return AugmentedPrototype(lam * eta + (1.0 - lam) * eta_partner, source_class, "inter", partner_class, lam)


def augment_all(store: PrototypeStore, s_t: float, self_rng=None, inter_rng=None) -> list[AugmentedPrototype]:
    """One self and one inter sample per old foreground class.

    Draw order per class (ascending id): self noise from ``self_rng``; partner
    index then lambda from ``inter_rng``. Pass None to skip a kind.
    """
    classes = store.old_classes
    out = []
    for c in classes:
        eta = store.prototypes[c]
        if self_rng is not None:
            out.append(self_augment(eta, s_t, self_rng, c))
        if inter_rng is not None and len(classes) > 1:
            others = [o for o in classes if o != c]
            partner = others[int(inter_rng.integers(len(others)))]
            out.append(inter_augment(eta, store.prototypes[partner], inter_rng, c, partner))
    return out


def loss_pa(model: Model, store: PrototypeStore, s_t: float, self_rng=None,
            inter_rng=None) -> tuple[float, np.ndarray]:
    """Replay loss on augmented prototypes and its (classifier-only) gradient.

    Each self sample contributes CE(., c); each mixture contributes
    lam * CE(., c) + (1 - lam) * CE(., c'). The sum is divided by the number
    of old foreground classes.
    """
    n_old = len(store.old_classes)
    grad = np.zeros(len(model.values))
    if n_old == 0:
        return 0.0, grad
    augs = augment_all(store, s_t, self_rng, inter_rng)
    if not augs:
        return 0.0, grad
    vecs = np.vstack([a.vector for a in augs])
    targets = np.zeros((len(augs), model.num_classes))
    for row, a in enumerate(augs):
        if a.kind == "self":
            targets[row, a.source_class] = 1.0
        else:
            targets[row, a.source_class] += a.lam
            targets[row, a.partner_class] += 1.0 - a.lam
    w, b = model.classifier()
    logits = vecs @ w.T + b
    loss, dlogits = soft_ce_logits_grad(logits, targets, 1.0 / n_old)
    return loss, classifier_grad(model, vecs, dlogits)
