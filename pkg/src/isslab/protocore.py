"""Class prototypes and pseudo labelling of background pixels.

Three labelling rules are provided for background pixels at an incremental
step, all of which pass labelled foreground pixels through untouched:

* ``naive``: argmax of the old model's probabilities.
* ``median_entropy``: the naive label, kept only if the pixel's entropy is
  below the median entropy of its predicted class; otherwise ignored.
* ``prototype_guided``: argmax of the old probabilities reweighted by a
  softmax over negative distances to the stored class prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .formats import MAGIC_PROTOTYPES, read_container, write_container
from .numgrad import Model, ce_logits_grad, forward, softmax


@dataclass
class PrototypeStore:
    prototypes: dict[int, np.ndarray] = field(default_factory=dict)
    bg_prototype: np.ndarray | None = None
    sigma_history: dict[int, float] = field(default_factory=dict)
    class_counts: dict[int, int] = field(default_factory=dict)

    @property
    def old_classes(self) -> list[int]:
        return sorted(self.prototypes)

    def matrix(self) -> np.ndarray:
        """Prototype rows ordered [background, class 1, class 2, ...]."""
        if self.bg_prototype is None:
            raise ConfigError("background prototype has not been computed")
        classes = self.old_classes
        if classes != list(range(1, len(classes) + 1)):
            raise ConfigError(f"prototype store has gaps: {classes}")
        return np.vstack([self.bg_prototype] + [self.prototypes[c] for c in classes])

    def copy(self) -> "PrototypeStore":
        return PrototypeStore(
            {c: v.copy() for c, v in self.prototypes.items()},
            None if self.bg_prototype is None else self.bg_prototype.copy(),
            dict(self.sigma_history),
            dict(self.class_counts),
        )


def save_store(store: PrototypeStore, path) -> None:
    write_container(path, MAGIC_PROTOTYPES, *_store_payload(store))


def load_store(path) -> PrototypeStore:
    header, arrays = read_container(path, MAGIC_PROTOTYPES)
    return store_from_payload(header, arrays)


def _store_payload(store: PrototypeStore) -> tuple[dict, dict]:
    classes = store.old_classes
    header = {
        "kind": "prototypes",
        "classes": classes,
        "has_bg": store.bg_prototype is not None,
        "sigma_history": {str(k): v for k, v in sorted(store.sigma_history.items())},
        "class_counts": {str(k): v for k, v in sorted(store.class_counts.items())},
    }
    arrays = {}
    if classes:
        arrays["prototypes"] = np.vstack([store.prototypes[c] for c in classes])
    if store.bg_prototype is not None:
        arrays["bg_prototype"] = store.bg_prototype
    return header, arrays


def store_from_payload(header: dict, arrays: dict) -> PrototypeStore:
    protos = {}
    if header["classes"]:
        protos = {int(c): row.copy() for c, row in zip(header["classes"], arrays["prototypes"])}
    return PrototypeStore(
        protos,
        arrays.get("bg_prototype") if header["has_bg"] else None,
        {int(k): float(v) for k, v in header["sigma_history"].items()},
        {int(k): int(v) for k, v in header["class_counts"].items()},
    )


def _pixels(features: np.ndarray) -> np.ndarray:
    return features.reshape(-1, features.shape[-1])


def embed(model: Model, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and softmax probabilities for an (..., D_in) feature array."""
    emb, logits = forward(model, _pixels(features))
    return emb, softmax(logits)


def class_means_of(emb: np.ndarray, labels: np.ndarray, classes) -> dict[int, np.ndarray]:
    labels = labels.ravel()
    out = {}
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise ConfigError(f"class {c} has no labelled pixels")
        out[int(c)] = emb[mask].mean(axis=0)
    return out


def feature_std(emb: np.ndarray, labels: np.ndarray, class_set) -> float:
    """Population std pooled over every component of the selected embeddings."""
    mask = np.isin(labels.ravel(), tuple(class_set))
    if not mask.any():
        raise ConfigError("feature_std: no pixels for the given classes")
    return float(np.std(emb[mask]))


def compute_prototypes(model: Model, dataset, store: PrototypeStore) -> PrototypeStore:
    """Record prototypes, pooled feature std and class count for ``dataset``'s step.

    ``model`` is the model at the end of that step; labels are the step's
    visible ``gt_step``.
    """
    emb, _ = forward(model, _pixels(dataset.features()))
    labels = dataset.labels()
    store.prototypes.update(class_means_of(emb, labels, dataset.class_set))
    store.sigma_history[dataset.step_index] = feature_std(emb, labels, dataset.class_set)
    store.class_counts[dataset.step_index] = len(dataset.class_set)
    return store


def compute_background_prototype(old_model: Model, dataset, store: PrototypeStore) -> np.ndarray | None:
    """Mean old-model embedding over pixels labelled 0 that the old model also calls 0.

    Keeps the previous background prototype when no pixel qualifies.
    """
    emb, probs = embed(old_model, dataset.features())
    mask = (dataset.labels().ravel() == 0) & (probs.argmax(axis=1) == 0)
    if mask.any():
        store.bg_prototype = emb[mask].mean(axis=0)
    return store.bg_prototype


def similarity_weights(emb: np.ndarray, prototypes: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Softmax over negative Euclidean distances to each prototype row."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    emb = np.atleast_2d(emb)
    diff = emb[:, None, :] - prototypes[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    z = -(dist - dist.min(axis=1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pseudo_labels(gt_step: np.ndarray, old_probs: np.ndarray, kappa: np.ndarray | None = None) -> np.ndarray:
    """Labels for one flattened batch of pixels.

    Foreground pixels keep ``gt_step``. Background pixels take the argmax of
    ``kappa * old_probs`` (or of ``old_probs`` alone if ``kappa`` is None).
    """
    gt = np.asarray(gt_step).ravel()
    scores = old_probs if kappa is None else kappa * old_probs
    guess = scores.argmax(axis=1)
    return np.where(gt > 0, gt, guess).astype(np.int64)


def naive_pseudo_labels(gt_step: np.ndarray, old_probs: np.ndarray) -> np.ndarray:
    return pseudo_labels(gt_step, old_probs)


def prototype_pseudo_labels(features: np.ndarray, gt_step: np.ndarray, old_model: Model,
                            store: PrototypeStore, tau: float = 1.0) -> np.ndarray:
    emb, probs = embed(old_model, features)
    protos = store.matrix()
    if protos.shape[0] != probs.shape[1]:
        raise ConfigError(f"old model has {probs.shape[1]} channels, store has {protos.shape[0]} prototypes")
    return pseudo_labels(gt_step, probs, similarity_weights(emb, protos, tau))


def entropy(probs: np.ndarray) -> np.ndarray:
    return -(probs * np.log(np.clip(probs, 1e-300, None))).sum(axis=1)


def class_entropy_medians(gt_step: np.ndarray, old_probs: np.ndarray) -> dict[int, float]:
    """Median old-model entropy of background pixels, grouped by predicted class."""
    bg = np.asarray(gt_step).ravel() == 0
    pred = old_probs.argmax(axis=1)[bg]
    ent = entropy(old_probs[bg])
    return {int(c): float(np.median(ent[pred == c])) for c in np.unique(pred)}


def median_entropy_pseudo_labels(gt_step: np.ndarray, old_probs: np.ndarray,
                                 medians: dict[int, float]) -> tuple[np.ndarray, np.ndarray]:
    """Naive labels plus an ignore mask for uncertain background pixels.

    A background pixel is kept when its entropy is strictly below the median
    of its predicted class. Classes missing from ``medians`` reject all pixels.
    """
    gt = np.asarray(gt_step).ravel()
    labels = pseudo_labels(gt, old_probs)
    pred = old_probs.argmax(axis=1)
    thresh = np.array([medians.get(int(c), -np.inf) for c in range(old_probs.shape[1])])
    accept = entropy(old_probs) < thresh[pred]
    ignore = (gt == 0) & ~accept
    return labels, ignore


def loss_pl(model: Model, features: np.ndarray, labels: np.ndarray, ignore_mask=None) -> float:
    """Mean cross entropy of the current model over all (non-ignored) pixels."""
    _, logits = forward(model, _pixels(features))
    loss, _ = ce_logits_grad(logits, np.asarray(labels).ravel(), ignore_mask)
    return loss
