"""Fisher-guided merging of old and new weights after an incremental step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .formats import MAGIC_FISHER, read_container, write_container
from .numgrad import Model, backprop, ce_logits_grad, forward


@dataclass
class FisherDiag:
    values: np.ndarray
    sample_count: int

    def __len__(self) -> int:
        return len(self.values)


def save_fisher(fisher: FisherDiag, path) -> None:
    write_container(path, MAGIC_FISHER, {"kind": "fisher", "length": len(fisher),
                                         "sample_count": fisher.sample_count}, {"values": fisher.values})


def load_fisher(path) -> FisherDiag:
    header, arrays = read_container(path, MAGIC_FISHER)
    return FisherDiag(arrays["values"], int(header["sample_count"]))


def per_image_grads(model: Model, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(n_images, P) gradients of each image's mean pixel CE, in one pass."""
    n = features.shape[0]
    x = features.reshape(-1, features.shape[-1])
    lab = labels.reshape(n, -1)
    _, logits, cache = forward(model, x, keep_cache=True)
    # per-image mean: scale a whole-batch sum by 1/pixels_per_image
    _, dlogits = ce_logits_grad(logits, lab.ravel())
    dlogits *= n
    return backprop(model, cache, dlogits, groups=n).reshape(n, -1)


def fisher_diagonal(model: Model, dataset, chunk: int = 16) -> FisherDiag:
    """Empirical diagonal Fisher: mean over images of squared per-image gradients.

    Gradients are of the image's mean pixel cross entropy against the step's
    visible labels.
    """
    feats, labels = dataset.features(), dataset.labels()
    n = len(feats)
    if n == 0:
        raise ConfigError("fisher_diagonal needs at least one image")
    acc = np.zeros(len(model.values))
    for lo in range(0, n, chunk):
        g = per_image_grads(model, feats[lo : lo + chunk], labels[lo : lo + chunk])
        acc += (g**2).sum(axis=0)
    return FisherDiag(acc / n, int(labels.size))


def _cumulative(counts) -> tuple[int, int]:
    counts = [int(c) for c in counts]
    if not counts:
        raise ConfigError("need at least one step's class count")
    if any(c < 1 for c in counts):
        raise ConfigError("class counts must be positive")
    return counts[-1], sum(counts[:-1])


def beta(counts) -> float:
    """Fraction of weights treated as important, from class counts [|C_0|, ..., |C_t|]."""
    new, old = _cumulative(counts)
    return 1.0 / (1.0 + math.exp((new - old - 1) / (old + new + 1)))


def omega(counts) -> float:
    """Weight given to old parameters when merging."""
    new, old = _cumulative(counts)
    return 1.0 - math.sqrt(new / (old + new + 1))


def topk_count(n: int, beta_value: float) -> int:
    return min(max(int(math.floor(beta_value * n)), 1), n)


def topk_threshold(values: np.ndarray, k: int) -> float:
    """k-th largest value (1-based) by selection."""
    values = np.asarray(values)
    if not 1 <= k <= len(values):
        raise ConfigError(f"k={k} outside [1, {len(values)}]")
    return float(np.partition(values, len(values) - k)[len(values) - k])


def merge_mask(fisher: np.ndarray, beta_value: float) -> np.ndarray:
    """Indices strictly above the TopK threshold (ties are left unmerged)."""
    fisher = np.asarray(fisher)
    return fisher > topk_threshold(fisher, topk_count(len(fisher), beta_value))


def _check_layout(theta_old, theta_new, fisher=None):
    if len(theta_old) > len(theta_new):
        raise ConfigError("old parameter vector is longer than the new one")
    if fisher is not None and len(fisher) != len(theta_old):
        raise ConfigError(f"fisher length {len(fisher)} != old parameter length {len(theta_old)}")


def selective_merge(theta_old: np.ndarray, theta_new: np.ndarray, fisher: np.ndarray,
                    beta_value: float, omega_value: float) -> np.ndarray:
    """Pull the most important old weights back towards their old values.

    Indices past ``len(theta_old)`` (rows for this step's classes) are copied
    from ``theta_new`` unchanged.
    """
    _check_layout(theta_old, theta_new, fisher)
    out = np.array(theta_new, dtype=np.float64, copy=True)
    n_old = len(theta_old)
    sel = merge_mask(fisher, beta_value)
    out[:n_old][sel] = omega_value * theta_old[sel] + (1.0 - omega_value) * theta_new[:n_old][sel]
    return out


def uniform_fusion(theta_old: np.ndarray, theta_new: np.ndarray, omega_value: float) -> np.ndarray:
    """Interpolate every weight that has an old counterpart."""
    _check_layout(theta_old, theta_new)
    out = np.array(theta_new, dtype=np.float64, copy=True)
    n_old = len(theta_old)
    out[:n_old] = omega_value * theta_old + (1.0 - omega_value) * theta_new[:n_old]
    return out
