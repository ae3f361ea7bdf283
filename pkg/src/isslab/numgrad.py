"""Per-pixel MLP segmenter with hand-written forward/backward and plain SGD.

Every trainable number lives in one flat float64 vector (``ParamVector``).
The extractor layers come first, followed by the classifier rows. Each
classifier row is stored as ``[weights..., bias]`` and rows are appended in the
order classes are introduced, so the parameter vector of an earlier step is
always an exact prefix of a later one. Weight merging relies on that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    shape: tuple[int, ...]
    step: int | None = None  # classifier rows: step that introduced them

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass
class ParamVector:
    values: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.values)

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        seg = self.segment(name)
        return self.values[seg.start : seg.stop].reshape(seg.shape)

    def check(self) -> None:
        pos = 0
        for seg in self.segments:
            if seg.start != pos:
                raise ConfigError(f"segment {seg.name} starts at {seg.start}, expected {pos}")
            pos = seg.stop
        if pos != len(self.values):
            raise ConfigError("segments do not cover the parameter vector")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.segments))


class Model:
    """MLP feature extractor followed by a linear per-pixel classifier.

    Hidden layers use ReLU; the embedding layer is linear. Output channel 0 is
    background, channel ``c`` is foreground class ``c``.
    """

    def __init__(self, params: ParamVector, n_layers: int):
        params.check()
        self.params = params
        self.n_layers = n_layers

    @property
    def values(self) -> np.ndarray:
        return self.params.values

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params.view(f"layer{i}.W"), self.params.view(f"layer{i}.b")

    @property
    def in_dim(self) -> int:
        return self.params.segment("layer0.W").shape[1]

    @property
    def emb_dim(self) -> int:
        return self.params.segment(f"layer{self.n_layers - 1}.W").shape[0]

    @property
    def classifier_start(self) -> int:
        return self.params.segment(f"layer{self.n_layers - 1}.b").stop

    @property
    def num_classes(self) -> int:
        return (len(self.values) - self.classifier_start) // (self.emb_dim + 1)

    @property
    def extractor_size(self) -> int:
        return self.classifier_start

    def classifier_matrix(self) -> np.ndarray:
        """(K, D_emb + 1) view: weights in the first columns, bias last."""
        return self.values[self.classifier_start :].reshape(self.num_classes, self.emb_dim + 1)

    def classifier(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.classifier_matrix()
        return m[:, :-1], m[:, -1]

    def copy(self) -> "Model":
        return Model(self.params.copy(), self.n_layers)


def init_model(
    rng: np.random.Generator,
    n_classes: int,
    in_dim: int = 8,
    hidden: tuple[int, ...] = (32, 32),
    emb_dim: int = 16,
    cls_std: float = 0.01,
    step: int = 0,
) -> Model:
    """He-initialised extractor; classifier rows ~ N(0, cls_std^2), zero bias."""
    dims = [in_dim, *hidden, emb_dim]
    segments: list[Segment] = []
    chunks: list[np.ndarray] = []
    pos = 0
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        gain = 2.0 if i < len(dims) - 2 else 1.0
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(gain / fan_in)
        segments.append(Segment(f"layer{i}.W", pos, (fan_out, fan_in)))
        pos += w.size
        segments.append(Segment(f"layer{i}.b", pos, (fan_out,)))
        pos += fan_out
        chunks += [w.ravel(), np.zeros(fan_out)]
    rows = _new_rows(rng, n_classes, emb_dim, cls_std)
    segments.append(Segment(f"classifier.step{step}", pos, rows.shape, step))
    chunks.append(rows.ravel())
    return Model(ParamVector(np.concatenate(chunks), segments), len(dims) - 1)


def _new_rows(rng, k: int, emb_dim: int, std: float) -> np.ndarray:
    rows = np.zeros((k, emb_dim + 1))
    rows[:, :-1] = rng.standard_normal((k, emb_dim)) * std
    return rows


def extend_classifier(model: Model, k_new: int, rng: np.random.Generator, step: int,
                      std: float = 0.01) -> Model:
    """Return a new model with ``k_new`` output rows appended for ``step``.

    Existing parameters keep their indices and values. Rows added twice within
    the same step land in one segment, so two extensions by 1 give the same
    layout as one extension by 2.
    """
    if k_new < 1:
        raise ConfigError("k_new must be >= 1")
    rows = _new_rows(rng, k_new, model.emb_dim, std)
    values = np.concatenate([model.values, rows.ravel()])
    segments = list(model.params.segments)
    last = segments[-1]
    if last.step == step and last.name.startswith("classifier."):
        segments[-1] = Segment(last.name, last.start, (last.shape[0] + k_new, last.shape[1]), step)
    else:
        segments.append(Segment(f"classifier.step{step}", len(model.values), rows.shape, step))
    return Model(ParamVector(values, segments), model.n_layers)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each extractor layer
    pre: list[np.ndarray]  # pre-activations of each extractor layer
    embeddings: np.ndarray
    logits: np.ndarray


def forward(model: Model, x: np.ndarray, keep_cache: bool = False):
    """Return ``(embeddings, logits)`` for pixels ``x`` of shape (N, D_in).

    With ``keep_cache`` the third element is a :class:`ForwardCache` for
    :func:`backprop`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ConfigError(f"expected (N, {model.in_dim}) pixels, got {x.shape}")
    if x.shape[0] < 1:
        raise ConfigError("need at least one pixel")
    inputs, pre = [], []
    h = x
    for i in range(model.n_layers):
        w, b = model.layer(i)
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < model.n_layers - 1 else z
    w, b = model.classifier()
    logits = h @ w.T + b
    if keep_cache:
        return h, logits, ForwardCache(inputs, pre, h, logits)
    return h, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels: np.ndarray, k: int, keep: np.ndarray) -> None:
    bad = keep & ((labels < 0) | (labels >= k))
    if bad.any():
        raise InputError(f"label {labels[bad][0]} out of range [0, {k})")


def cross_entropy(probs: np.ndarray, labels, ignore_mask=None) -> float:
    """Mean of -log p[i, label_i] over non-ignored rows (0 if none remain)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    keep = np.ones(len(labels), bool) if ignore_mask is None else ~np.asarray(ignore_mask, bool).ravel()
    _check_labels(labels, probs.shape[1], keep)
    if not keep.any():
        return 0.0
    picked = probs[np.flatnonzero(keep), labels[keep]]
    return float(-np.log(picked).mean())


def ce_logits_grad(logits: np.ndarray, labels, ignore_mask=None) -> tuple[float, np.ndarray]:
    """Cross entropy from logits and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = logits.shape
    keep = np.ones(n, bool) if ignore_mask is None else ~np.asarray(ignore_mask, bool).ravel()
    _check_labels(labels, k, keep)
    n_keep = int(keep.sum())
    grad = np.zeros_like(logits)
    if n_keep == 0:
        return 0.0, grad
    logp = log_softmax(logits)
    rows = np.flatnonzero(keep)
    loss = -logp[rows, labels[keep]].sum() / n_keep
    grad[rows] = np.exp(logp[rows])
    grad[rows, labels[keep]] -= 1.0
    grad /= n_keep
    return float(loss), grad


def soft_ce_logits_grad(logits: np.ndarray, targets: np.ndarray, row_weight: float = 1.0):
    """Sum over rows of -sum_k targets[k] log p[k], scaled by ``row_weight``."""
    logp = log_softmax(logits)
    loss = -(targets * logp).sum() * row_weight
    grad = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) * row_weight
    return float(loss), grad


def backprop(model: Model, cache: ForwardCache, dlogits: np.ndarray, groups: int = 1) -> np.ndarray:
    """Gradient of a loss with upstream ``dlogits`` w.r.t. the parameter vector.

    With ``groups > 1`` the N rows are split into equal contiguous groups and a
    (groups, P) array of per-group gradients is returned (used for per-image
    Fisher).
    """
    n = dlogits.shape[0]
    if n % groups:
        raise ConfigError("rows do not split evenly into groups")
    out = np.zeros((groups, len(model.values)))

    def put(name, g):
        seg = model.params.segment(name)
        out[:, seg.start : seg.stop] = g.reshape(groups, -1)

    def outer(delta, act):
        return np.einsum("gpo,gpi->goi", delta.reshape(groups, -1, delta.shape[1]),
                         act.reshape(groups, -1, act.shape[1]))

    emb = cache.embeddings
    gm = np.concatenate([outer(dlogits, emb), dlogits.reshape(groups, -1, dlogits.shape[1]).sum(1)[..., None]],
                        axis=2)
    out[:, model.classifier_start :] = gm.reshape(groups, -1)

    w_cls, _ = model.classifier()
    delta = dlogits @ w_cls
    for i in reversed(range(model.n_layers)):
        if i < model.n_layers - 1:
            delta = delta * (cache.pre[i] > 0)
        put(f"layer{i}.W", outer(delta, cache.inputs[i]))
        put(f"layer{i}.b", delta.reshape(groups, -1, delta.shape[1]).sum(1))
        if i > 0:
            w, _ = model.layer(i)
            delta = delta @ w
    return out[0] if groups == 1 else out


def classifier_grad(model: Model, embeddings: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient that flows into the classifier only; extractor entries are 0."""
    out = np.zeros(len(model.values))
    gm = np.concatenate([dlogits.T @ embeddings, dlogits.sum(0)[:, None]], axis=1)
    out[model.classifier_start :] = gm.ravel()
    return out


def backward(model: Model, x: np.ndarray, labels, ignore_mask=None) -> tuple[float, np.ndarray]:
    """Forward ``x``, then return (mean CE loss, gradient vector)."""
    _, logits, cache = forward(model, x, keep_cache=True)
    loss, dlogits = ce_logits_grad(logits, labels, ignore_mask)
    return loss, backprop(model, cache, dlogits)


def sgd_step(model: Model, grads: np.ndarray, lr: float) -> None:
    if lr < 0:
        raise ConfigError("lr must be non-negative")
    if grads.shape != model.values.shape:
        raise ConfigError("gradient does not match the parameter layout")
    model.params.values -= lr * grads
