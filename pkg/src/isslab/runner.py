"""Incremental training loop, method presets and per-step checkpoints.

Per incremental step t >= 1 the order is fixed:

1. ``prepare_step``: freeze the previous model, append |C^t| classifier rows.
2. ``train_step``: background prototype / entropy pre-pass, then E epochs of
   SGD on pseudo-label CE (+ prototype replay), then weight merging, then
   bookkeeping for the next step (prototypes, feature std, Fisher).

Randomness comes from independent named streams seeded by (run seed, stream,
step), so switching one mechanism off never shifts another one's draws, and a
run resumed from a checkpoint replays the same numbers.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import consolidation as cons
from . import protoaug, protocore
from .errors import ConfigError
from .formats import MAGIC_CHECKPOINT, read_container, write_container
from .metrics import MetricsReport, build_report, confusion
from .numgrad import Model, ParamVector, Segment, backward, extend_classifier, forward, init_model, sgd_step, softmax
from .scenario import Scenario, StepDataset, relabel_for_step

log = logging.getLogger(__name__)

STREAMS = {"init": 1, "shuffle": 2, "self_aug": 3, "inter_aug": 4}

STRATEGIES = ("none", "naive", "median_entropy", "prototype_guided")
CONSOLIDATIONS = ("none", "uniform", "selective")


def stream(seed: int, name: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name], step])


@dataclass(frozen=True)
class MethodConfig:
    pseudo_label_strategy: str = "none"
    use_pca_self: bool = False
    use_pca_inter: bool = False
    consolidation: str = "none"
    joint_training: bool = False

    def validate(self) -> None:
        if self.pseudo_label_strategy not in STRATEGIES:
            raise ConfigError(f"unknown pseudo label strategy {self.pseudo_label_strategy!r}")
        if self.consolidation not in CONSOLIDATIONS:
            raise ConfigError(f"unknown consolidation {self.consolidation!r}")
        if self.joint_training and (self.pseudo_label_strategy != "none" or self.use_pca_self
                                    or self.use_pca_inter or self.consolidation != "none"):
            raise ConfigError("joint training cannot be combined with other mechanisms")

    def ablate(self, flags) -> "MethodConfig":
        cfg = self
        for flag in flags:
            if flag not in ABLATIONS:
                raise ConfigError(f"unknown ablation {flag!r}; choose from {sorted(ABLATIONS)}")
            cfg = replace(cfg, **ABLATIONS[flag])
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "ft": MethodConfig(),
    "joint": MethodConfig(joint_training=True),
    "naive": MethodConfig(pseudo_label_strategy="naive"),
    "median": MethodConfig(pseudo_label_strategy="median_entropy"),
    "wf": MethodConfig(consolidation="uniform"),
    "cs2k": MethodConfig("prototype_guided", True, True, "selective"),
}

# removing PPL falls back to the plain argmax pseudo labels
ABLATIONS = {
    "ppl": {"pseudo_label_strategy": "naive"},
    "pca-sa": {"use_pca_self": False},
    "pca-ia": {"use_pca_inter": False},
    "wsc": {"consolidation": "none"},
}


def method_from_name(name: str, ablate=()) -> MethodConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name].ablate(ablate)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.05
    lr_incremental: float | None = None  # None: reuse ``lr`` at steps t >= 1
    tau: float = 1.0
    hidden: tuple[int, ...] = (32, 32)
    emb_dim: int = 16
    cls_init_std: float = 0.01
    omega_override: float | None = None
    beta_override: float | None = None
    include_bg_in_old: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.tau <= 0:
            raise ConfigError("invalid training hyperparameters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunState:
    model: Model
    old_model: Model | None
    store: protocore.PrototypeStore
    fisher: cons.FisherDiag | None
    step: int
    seed: int
    class_counts: list[int] = field(default_factory=list)


def initial_state(scenario: Scenario, hyper: TrainConfig, seed: int) -> RunState:
    first = scenario.steps[0]
    model = init_model(stream(seed, "init", 0), 1 + len(first.class_set), scenario.spec.feature_dim,
                       hyper.hidden, hyper.emb_dim, hyper.cls_init_std)
    return RunState(model, None, protocore.PrototypeStore(), None, 0, seed, [len(first.class_set)])


def prepare_step(state: RunState, dataset: StepDataset, hyper: TrainConfig) -> RunState:
    """Freeze the current model as the old model and grow the classifier."""
    t = dataset.step_index
    old = state.model.copy()
    old.values.flags.writeable = False
    model = extend_classifier(state.model.copy(), len(dataset.class_set), stream(state.seed, "init", t), t,
                              hyper.cls_init_std)
    return RunState(model, old, state.store.copy(), state.fisher, t, state.seed,
                    state.class_counts + [len(dataset.class_set)])


def _batch_labels(method: MethodConfig, old: Model, x, y, store, medians, tau):
    """Training targets and ignore mask for one batch at an incremental step."""
    strategy = method.pseudo_label_strategy
    if strategy == "none":
        return y, None
    emb, logits = forward(old, x)
    probs = softmax(logits)
    if strategy == "naive":
        return protocore.naive_pseudo_labels(y, probs), None
    if strategy == "median_entropy":
        return protocore.median_entropy_pseudo_labels(y, probs, medians)
    kappa = protocore.similarity_weights(emb, store.matrix(), tau)
    return protocore.pseudo_labels(y, probs, kappa), None


def train_step(state: RunState, dataset: StepDataset, hyper: TrainConfig, method: MethodConfig) -> RunState:
    """Train on one step's data, merge weights, then record prototypes and Fisher."""
    t = dataset.step_index
    model, old, store = state.model, state.old_model, state.store
    expected = 1 + sum(state.class_counts)
    if model.num_classes != expected:
        raise ConfigError(f"classifier has {model.num_classes} outputs, expected {expected}")
    if t > 0 and old is None:
        raise ConfigError("incremental step without an old model; call prepare_step first")
    feats = dataset.features()
    gt = dataset.labels()
    n, d_in = len(feats), feats.shape[-1]
    incremental = t > 0

    medians = None
    if incremental and method.pseudo_label_strategy == "prototype_guided":
        protocore.compute_background_prototype(old, dataset, store)
    if incremental and method.pseudo_label_strategy == "median_entropy":
        _, probs = protocore.embed(old, feats)
        medians = protocore.class_entropy_medians(gt, probs)
    use_pa = incremental and (method.use_pca_self or method.use_pca_inter)
    s_t = protoaug.scaling_factor(t, store) if use_pa else 0.0

    lr = hyper.lr if not incremental or hyper.lr_incremental is None else hyper.lr_incremental
    shuffle_rng = stream(state.seed, "shuffle", t)
    self_rng = stream(state.seed, "self_aug", t) if method.use_pca_self else None
    inter_rng = stream(state.seed, "inter_aug", t) if method.use_pca_inter else None

    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            x = feats[idx].reshape(-1, d_in)
            y = gt[idx].ravel()
            if incremental:
                labels, ignore = _batch_labels(method, old, x, y, store, medians, hyper.tau)
            else:
                labels, ignore = y, None
            loss, grad = backward(model, x, labels, ignore)
            if use_pa:
                loss_pa, grad_pa = protoaug.loss_pa(model, store, s_t, self_rng, inter_rng)
                loss += loss_pa
                grad += grad_pa
            sgd_step(model, grad, lr)
            total += loss
        log.debug("step %d epoch %d loss %.4f", t, epoch, total)

    if incremental and method.consolidation != "none":
        w = hyper.omega_override if hyper.omega_override is not None else cons.omega(state.class_counts)
        if method.consolidation == "uniform":
            merged = cons.uniform_fusion(old.values, model.values, w)
        else:
            if state.fisher is None:
                raise ConfigError("selective consolidation needs the previous step's Fisher")
            b = hyper.beta_override if hyper.beta_override is not None else cons.beta(state.class_counts)
            merged = cons.selective_merge(old.values, model.values, state.fisher.values, b, w)
        model.values[:] = merged

    protocore.compute_prototypes(model, dataset, store)
    fisher = cons.fisher_diagonal(model, dataset)
    return RunState(model, old, store, fisher, t, state.seed, state.class_counts)


def predict(model: Model, images) -> np.ndarray:
    feats = np.stack([im.features for im in images])
    _, logits = forward(model, feats.reshape(-1, feats.shape[-1]))
    return logits.argmax(axis=1).reshape(feats.shape[:-1])


def evaluate(model: Model, scenario: Scenario, step: int, include_bg_in_old: bool = True) -> MetricsReport:
    """mIoU on the test set; classes not yet introduced count as background."""
    sets = scenario.spec.class_sets()
    seen = [c for s in sets[: step + 1] for c in s]
    gt = np.stack([im.gt_full for im in scenario.test_set])
    gt = relabel_for_step(gt, seen)
    mat = confusion(predict(model, scenario.test_set), gt, 1 + len(seen))
    return build_report(mat, step, sets, include_bg_in_old)


def run_joint(scenario: Scenario, hyper: TrainConfig, seed: int) -> list[MetricsReport]:
    """Upper bound: one model trained on every step's images with full labels."""
    spec = scenario.spec
    model = init_model(stream(seed, "init", 0), 1 + spec.total_classes, spec.feature_dim, hyper.hidden,
                       hyper.emb_dim, hyper.cls_init_std)
    images = [im for ds in scenario.steps for im in ds.images]
    union = StepDataset(0, tuple(range(1, spec.total_classes + 1)),
                        [type(im)(im.features, im.gt_full, im.gt_full) for im in images])
    state = RunState(model, None, protocore.PrototypeStore(), None, 0, seed, [spec.total_classes])
    train_step(state, union, hyper, PRESETS["ft"])
    return [evaluate(model, scenario, scenario.num_steps - 1, hyper.include_bg_in_old)]


def run_scenario(scenario: Scenario, method: MethodConfig, hyper: TrainConfig | None = None, seed: int = 0,
                 checkpoint_dir=None, from_step: int = 0) -> list[MetricsReport]:
    """Train through every step, evaluating on the test set after each one.

    With ``checkpoint_dir`` a checkpoint is written per step; ``from_step > 0``
    resumes from the checkpoint of step ``from_step - 1`` in that directory.
    """
    hyper = hyper or TrainConfig()
    method.validate()
    hyper.validate()
    if method.joint_training:
        return run_joint(scenario, hyper, seed)
    reports: list[MetricsReport] = []
    if from_step > 0:
        if checkpoint_dir is None:
            raise ConfigError("resuming needs a checkpoint directory")
        for s in range(from_step):
            _, rep = load_checkpoint(checkpoint_path(checkpoint_dir, s))
            reports.append(rep)
        state, _ = load_checkpoint(checkpoint_path(checkpoint_dir, from_step - 1))
        if state.seed != seed:
            raise ConfigError(f"checkpoint seed {state.seed} does not match run seed {seed}")
    else:
        state = initial_state(scenario, hyper, seed)
    for t in range(from_step, scenario.num_steps):
        ds = scenario.steps[t]
        if t > 0:
            state = prepare_step(state, ds, hyper)
        state = train_step(state, ds, hyper, method)
        rep = evaluate(state.model, scenario, t, hyper.include_bg_in_old)
        reports.append(rep)
        log.info("step %d: old=%s new=%s all=%s", t, rep.miou_old, rep.miou_new, rep.miou_all)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, rep, checkpoint_path(checkpoint_dir, t))
    return reports


def checkpoint_path(directory, step: int) -> Path:
    return Path(directory) / f"step{step}.ckpt"


def save_checkpoint(state: RunState, report: MetricsReport, path) -> None:
    store_header, store_arrays = protocore._store_payload(state.store)
    header = {
        "kind": "checkpoint",
        "step": state.step,
        "seed": state.seed,
        "n_layers": state.model.n_layers,
        "class_counts": state.class_counts,
        "segments": [[s.name, s.start, list(s.shape), s.step] for s in state.model.params.segments],
        "store": store_header,
        "fisher_sample_count": None if state.fisher is None else state.fisher.sample_count,
        "report": report.to_dict(),
    }
    arrays = {"params": state.model.values}
    arrays.update({f"store.{k}": v for k, v in store_arrays.items()})
    if state.fisher is not None:
        arrays["fisher"] = state.fisher.values
    write_container(path, MAGIC_CHECKPOINT, header, arrays)


def load_checkpoint(path) -> tuple[RunState, MetricsReport]:
    header, arrays = read_container(path, MAGIC_CHECKPOINT)
    segments = [Segment(n, s, tuple(shape), st) for n, s, shape, st in header["segments"]]
    model = Model(ParamVector(arrays["params"], segments), header["n_layers"])
    store_arrays = {k[len("store."):]: v for k, v in arrays.items() if k.startswith("store.")}
    store = protocore.store_from_payload(header["store"], store_arrays)
    fisher = None
    if "fisher" in arrays:
        fisher = cons.FisherDiag(arrays["fisher"], header["fisher_sample_count"])
    state = RunState(model, None, store, fisher, header["step"], header["seed"], list(header["class_counts"]))
    return state, MetricsReport.from_dict(header["report"])


def pseudo_label_accuracy(scenario: Scenario, hyper: TrainConfig, seed: int, strategy: str) -> float:
    """Share of hidden old-class pixels at step 1 that a strategy relabels correctly.

    Trains step 0 as fine-tuning would, then labels step-1 images with the
    frozen model. Scored pixels are those labelled background at step 1 whose
    full ground truth is an old class.
    """
    if strategy not in ("naive", "prototype_guided"):
        raise ConfigError(f"unsupported strategy {strategy!r}")
    if scenario.num_steps < 2:
        raise ConfigError("need at least two steps")
    state = train_step(initial_state(scenario, hyper, seed), scenario.steps[0], hyper, PRESETS["ft"])
    ds = scenario.steps[1]
    state = prepare_step(state, ds, hyper)
    if strategy == "prototype_guided":
        protocore.compute_background_prototype(state.old_model, ds, state.store)
    x = ds.features().reshape(-1, scenario.spec.feature_dim)
    y = ds.labels().ravel()
    full = ds.labels(full=True).ravel()
    labels, _ = _batch_labels(MethodConfig(strategy), state.old_model, x, y, state.store, None, hyper.tau)
    mask = (y == 0) & np.isin(full, scenario.spec.class_sets()[0])
    if not mask.any():
        raise ConfigError("no hidden old-class pixels at step 1")
    return float((labels[mask] == full[mask]).mean())
