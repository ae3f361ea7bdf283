"""Synthetic overlapped incremental segmentation scenarios.

Each foreground class ``c`` owns a mean feature vector on a sphere of radius
``class_separation``; background gets its own random direction on the same
sphere (rather than the origin, which would sit inside the hull of the
foreground means). A pixel's features are its class mean plus isotropic
Gaussian noise. Images are
background canvases with 2-4 painted rectangles or ellipses.

Class ids are assigned consecutively: with schedule ``[4, 1, 1]`` step 0 owns
classes 1-4, step 1 owns class 5 and step 2 owns class 6.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .formats import MAGIC_SCENARIO, read_container, write_container


@dataclass(frozen=True)
class ScenarioSpec:
    total_classes: int = 6
    schedule: tuple[int, ...] = (4, 1, 1)
    images_per_step: int = 80
    test_images: int = 60
    image_size: tuple[int, int] = (16, 16)
    feature_dim: int = 8
    class_separation: float = 5.0
    noise_sigma: float = 1.0
    seed: int = 0
    other_region_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(int(s) for s in self.schedule))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))

    def validate(self) -> None:
        if not self.schedule or any(s < 1 for s in self.schedule):
            raise ConfigError("every schedule entry must be >= 1")
        if sum(self.schedule) != self.total_classes:
            raise ConfigError(f"schedule {list(self.schedule)} does not sum to {self.total_classes}")
        if len(self.image_size) != 2:
            raise ConfigError("image_size must be (H, W)")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigError(f"image_size {self.image_size} infeasible: regions need H, W >= 8")
        if self.images_per_step < 1 or self.test_images < 1:
            raise ConfigError("need at least one image per step and one test image")
        if self.images_per_step < max(self.schedule):
            raise ConfigError("images_per_step must be >= the largest step so every class appears")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.class_separation < 0 or self.noise_sigma < 0:
            raise ConfigError("class_separation and noise_sigma must be >= 0")
        if not 0.0 <= self.other_region_prob <= 1.0:
            raise ConfigError("other_region_prob must lie in [0, 1]")

    def class_sets(self) -> list[tuple[int, ...]]:
        out, start = [], 1
        for n in self.schedule:
            out.append(tuple(range(start, start + n)))
            start += n
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = list(self.schedule)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ImageSample:
    features: np.ndarray  # (H, W, D_in)
    gt_full: np.ndarray  # (H, W) int
    gt_step: np.ndarray | None = None  # None on test images


@dataclass
class StepDataset:
    step_index: int
    class_set: tuple[int, ...]
    images: list[ImageSample] = field(default_factory=list)

    def features(self) -> np.ndarray:
        return np.stack([im.features for im in self.images])

    def labels(self, full: bool = False) -> np.ndarray:
        return np.stack([im.gt_full if full else im.gt_step for im in self.images])

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Scenario:
    spec: ScenarioSpec
    class_means: np.ndarray  # (total_classes + 1, D_in); row 0 is background
    steps: list[StepDataset]
    test_set: list[ImageSample]

    @property
    def num_steps(self) -> int:
        return len(self.steps)


def relabel_for_step(gt_full: np.ndarray, class_set) -> np.ndarray:
    """Keep labels in ``class_set``; everything else becomes background 0."""
    class_set = tuple(class_set)
    if not class_set:
        raise ConfigError("class_set must be non-empty")
    gt_full = np.asarray(gt_full)
    return np.where(np.isin(gt_full, class_set), gt_full, 0).astype(gt_full.dtype)


def class_means(spec: ScenarioSpec) -> np.ndarray:
    """(total_classes + 1, feature_dim) means; row 0 is background."""
    rng = np.random.default_rng([spec.seed, 0])
    dirs = rng.standard_normal((spec.total_classes + 1, spec.feature_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * spec.class_separation


def _paint(label: np.ndarray, cls: int, rng: np.random.Generator) -> None:
    h, w = label.shape
    rh = int(rng.integers(h // 4, h // 2 + 1))
    rw = int(rng.integers(w // 4, w // 2 + 1))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    if rng.random() < 0.5:
        label[top : top + rh, left : left + rw] = cls
    else:
        yy, xx = np.mgrid[0:rh, 0:rw]
        cy, cx = (rh - 1) / 2, (rw - 1) / 2
        inside = ((yy - cy) / (rh / 2)) ** 2 + ((xx - cx) / (rw / 2)) ** 2 <= 1.0
        label[top : top + rh, left : left + rw][inside] = cls


def _render(spec: ScenarioSpec, means: np.ndarray, region_classes: list[int],
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    label = np.zeros(spec.image_size, dtype=np.int32)
    for cls in region_classes:
        _paint(label, cls, rng)
    noise = rng.standard_normal((*spec.image_size, spec.feature_dim))
    feats = means[label] + spec.noise_sigma * noise
    return feats, label


def _train_image(spec, means, step, idx, own, others) -> ImageSample:
    rng = np.random.default_rng([spec.seed, 1, step, idx])
    n_regions = int(rng.integers(2, 5))
    extra = []
    for _ in range(n_regions - 1):
        if others and rng.random() < spec.other_region_prob:
            extra.append(int(rng.choice(others)))
        else:
            extra.append(int(rng.choice(own)))
    # own-step region painted last so it is never fully covered; cycling
    # through the step's classes guarantees each one appears
    feats, gt_full = _render(spec, means, extra + [own[idx % len(own)]], rng)
    return ImageSample(feats, gt_full, relabel_for_step(gt_full, own))


def _test_set(spec, means, max_attempts: int = 200) -> list[ImageSample]:
    all_classes = list(range(1, spec.total_classes + 1))
    need = min(5, spec.test_images)
    for attempt in range(max_attempts):
        images = []
        for i in range(spec.test_images):
            rng = np.random.default_rng([spec.seed, 2, attempt, i])
            regions = [int(c) for c in rng.choice(all_classes, size=int(rng.integers(2, 5)))]
            feats, gt_full = _render(spec, means, regions, rng)
            images.append(ImageSample(feats, gt_full))
        counts = np.zeros(spec.total_classes + 1, int)
        for im in images:
            counts[np.unique(im.gt_full)] += 1
        if (counts[1:] >= need).all():
            return images
    raise ConfigError(f"could not place every class in >= {need} test images")


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    spec.validate()
    means = class_means(spec)
    sets = spec.class_sets()
    all_classes = range(1, spec.total_classes + 1)
    steps = []
    for t, own in enumerate(sets):
        others = [c for c in all_classes if c not in own]
        images = [_train_image(spec, means, t, i, list(own), others) for i in range(spec.images_per_step)]
        steps.append(StepDataset(t, own, images))
    return Scenario(spec, means, steps, _test_set(spec, means))


def save_scenario(scenario: Scenario, path) -> None:
    spec = scenario.spec
    arrays = {"class_means": scenario.class_means}
    for ds in scenario.steps:
        arrays[f"step{ds.step_index}.features"] = ds.features()
        arrays[f"step{ds.step_index}.gt_full"] = ds.labels(full=True)
        arrays[f"step{ds.step_index}.gt_step"] = ds.labels()
    arrays["test.features"] = np.stack([im.features for im in scenario.test_set])
    arrays["test.gt_full"] = np.stack([im.gt_full for im in scenario.test_set])
    header = {
        "kind": "scenario",
        "spec": spec.to_dict(),
        "class_sets": [list(s) for s in spec.class_sets()],
    }
    write_container(path, MAGIC_SCENARIO, header, arrays)


def load_scenario(path) -> Scenario:
    header, arrays = read_container(path, MAGIC_SCENARIO)
    spec = ScenarioSpec.from_dict(header["spec"])
    steps = []
    for t, own in enumerate(header["class_sets"]):
        feats = arrays[f"step{t}.features"]
        full = arrays[f"step{t}.gt_full"]
        step = arrays[f"step{t}.gt_step"]
        images = [ImageSample(f, g, s) for f, g, s in zip(feats, full, step)]
        steps.append(StepDataset(t, tuple(own), images))
    test = [ImageSample(f, g) for f, g in zip(arrays["test.features"], arrays["test.gt_full"])]
    return Scenario(spec, arrays["class_means"], steps, test)
