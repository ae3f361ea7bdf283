"""Confusion matrices, grouped mIoU and report writers (CSV / JSON / SVG)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

GROUPS = ("old", "new", "all")


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """matrix[a, b] = number of pixels with ground truth a predicted as b."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise InputError("prediction and ground truth sizes differ")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} class id out of range [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def class_iou(matrix: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN where the class has neither ground truth nor predictions."""
    tp = np.diag(matrix).astype(np.float64)
    union = matrix.sum(0) + matrix.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def miou(matrix: np.ndarray, group) -> float | None:
    """Mean IoU over ``group``; classes with empty union are skipped, None if nothing is left."""
    iou = class_iou(matrix)
    vals = [iou[c] for c in group if not np.isnan(iou[c])]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    step: int
    per_class_iou: dict[int, float | None]
    miou_old: float | None
    miou_new: float | None
    miou_all: float | None
    pixel_counts: dict[int, int] = field(default_factory=dict)
    old_classes: list[int] = field(default_factory=list)
    new_classes: list[int] = field(default_factory=list)

    def group(self, name: str) -> float | None:
        return getattr(self, f"miou_{name}")

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "miou_old": self.miou_old,
            "miou_new": self.miou_new,
            "miou_all": self.miou_all,
            "old_classes": self.old_classes,
            "new_classes": self.new_classes,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "pixel_counts": {str(k): v for k, v in sorted(self.pixel_counts.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["step"],
            {int(k): v for k, v in d["per_class_iou"].items()},
            d["miou_old"],
            d["miou_new"],
            d["miou_all"],
            {int(k): v for k, v in d["pixel_counts"].items()},
            list(d["old_classes"]),
            list(d["new_classes"]),
        )


def build_report(matrix: np.ndarray, step: int, class_sets, include_bg_in_old: bool = True) -> MetricsReport:
    """Group IoUs for ``step``: old = classes from earlier steps, new = this step's.

    Background counts as introduced at step 0: it is "new" at step 0 and, when
    ``include_bg_in_old`` is set, "old" afterwards.
    """
    new = [int(c) for c in class_sets[step]]
    old = [int(c) for s in class_sets[:step] for c in s]
    if step == 0:
        new = [0] + new
    elif include_bg_in_old:
        old = [0] + old
    seen = sorted(set([0] + old + new))
    iou = class_iou(matrix)
    return MetricsReport(
        step=step,
        per_class_iou={c: (None if np.isnan(iou[c]) else float(iou[c])) for c in seen},
        miou_old=miou(matrix, old),
        miou_new=miou(matrix, new),
        miou_all=miou(matrix, seen),
        pixel_counts={c: int(matrix[c].sum()) for c in seen},
        old_classes=old,
        new_classes=new,
    )


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def write_csv(reports, path, extra: dict | None = None) -> None:
    """One row per (step, group)."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*extra, "step", "group", "miou"])
        for r in reports:
            for g in GROUPS:
                w.writerow([*extra.values(), r.step, g, _fmt(r.group(g))])


def write_json(reports, path, meta: dict | None = None) -> None:
    payload = {"version": 1, "meta": meta or {}, "reports": [r.to_dict() for r in reports]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path) -> tuple[dict, list[MetricsReport]]:
    with open(path) as fh:
        payload = json.load(fh)
    return payload.get("meta", {}), [MetricsReport.from_dict(d) for d in payload["reports"]]


def write_svg(series: dict[str, list[tuple[int, float]]], path, title: str = "mIoU (all) per step") -> None:
    """Line chart of mIoU against step, one polyline per series."""
    width, height, pad = 480, 300, 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]
    steps = [s for pts in series.values() for s, _ in pts] or [0]
    smax = max(max(steps), 1)

    def xy(s, v):
        return pad + (width - 2 * pad) * s / smax, height - pad - (height - 2 * pad) * v

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for tick in (0.0, 0.5, 1.0):
        _, y = xy(0, tick)
        out.append(f'<text x="{pad - 5}" y="{y:.1f}" text-anchor="end" font-size="10">{tick:.1f}</text>')
    for s in range(smax + 1):
        x, _ = xy(s, 0)
        out.append(f'<text x="{x:.1f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{s}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join("{:.1f},{:.1f}".format(*xy(s, v)) for s, v in pts if v is not None)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        out.append(f'<text x="{width - pad + 2}" y="{pad + 14 * i}" font-size="10" fill="{color}">{name}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
