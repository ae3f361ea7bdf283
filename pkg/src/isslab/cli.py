"""Command-line entry point: ``isslab {generate,run,matrix,compare}``.

Configuration precedence (later wins): built-in defaults < JSON config file
(``--config``) < command-line flags. A config file has the same shape as the
manifest written into every output directory::

    {"scenario": {...ScenarioSpec fields...},
     "train": {...TrainConfig fields...},
     "method": "cs2k", "ablate": ["wsc"], "seeds": [0, 1, 2]}

so ``isslab run --config OUT/manifest.json`` re-runs a previous run. Relative
output paths are placed under ``$ISSLAB_OUT`` when that variable is set.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .formats import dump_json
from .metrics import GROUPS, write_csv, write_json, write_svg
from .runner import ABLATIONS, PRESETS, TrainConfig, method_from_name, run_scenario
from .scenario import ScenarioSpec, generate_scenario, load_scenario, save_scenario

log = logging.getLogger("isslab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUT_ENV = "ISSLAB_OUT"
MANIFEST = "manifest.json"
AGGREGATE = "aggregate.csv"
MATRIX_CELLS = [("ft", ()), ("joint", ()), ("naive", ()), ("median", ()), ("wf", ()), ("cs2k", ()),
                ("cs2k", ("ppl",)), ("cs2k", ("pca-sa",)), ("cs2k", ("pca-ia",)), ("cs2k", ("wsc",))]


def out_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(OUT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def scenario_spec(args, cfg: dict) -> ScenarioSpec:
    fields = dict(cfg.get("scenario", {}))
    for name in ("total_classes", "images_per_step", "test_images", "feature_dim", "class_separation",
                 "noise_sigma", "seed", "other_region_prob"):
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    if getattr(args, "schedule", None):
        fields["schedule"] = parse_ints(args.schedule)
    if getattr(args, "image_size", None):
        fields["image_size"] = parse_ints(args.image_size)
    if "schedule" in fields and "total_classes" not in fields:
        fields["total_classes"] = sum(fields["schedule"])
    for key in ("schedule", "image_size"):
        if key in fields:
            fields[key] = tuple(fields[key])
    spec = ScenarioSpec.from_dict(fields)
    spec.validate()
    return spec


def train_config(args, cfg: dict) -> TrainConfig:
    fields = dict(cfg.get("train", {}))
    for name in ("epochs", "batch_size", "lr", "tau"):
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    if getattr(args, "exclude_bg_from_old", False):
        fields["include_bg_in_old"] = False
    if "hidden" in fields:
        fields["hidden"] = tuple(fields["hidden"])
    hyper = TrainConfig.from_dict(fields)
    hyper.validate()
    return hyper


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory: Path, manifest: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / MANIFEST).write_text(dump_json(manifest) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"no readable manifest in {directory}: {exc}") from exc


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    cfg = read_config(args.config)
    spec = scenario_spec(args, cfg)
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "isslab", "version": __version__, "command": "generate", "scenario": spec.to_dict(),
                "out": out.name}
    Path(str(out) + ".manifest.json").write_text(dump_json(manifest) + "\n")
    save_scenario(generate_scenario(spec), out)
    print(f"wrote {out} ({len(spec.schedule)} steps, schedule {list(spec.schedule)})")
    return EXIT_OK


# --------------------------------------------------------------------- run


def _label(method: str, ablate) -> str:
    return method + "".join(f"-wo-{a}" for a in ablate)


def run_cell(out: Path, method: str, ablate, seeds, spec: ScenarioSpec | None, hyper: TrainConfig,
             scenario_file: Path | None = None, from_step: int = 0) -> dict[int, list]:
    """Run one method over several seeds into ``out``; returns reports per seed.

    With ``scenario_file`` every seed trains on that fixed dataset; otherwise
    the scenario is regenerated per seed from ``spec`` with ``seed`` replaced.
    """
    cfg = method_from_name(method, ablate)
    if scenario_file is not None:
        fixed = load_scenario(scenario_file)
        spec = fixed.spec
    manifest = {
        "tool": "isslab",
        "version": __version__,
        "command": "run",
        "method": method,
        "ablate": list(ablate),
        "method_config": cfg.to_dict(),
        "seeds": list(seeds),
        "scenario": spec.to_dict(),
        "scenario_file": None if scenario_file is None else str(scenario_file),
        "scenario_sha256": None if scenario_file is None else sha256(scenario_file),
        "train": hyper.to_dict(),
        "from_step": from_step,
    }
    write_manifest(out, manifest)
    label = _label(method, ablate)
    results = {}
    for seed in seeds:
        if scenario_file is not None:
            scenario = fixed
        else:
            scenario = generate_scenario(replace(spec, seed=seed))
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        reports = run_scenario(scenario, cfg, hyper, seed, checkpoint_dir=seed_dir / "checkpoints",
                               from_step=from_step)
        write_csv(reports, seed_dir / "reports.csv", {"method": label, "seed": seed})
        write_json(reports, seed_dir / "reports.json", {"method": label, "seed": seed})
        write_svg({label: [(r.step, r.miou_all) for r in reports]}, seed_dir / "miou.svg")
        results[seed] = reports
        final = reports[-1]
        log.info("%s seed %d final step %d: old=%s new=%s all=%s", label, seed, final.step, final.miou_old,
                 final.miou_new, final.miou_all)
    write_aggregate(out / AGGREGATE, label, results)
    return results


def _median(values):
    values = [v for v in values if v is not None]
    return statistics.median(values) if values else None


def write_aggregate(path: Path, label: str, results: dict[int, list]) -> None:
    """Per-seed rows plus one ``median`` row per (step, group)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "seed", "step", "group", "miou"])
        steps = sorted({r.step for reps in results.values() for r in reps})
        for seed, reports in results.items():
            for r in reports:
                for g in GROUPS:
                    w.writerow([label, seed, r.step, g, _fmt(r.group(g))])
        for step in steps:
            for g in GROUPS:
                vals = [r.group(g) for reps in results.values() for r in reps if r.step == step]
                w.writerow([label, "median", step, g, _fmt(_median(vals))])


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def cmd_run(args) -> int:
    cfg = read_config(args.config)
    method = args.method or cfg.get("method")
    if method is None:
        raise ConfigError("--method is required")
    ablate = args.ablate if args.ablate is not None else cfg.get("ablate", [])
    seeds = parse_ints(args.seeds) if args.seeds else cfg.get("seeds", [0])
    hyper = train_config(args, cfg)
    scenario_file = args.scenario
    if scenario_file is None and cfg.get("scenario_file"):
        scenario_file = cfg["scenario_file"]
    spec = None if scenario_file else scenario_spec(args, cfg)
    out = out_path(args.out)
    results = run_cell(out, method, ablate, seeds, spec, hyper, Path(scenario_file) if scenario_file else None,
                       args.from_step)
    _print_final(_label(method, ablate), results)
    return EXIT_OK


def _print_final(label, results) -> None:
    for seed, reports in results.items():
        r = reports[-1]
        print(f"{label:20s} seed {seed:<4d} step {r.step}: old={_fmt(r.miou_old) or '-':9s} "
              f"new={_fmt(r.miou_new) or '-':9s} all={_fmt(r.miou_all)}")


def cmd_matrix(args) -> int:
    """Every baseline plus the four single-removal ablations, one directory each."""
    cfg = read_config(args.config)
    seeds = parse_ints(args.seeds) if args.seeds else cfg.get("seeds", [0])
    hyper = train_config(args, cfg)
    spec = scenario_spec(args, cfg)
    out = out_path(args.out)
    write_manifest(out, {"tool": "isslab", "version": __version__, "command": "matrix", "seeds": seeds,
                         "scenario": spec.to_dict(), "train": hyper.to_dict(),
                         "cells": [_label(m, a) for m, a in MATRIX_CELLS]})
    for method, ablate in MATRIX_CELLS:
        results = run_cell(out / _label(method, ablate), method, ablate, seeds, spec, hyper)
        _print_final(_label(method, ablate), results)
    return EXIT_OK


# ----------------------------------------------------------------- compare


def _scenario_key(manifest: dict):
    return manifest.get("scenario_sha256") or dump_json(manifest.get("scenario"))


def load_medians(directory) -> dict[tuple[int, str], float | None]:
    path = Path(directory) / AGGREGATE
    if not path.exists():
        raise ConfigError(f"{directory} has no {AGGREGATE}")
    out = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if row["seed"] == "median":
                out[(int(row["step"]), row["group"])] = float(row["miou"]) if row["miou"] else None
    return out


def compare_rows(dirs) -> list[list]:
    """Rows of (method, step, old, new, all, d_old, d_new, d_all); deltas against the first directory."""
    manifests = [read_manifest(d) for d in dirs]
    keys = {_scenario_key(m) for m in manifests}
    if len(keys) > 1:
        raise ConfigError("reports come from different scenarios; refusing to compare")
    seed_sets = {tuple(m.get("seeds", [])) for m in manifests}
    if len(seed_sets) > 1:
        raise ConfigError("reports use different seed lists; refusing to compare")
    tables = [load_medians(d) for d in dirs]
    base = tables[0]
    rows = []
    for m, table in zip(manifests, tables):
        label = _label(m["method"], m.get("ablate", []))
        for step in sorted({s for s, _ in table}):
            vals = [table.get((step, g)) for g in GROUPS]
            ref = [base.get((step, g)) for g in GROUPS]
            deltas = [None if v is None or r is None else v - r for v, r in zip(vals, ref)]
            rows.append([label, step, *vals, *deltas])
    return rows


def cmd_compare(args) -> int:
    rows = compare_rows(args.dirs)
    header = ["method", "step", "miou_old", "miou_new", "miou_all", "delta_old", "delta_new", "delta_all"]
    if args.out:
        out = out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([r[0], r[1], *(_fmt(v) for v in r[2:])])
    print(" ".join(f"{h:>10s}" for h in header))
    for r in rows:
        print(f"{r[0]:>10s} {r[1]:>10d} " + " ".join(f"{_fmt(v) or '-':>10s}" for v in r[2:]))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _scenario_flags(p) -> None:
    g = p.add_argument_group("scenario (overrides config file)")
    g.add_argument("--schedule", help="per-step class counts, e.g. 4,1,1")
    g.add_argument("--total-classes", dest="total_classes", type=int)
    g.add_argument("--images-per-step", dest="images_per_step", type=int)
    g.add_argument("--test-images", dest="test_images", type=int)
    g.add_argument("--image-size", dest="image_size", help="H,W")
    g.add_argument("--feature-dim", dest="feature_dim", type=int)
    g.add_argument("--class-separation", dest="class_separation", type=float)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.add_argument("--other-region-prob", dest="other_region_prob", type=float)


def _train_flags(p) -> None:
    g = p.add_argument_group("training (overrides config file)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--exclude-bg-from-old", action="store_true",
                   help="leave background out of the old-class mIoU group")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isslab", description="Synthetic incremental segmentation experiments.")
    parser.add_argument("--version", action="version", version=f"isslab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a scenario file")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _scenario_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="train one method over one or more seeds")
    p.add_argument("--config")
    p.add_argument("--scenario", help="fixed scenario file; default regenerates the scenario per seed")
    p.add_argument("--method", choices=sorted(PRESETS))
    p.add_argument("--ablate", nargs="*", choices=sorted(ABLATIONS))
    p.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    p.add_argument("--from-step", dest="from_step", type=int, default=0,
                   help="resume from the checkpoints of an earlier run in --out")
    p.add_argument("--out", required=True)
    _scenario_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("matrix", help="run all baselines and ablations")
    p.add_argument("--config")
    p.add_argument("--seeds")
    p.add_argument("--out", required=True)
    _scenario_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("compare", help="align the median reports of several run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"isslab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report, don't trace, at the CLI boundary
        log.debug("failure", exc_info=True)
        print(f"isslab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
