"""Command-line interface.

Commands: split, train, eval, ablate, compare. Configuration is a YAML
tree with `dataset`, `eval_dataset`, `split`, and `train` sections;
`--set dotted.key=value` overrides any existing key (unknown keys are
hard errors — silent typos kill experiments). Exit codes: 0 success,
2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import copy
import json
import statistics
import sys
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import yaml

from . import engine
from .data import DataError, DatasetHandle, DiskSpec, SyntheticSpec, \
    generate_synthetic, load_dataset, make_split
from .datamodel import ConfigError, SplitManifest, TrainConfig, \
    apply_overrides, validate_config
from .eval import evaluate_dataset
from .engine import NanAbort, EngineError

DEFAULT_TREE: dict = {
    "dataset": {"kind": "synthetic", "num_samples": 200, "image_size": 64,
                "num_classes": 3, "seed": 0},
    "eval_dataset": {"kind": "synthetic", "num_samples": 100, "image_size": 64,
                     "num_classes": 3, "seed": 1},
    "split": {"ratio": "1/16", "seed": 0, "manifest": None},
    "train": TrainConfig().to_dict(),
}

AXES: Dict[str, str] = {
    "tau": "train.tau",
    "lambda": "train.lambda_u",
    "variant": "train.framework",
    "frozen": "train.freeze_encoder",
    "dropout_position": "train.perturb.position",
}

VARIANT_NAMES = {"a": "variant_a", "b": "variant_b", "c": "variant_c",
                 "v1": "unimatch_v1", "v2": "unimatch_v2"}


def _load_tree(path: Optional[str]) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_TREE)
    loaded = yaml.safe_load(Path(path).read_text())
    if not isinstance(loaded, dict):
        raise ConfigError(f"config {path} must be a mapping")
    tree = copy.deepcopy(DEFAULT_TREE)
    for section, value in loaded.items():
        if section not in tree:
            raise ConfigError(f"unknown config section {section!r}")
        if isinstance(value, dict):
            unknown = set(value) - set(tree[section])
            if unknown:
                raise ConfigError(
                    f"unknown keys in {section}: {sorted(unknown)}")
            _merge(tree[section], value)
        else:
            tree[section] = value
    return tree


def _merge(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def build_dataset(section: dict) -> DatasetHandle:
    section = dict(section)
    kind = section.pop("kind", "synthetic")
    if kind == "synthetic":
        return generate_synthetic(SyntheticSpec(**section))
    if kind == "disk":
        return load_dataset(DiskSpec(**section))
    raise ConfigError(f"unknown dataset kind {kind!r}")


def resolve_manifest(tree: dict, ds: DatasetHandle) -> SplitManifest:
    split = tree["split"]
    if split.get("manifest"):
        manifest = SplitManifest.load(split["manifest"])
        if manifest.dataset_id != ds.dataset_id:
            raise ConfigError(
                f"manifest is for {manifest.dataset_id}, not {ds.dataset_id}")
        return manifest
    return make_split(ds, Fraction(str(split["ratio"])), int(split["seed"]))


def _table(headers: Tuple[str, ...], rows: List[Tuple[str, ...]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    out = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
           "  ".join("-" * w for w in widths)]
    for r in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(out)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_split(args) -> int:
    tree = _load_tree(args.config)
    tree = apply_overrides(tree, args.set or [])
    ds = build_dataset(tree["dataset"])
    ratio = Fraction(str(args.ratio if args.ratio else tree["split"]["ratio"]))
    seed = args.seed if args.seed is not None else int(tree["split"]["seed"])
    manifest = make_split(ds, ratio, seed)
    out = Path(args.out)
    manifest.save(out)
    print(f"wrote {out}: {len(manifest.labeled_ids)} labeled / "
          f"{len(manifest.unlabeled_ids)} unlabeled (ratio {ratio})")
    return 0


def _run_one(tree: dict, out_dir: Optional[str], run_root: Optional[str],
             progress: bool) -> engine.RunArtifacts:
    cfg = TrainConfig.from_dict(tree["train"])
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("invalid config: " + "; ".join(violations))
    ds = build_dataset(tree["dataset"])
    eval_ds = build_dataset(tree["eval_dataset"]) if tree.get("eval_dataset") \
        else None
    manifest = resolve_manifest(tree, ds)
    return engine.train(cfg, manifest, ds, eval_ds=eval_ds,
                        out_dir=out_dir, run_root=run_root, progress=progress)


def cmd_train(args) -> int:
    tree = _load_tree(args.config)
    tree = apply_overrides(tree, args.set or [])
    if args.deterministic is not None:
        tree["train"]["deterministic"] = args.deterministic
    art = _run_one(tree, args.out, args.run_root, progress=not args.quiet)
    print(f"run dir: {art.run_dir}")
    print(f"final student mIoU: {art.final_student_miou:.4f}")
    print(f"final teacher mIoU: {art.final_teacher_miou:.4f}")
    print(f"best teacher mIoU:  {art.best_teacher_miou:.4f}")
    return 0


def cmd_eval(args) -> int:
    tree = _load_tree(args.config)
    tree = apply_overrides(tree, args.set or [])
    student, teacher, meta = engine.load_checkpoint(args.ckpt)
    section = tree.get("eval_dataset") or tree["dataset"]
    ds = build_dataset(section)
    for name, net in (("student", student), ("teacher", teacher)):
        report = evaluate_dataset(net, ds, ds.ids, window=args.window,
                                  stride=args.stride)
        print(f"{name}:")
        print(report.table())
    return 0


def _sweep(tree: dict, key: str, values: List, seeds: List[int],
           out_root: Path, run_root: Optional[str],
           label: str) -> List[Tuple[str, float]]:
    rows = []
    for value in values:
        per_seed = []
        for seed in seeds:
            child = apply_overrides(
                tree, [f"{key}={json.dumps(value)}", f"train.seed={seed}"])
            out_dir = out_root / f"{label}-{value}-s{seed}"
            art = _run_one(child, str(out_dir), run_root, progress=False)
            per_seed.append(art.final_teacher_miou)
            print(f"  {label}={value} seed={seed}: "
                  f"teacher mIoU {art.final_teacher_miou:.4f}")
        rows.append((str(value), statistics.median(per_seed)))
    return rows


def cmd_ablate(args) -> int:
    if args.axis not in AXES:
        raise ConfigError(f"unknown axis {args.axis!r}; choose from {sorted(AXES)}")
    tree = _load_tree(args.config)
    tree = apply_overrides(tree, args.set or [])
    raw_values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not raw_values:
        raise ConfigError("no values given")
    values = []
    for v in raw_values:
        if args.axis == "variant":
            if v not in VARIANT_NAMES:
                raise ConfigError(f"unknown variant {v!r}; choose from "
                                  f"{sorted(VARIANT_NAMES)}")
            values.append(VARIANT_NAMES[v])
        else:
            values.append(yaml.safe_load(v))
    seeds = [int(s) for s in args.seeds.split(",")]
    out_root = Path(args.out or f"ablate-{args.axis}")
    out_root.mkdir(parents=True, exist_ok=True)
    print(f"ablating {args.axis} over {raw_values} (seeds {seeds})")
    rows = _sweep(tree, AXES[args.axis], values, seeds, out_root,
                  args.run_root, args.axis)
    display = [(raw, _fmt(v)) for (_, v), raw in zip(rows, raw_values)]
    table = _table((args.axis, "teacher_miou"), display)
    print(table)
    (out_root / "summary.md").write_text(
        f"# {args.axis} sweep\n\nmedian final teacher mIoU over seeds "
        f"{seeds}\n\n```\n{table}\n```\n")
    print(f"summary: {out_root / 'summary.md'}")
    return 0


def cmd_compare(args) -> int:
    tree = _load_tree(args.config)
    tree = apply_overrides(tree, args.set or [])
    frameworks = [f.strip() for f in args.frameworks.split(",") if f.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    if not frameworks or not seeds:
        raise ConfigError("frameworks and seeds must be non-empty")
    out_root = Path(args.out or "compare")
    out_root.mkdir(parents=True, exist_ok=True)
    rows = _sweep(tree, "train.framework", frameworks, seeds, out_root,
                  args.run_root, "framework")
    display = [(name, _fmt(v)) for name, v in rows]
    table = _table(("framework", "median_teacher_miou"), display)
    print(table)
    (out_root / "summary.md").write_text(
        f"# framework comparison\n\nmedian final teacher mIoU over seeds "
        f"{seeds}\n\n```\n{table}\n```\n")
    print(f"summary: {out_root / 'summary.md'}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML config tree")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path)")
    p.add_argument("--run-root", default=None,
                   help=f"base directory for runs (or ${engine.RUN_ROOT_ENV})")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="semimatch",
        description="Weak-to-strong consistency training for semi-supervised "
                    "semantic segmentation, at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a labeled/unlabeled split manifest")
    _add_common(p)
    p.add_argument("--ratio", default=None, help="labeled fraction, e.g. 1/16")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="manifest path (YAML)")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train one framework")
    _add_common(p)
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis, one run per value")
    _add_common(p)
    p.add_argument("--axis", required=True, help=f"one of {sorted(AXES)}")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", default=None, help="sweep output directory")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("compare", help="frameworks x seeds, median summary")
    _add_common(p)
    p.add_argument("--frameworks", required=True, help="comma-separated list")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", default=None, help="comparison output directory")
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except NanAbort as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"diagnostics: {exc.dump_path}", file=sys.stderr)
        return 3
    except (ConfigError, DataError, yaml.YAMLError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
