"""Command-line entry point: ``mcres {gen,split,train,report}``.

Exit codes: 0 success, 1 domain error, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .audit import audit_split
from .config import MODES, ConfigError, RunConfig
from .model import NonFiniteGradient
from .runs import IncompatibleRuns, RunExists, comparison_table, prepare_dir, run_from_dataset_dir
from .splitter import DegenerateSplit, PairingFailed, construct_split
from .synthetic import InfeasibleHoldout, generate_dataset, read_samples, write_dataset

DOMAIN_ERRORS = (DegenerateSplit, InfeasibleHoldout, IncompatibleRuns, NonFiniteGradient, PairingFailed)
USAGE_ERRORS = (ConfigError, RunExists, FileNotFoundError, IsADirectoryError, PermissionError, OSError)


class SplitAuditFailed(RuntimeError):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(Path(args.config)) if getattr(args, "config", None) else RunConfig()
    changes: dict = {}
    meta: dict = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "vtr_fraction", None) is not None:
        meta["vtr_fraction"] = args.vtr_fraction
    if getattr(args, "first_order", False):
        meta["first_order"] = True
    if getattr(args, "dataset", None):
        changes["dataset"] = args.dataset
    if getattr(args, "out", None):
        changes["out"] = args.out
    try:
        return cfg.with_overrides(meta=meta, **changes)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    prepare_dir(out, args.force)
    ds = generate_dataset(cfg.synthetic, cfg.seed)
    write_dataset(ds, out)
    print(f"wrote {len(ds.train)} training and {len(ds.test)} test samples to {out}")
    return 0


def cmd_split(args) -> int:
    dataset = Path(args.dataset)
    path = dataset / "train.jsonl" if dataset.is_dir() else dataset
    samples = read_samples(path)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise RunExists(f"{out} exists (use --force to overwrite)")
    seed = args.seed if args.seed is not None else 0
    split = construct_split(samples, args.vtr_fraction, seed)
    problems = audit_split(split, {s.id: s for s in samples})
    if problems:
        raise SplitAuditFailed("; ".join(problems[:5]))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(split.to_json(), encoding="utf-8")
    sizes = ", ".join(f"{lv.value}={len(ids)}" for lv, ids in split.vte_ids.items())
    print(f"D_vtr={len(split.vtr_ids)}  testing sets: {sizes}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.dataset:
        raise ConfigError("no dataset given (--dataset or 'dataset' in the config)")
    if not cfg.out:
        raise ConfigError("no output directory given (--out or 'out' in the config)")
    report = run_from_dataset_dir(cfg, Path(cfg.dataset), Path(cfg.out), args.force)
    gap = report.gap
    print(f"oIoU {100 * report.overall['oIoU']:.2f}" + (f"  gap {100 * gap:.2f}" if gap is not None else ""))
    return 0


def cmd_report(args) -> int:
    table = comparison_table([Path(p) for p in args.runs])
    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise RunExists(f"{out} exists (use --force to overwrite)")
        out.write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcres", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="build one virtual split and write its manifest")
    s.add_argument("--dataset", required=True, help="dataset directory or a .jsonl file")
    s.add_argument("--vtr-fraction", type=float, default=0.6)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train and evaluate into a run directory")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--vtr-fraction", type=float)
    t.add_argument("--first-order", action="store_true")
    t.add_argument("--out")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="compare completed runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DOMAIN_ERRORS + (SplitAuditFailed,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except USAGE_ERRORS + (json.JSONDecodeError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
