"""Run directories and cross-run comparison tables.

Layout of a run directory::

    config.json             RunConfig snapshot with its hash
    splits/epoch_NNN.json   virtual split manifest per epoch (meta modes)
    steps.jsonl             one TrainStepReport per iteration
    checkpoints/epoch_NNN.ckpt, checkpoints/final.ckpt
    eval.json               EvalReport on the test corpus
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .config import RunConfig
from .metatrain import (
    EvalReport, TrainInventory, TrainResult, evaluate, model_config_for, train, train_baseline,
)
from .model import SampleStore, save_checkpoint
from .synthetic import Dataset, read_dataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("oIoU", "P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9")


class RunExists(FileExistsError):
    pass


class IncompatibleRuns(ValueError):
    pass


def prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise RunExists(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def execute_run(cfg: RunConfig, dataset: Dataset, out_dir: Path, force: bool = False) -> EvalReport:
    prepare_dir(out_dir, force)
    torch.set_num_threads(1)
    meta = cfg.effective_meta()
    syn = dataset.config
    mcfg = model_config_for(dataset.train, syn.grammar.shapes, syn.grammar.colors, meta, syn.height, syn.width)
    snapshot = cfg.to_dict()
    snapshot["config_hash"] = cfg.hash()
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "checkpoints").mkdir()
    store = SampleStore(dataset.train, mcfg)

    def on_epoch(epoch: int, result: TrainResult) -> None:
        save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt", result.theta, mcfg)

    if cfg.mode == "baseline":
        result = train_baseline(meta, dataset.train, mcfg, store, on_epoch=on_epoch)
    else:
        result = train(meta, dataset.train, mcfg, store, on_epoch=on_epoch)
        (out_dir / "splits").mkdir()
        for split in result.splits:
            (out_dir / "splits" / f"epoch_{split.epoch:03d}.json").write_text(split.to_json(), encoding="utf-8")
    with open(out_dir / "steps.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for step in result.steps:
            fh.write(step.to_json() + "\n")
    save_checkpoint(out_dir / "checkpoints" / "final.ckpt", result.theta, mcfg,
                    {"total_updates": result.total_updates})
    report = evaluate(result.theta, dataset.test, TrainInventory.of(dataset.train), mcfg)
    (out_dir / "eval.json").write_text(report.to_json(), encoding="utf-8")
    return report


def run_from_dataset_dir(cfg: RunConfig, dataset_dir: Path, out_dir: Path, force: bool = False) -> EvalReport:
    if not (dataset_dir / "train.jsonl").is_file():
        raise FileNotFoundError(f"no dataset at {dataset_dir}")
    return execute_run(cfg, read_dataset(dataset_dir), out_dir, force)


# --------------------------------------------------------------------------
# reporting

@dataclass
class RunSummary:
    path: Path
    mode: str
    report: EvalReport
    fingerprint: str | None


def load_run(path: Path) -> RunSummary:
    path = Path(path)
    eval_path = path / "eval.json"
    if not eval_path.is_file():
        raise FileNotFoundError(f"{path} has no eval.json; is the run complete?")
    doc = json.loads(eval_path.read_text(encoding="utf-8"))
    cfg = json.loads((path / "config.json").read_text(encoding="utf-8"))
    rep = EvalReport(doc["overall"], doc["novel"], doc["non_novel"], doc["sizes"])
    return RunSummary(path, cfg.get("mode", "?"), rep, doc.get("test_fingerprint"))


def _cell(value: float | None, base: float | None, with_delta: bool) -> str:
    if value is None:
        return "-"
    text = f"{100 * value:6.2f}"
    if with_delta and base is not None:
        d = 100 * (value - base)
        text += f" ({'+' if d >= 0 else '-'}{abs(d):.2f})"
    return text


def report_rows(runs: Sequence[RunSummary]) -> list[dict[str, float | str | None]]:
    rows = []
    for r in runs:
        row: dict[str, float | str | None] = {"run": r.path.name, "mode": r.mode}
        for col in METRIC_COLUMNS:
            row[col] = r.report.overall[col]
        row["Novel"] = r.report.novel["oIoU"] if r.report.novel else None
        row["Non-novel"] = r.report.non_novel["oIoU"] if r.report.non_novel else None
        row["gap"] = r.report.gap
        rows.append(row)
    return rows


def comparison_table(run_dirs: Sequence[Path]) -> str:
    """Aligned text table; from the second run on, deltas against the first run are in parentheses."""
    if not run_dirs:
        raise ValueError("need at least one run")
    runs = [load_run(Path(p)) for p in run_dirs]
    prints = {r.fingerprint for r in runs}
    if len(prints) > 1:
        raise IncompatibleRuns("runs were evaluated on different test corpora")
    rows = report_rows(runs)
    cols = ["run", "mode", *METRIC_COLUMNS, "Novel", "Non-novel", "gap"]
    base = rows[0]
    table = [cols]
    for i, row in enumerate(rows):
        line = [str(row["run"]), str(row["mode"])]
        for col in cols[2:]:
            line.append(_cell(row[col], base[col], i > 0))
        table.append(line)
    widths = [max(len(r[j]) for r in table) for j in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) if j < 2 else cell.rjust(w) for j, (cell, w) in enumerate(zip(r, widths)))
             for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
