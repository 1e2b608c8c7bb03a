"""Run tables, metrics files and the multi-run grid scheduler."""
from __future__ import annotations

import csv
import itertools
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import AnalysisError, ConfigError
from .trainer import RunConfig, RunResult, run_experiment, write_metrics_csv

log = logging.getLogger(__name__)

RUNS_HEADER = ("task", "optimizer", "softmax", "seed", "grokked", "grok_epoch",
               "final_train_acc", "final_val_acc", "epochs_run", "wall_time_s")
OUTPUT_DIR_ENV = "GROKMUON_OUTPUT_DIR"


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "results"))


def backup(path: Path) -> None:
    """Copy an existing file to ``<path>.bak`` before it is overwritten."""
    if path.exists():
        shutil.copy2(path, path.with_name(path.name + ".bak"))


def metrics_path(out_dir: Path, run_id: str) -> Path:
    return Path(out_dir) / f"metrics_{run_id}.csv"


def result_row(result: RunResult) -> dict:
    def f6(v):
        return "" if v != v else f"{v:.6g}"

    return {
        "task": result.task,
        "optimizer": result.optimizer,
        "softmax": result.softmax_variant,
        "seed": str(result.seed),
        "grokked": "true" if result.grokked else "false",
        "grok_epoch": "" if result.grok_epoch is None else str(result.grok_epoch),
        "final_train_acc": f6(result.final("train_acc")),
        "final_val_acc": f6(result.final("val_acc")),
        "epochs_run": str(result.epochs_run),
        "wall_time_s": f"{result.wall_time_seconds:.3f}",
    }


def row_key(row: dict) -> tuple:
    return (row["task"], row["optimizer"], row["softmax"], int(row["seed"]))


def row_run_id(row: dict) -> str:
    return f"{row['task']}-{row['optimizer']}-{row['softmax']}-{row['seed']}"


def write_runs_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RUNS_HEADER)
        w.writeheader()
        w.writerows(rows)


def read_runs_csv(path) -> list[dict]:
    """Parse a ``runs.csv``; malformed content raises AnalysisError naming the line."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise AnalysisError(f"{path}: line 1: empty file") from None
        if tuple(header) != RUNS_HEADER:
            raise AnalysisError(f"{path}: line 1: expected header {','.join(RUNS_HEADER)}")
        for values in reader:
            line = reader.line_num
            if not values:
                continue
            if len(values) != len(RUNS_HEADER):
                raise AnalysisError(f"{path}: line {line}: expected {len(RUNS_HEADER)} fields, got {len(values)}")
            row = dict(zip(RUNS_HEADER, values))
            try:
                row["seed"] = int(row["seed"])
                row["grokked"] = {"true": True, "false": False}[row["grokked"].lower()]
                row["grok_epoch"] = int(row["grok_epoch"]) if row["grok_epoch"] else None
                row["epochs_run"] = int(row["epochs_run"])
                for k in ("final_train_acc", "final_val_acc", "wall_time_s"):
                    row[k] = float(row[k]) if row[k] else float("nan")
            except (KeyError, ValueError) as exc:
                raise AnalysisError(f"{path}: line {line}: bad value ({exc})") from None
            if row["grokked"] != (row["grok_epoch"] is not None):
                raise AnalysisError(f"{path}: line {line}: grokked flag disagrees with grok_epoch")
            rows.append(row)
    return rows


def upsert_runs_csv(row: dict, path: Path) -> None:
    """Add ``row`` to ``runs.csv``, replacing an existing row for the same run."""
    path = Path(path)
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    if any(row_key(r) == row_key(row) for r in rows):
        backup(path)
        rows = [r for r in rows if row_key(r) != row_key(row)]
    rows.append(row)
    write_runs_csv(rows, path)


def save_run(result: RunResult, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = metrics_path(out_dir, result.run_id)
    backup(path)
    write_metrics_csv(result, path)
    return path


@dataclass
class GridConfig:
    tasks: list = field(default_factory=lambda: ["gcd", "mod_add", "mod_div", "mod_exp", "mod_mul", "parity"])
    optimizers: list = field(default_factory=lambda: ["adamw", "muon"])
    softmax_variants: list = field(default_factory=lambda: ["softmax", "stablemax", "sparsemax"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    overrides: dict = field(default_factory=dict)
    output_dir: Path = field(default_factory=default_output_dir)
    parallel_workers: int = 1

    def __post_init__(self):
        for name in ("tasks", "optimizers", "softmax_variants", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"grid {name} must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"grid seeds must be distinct, got {self.seeds}")
        if self.parallel_workers < 1:
            raise ConfigError("parallel_workers must be >= 1")
        self.output_dir = Path(self.output_dir)

    def run_configs(self) -> list[RunConfig]:
        """Every condition x seed, sorted by (task, optimizer, softmax, seed)."""
        combos = sorted(itertools.product(self.tasks, self.optimizers, self.softmax_variants, self.seeds))
        return [RunConfig(task=t, optimizer=o, softmax=s, seed=int(sd), **self.overrides)
                for t, o, s, sd in combos]


def _execute(cfg: RunConfig, out_dir: str) -> tuple[dict, bool, str]:
    result = run_experiment(cfg)
    save_run(result, Path(out_dir))
    return result_row(result), result.failed, result.failure


@dataclass
class GridOutcome:
    rows: list
    failures: list  # (run_id, reason)

    @property
    def completed(self) -> int:
        return len(self.rows) - len(self.failures)


def run_grid(grid: GridConfig, on_done=None) -> GridOutcome:
    """Run every configuration, then write ``runs.csv`` once in sorted order."""
    configs = grid.run_configs()
    out_dir = grid.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[Optional[tuple]] = [None] * len(configs)
    if grid.parallel_workers == 1:
        for i, cfg in enumerate(configs):
            results[i] = _execute(cfg, str(out_dir))
            if on_done:
                on_done(cfg, results[i])
    else:
        with ProcessPoolExecutor(max_workers=grid.parallel_workers) as pool:
            futures = [pool.submit(_execute, cfg, str(out_dir)) for cfg in configs]
            for i, (cfg, fut) in enumerate(zip(configs, futures)):
                results[i] = fut.result()
                if on_done:
                    on_done(cfg, results[i])
    rows = [r[0] for r in results]
    failures = [(row_run_id(r[0]), r[2]) for r in results if r[1]]
    runs_path = out_dir / "runs.csv"
    backup(runs_path)
    write_runs_csv(rows, runs_path)
    if failures:
        with open(out_dir / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("run_id", "reason"))
            w.writerows(failures)
    return GridOutcome(rows, failures)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Dashes in keys become underscores."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out

