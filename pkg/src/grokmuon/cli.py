"""Command-line entry point: ``grokmuon {run,grid,analyze,selftest}``."""
from __future__ import annotations

import argparse
import logging
import sys
import typing
from pathlib import Path

from . import experiments as ex
from . import stats
from .activations import VARIANTS
from .datasets import TASKS
from .errors import AnalysisError, ConfigError
from .trainer import OPTIMIZERS, RunConfig, delayed_generalization, read_metrics_csv, run_experiment

log = logging.getLogger("grokmuon")

# RunConfig fields exposed as flags; identity fields are handled separately
_RUN_KEYS = ("task", "optimizer", "softmax", "seed")
_OVERRIDE_KEYS = tuple(k for k in RunConfig.field_names() if k not in _RUN_KEYS)
_TYPES = typing.get_type_hints(RunConfig)
DISPLAY = {"adamw": "AdamW", "muon": "Muon"}


def _coerce(key: str, value):
    if value is None or not isinstance(value, str):
        return value
    tp = _TYPES[key]
    if typing.get_origin(tp) is typing.Union:
        if value.lower() in ("", "none"):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        return tp(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {tp.__name__}") from None


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    for key in _OVERRIDE_KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=key.upper())


def _overrides(ns: argparse.Namespace, file_values: dict) -> dict:
    out = {}
    for key in _OVERRIDE_KEYS:
        value = getattr(ns, key, None)
        if value is None:
            value = file_values.get(key)
        if value is not None:
            out[key] = _coerce(key, value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grokmuon", description="Muon vs AdamW grokking experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--config", type=Path, help="key = value file; flags override it")
    run.add_argument("--task", choices=TASKS)
    run.add_argument("--optimizer", choices=OPTIMIZERS)
    run.add_argument("--softmax", choices=VARIANTS)
    run.add_argument("--seed")
    run.add_argument("--output-dir", type=Path)
    _add_override_flags(run)

    grid = sub.add_parser("grid", help="task x optimizer x softmax x seed grid")
    grid.add_argument("--config", type=Path)
    grid.add_argument("--tasks", help="comma-separated")
    grid.add_argument("--optimizers", help="comma-separated")
    grid.add_argument("--softmax-variants", dest="softmax_variants", help="comma-separated")
    grid.add_argument("--seeds", help="comma-separated integers")
    grid.add_argument("--workers", dest="parallel_workers")
    grid.add_argument("--output-dir", type=Path)
    _add_override_flags(grid)

    an = sub.add_parser("analyze", help="summaries, boxplot and t-test from runs.csv")
    an.add_argument("runs_csv", type=Path)
    an.add_argument("--output-dir", type=Path, help="defaults to the runs.csv directory")
    an.add_argument("--by", default="optimizer", help="grouping columns, comma-separated")
    an.add_argument("--pooled", action="store_true", help="pooled-variance t-test instead of Welch")

    st = sub.add_parser("selftest", help="gradient checks and oracle suites")
    st.add_argument("--quick", action="store_true", help="skip the slower end-to-end checks")
    return parser


def _file_values(path) -> dict:
    return ex.parse_config_file(path) if path else {}


def _output_dir(ns, file_values) -> Path:
    if ns.output_dir is not None:
        return ns.output_dir
    if "output_dir" in file_values:
        return Path(file_values["output_dir"])
    return ex.default_output_dir()


def cmd_run(ns) -> int:
    fv = _file_values(ns.config)
    ident = {}
    for key in _RUN_KEYS:
        value = getattr(ns, key) if getattr(ns, key) is not None else fv.get(key)
        if value is not None:
            ident[key] = _coerce(key, value)
    cfg = RunConfig(**ident, **_overrides(ns, fv))
    out_dir = _output_dir(ns, fv)
    log.info("running %s", cfg.run_id)
    result = run_experiment(cfg, progress=lambda m: log.debug(
        "epoch %d train_acc %.4f val_acc %.4f", m.epoch, m.train_acc, m.val_acc))
    ex.save_run(result, out_dir)
    ex.upsert_runs_csv(ex.result_row(result), out_dir / "runs.csv")
    if result.failed:
        print(f"{cfg.run_id}: numeric fault ({result.failure})")
        return 1
    print(f"{cfg.run_id}: grok epoch {result.grok_epoch}" if result.grokked else f"{cfg.run_id}: no grok")
    return 0


def _list(value, cast=str):
    if value is None:
        return None
    if isinstance(value, list):
        return value
    return [cast(v.strip()) for v in str(value).split(",") if v.strip()]


def cmd_grid(ns) -> int:
    fv = _file_values(ns.config)
    kw = {}
    for key, cast in (("tasks", str), ("optimizers", str), ("softmax_variants", str), ("seeds", int)):
        value = _list(getattr(ns, key) if getattr(ns, key) is not None else fv.get(key), cast)
        if value is not None:
            kw[key] = value
    workers = ns.parallel_workers if ns.parallel_workers is not None else fv.get("parallel_workers", fv.get("workers"))
    if workers is not None:
        kw["parallel_workers"] = int(workers)
    grid = ex.GridConfig(overrides=_overrides(ns, fv), output_dir=_output_dir(ns, fv), **kw)
    configs = grid.run_configs()  # validates every run before any training starts
    print(f"grid: {len(configs)} runs on {grid.parallel_workers} worker(s) -> {grid.output_dir}")

    def done(cfg, res):
        row, failed, reason = res
        status = "FAILED " + reason if failed else (f"grok {row['grok_epoch']}" if row["grok_epoch"] else "no grok")
        print(f"  {cfg.run_id}: {status}", flush=True)

    outcome = ex.run_grid(grid, on_done=done)
    print(f"grid finished: {outcome.completed} completed, {len(outcome.failures)} failed")
    return 0 if outcome.completed >= 1 else 1


def _shape_report(rows: list[dict], runs_dir: Path) -> list[tuple]:
    """(run_id, grok_epoch, verdict) for each grokked run."""
    out = []
    for r in rows:
        if r["grok_epoch"] is None:
            continue
        rid = ex.row_run_id(r)
        path = ex.metrics_path(runs_dir, rid)
        if not path.exists():
            out.append((rid, r["grok_epoch"], "missing"))
            continue
        ok = delayed_generalization(read_metrics_csv(path), r["grok_epoch"])
        out.append((rid, r["grok_epoch"], "ok" if ok else "no-delay"))
    return out


def cmd_analyze(ns) -> int:
    rows = ex.read_runs_csv(ns.runs_csv)
    out_dir = ns.output_dir or ns.runs_csv.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    by = tuple(k.strip() for k in ns.by.split(","))
    bad = [k for k in by if k not in ("task", "optimizer", "softmax")]
    if bad:
        raise ConfigError(f"cannot group by {bad}; use task, optimizer, softmax")

    summary = stats.summarize(rows, by)
    stats.write_summary_csv(summary, out_dir / "summary.csv")
    boxes = stats.boxplot_emit(rows, out_dir, by)
    for group in {r["group"] for r in summary} - {b.group for b in boxes}:
        print(f"note: group {group} has no grokked runs; left out of the boxplot")

    by_opt = stats.summarize(rows, ("optimizer",))
    print(f"{'Optimizer':<10} {'Mean Grokking Epoch':>20} {'Grok rate':>10} {'n':>4}")
    for r in by_opt:
        mean = "-" if r["mean_epoch"] is None else f"{r['mean_epoch']:.2f}"
        print(f"{DISPLAY.get(r['group'], r['group']):<10} {mean:>20} {r['grok_rate']:>10.2f} {r['n']:>4}")

    epochs = {g: stats.grok_epochs(m) for g, m in stats.group_runs(rows, ("optimizer",)).items()}
    if "adamw" in epochs and "muon" in epochs:
        try:
            res = stats.welch_t_test(epochs["adamw"], epochs["muon"], pooled=ns.pooled)
        except AnalysisError as exc:
            print(f"t-test skipped: {exc}")
        else:
            kind = "pooled" if ns.pooled else "Welch"
            print(f"Mean Grokking Epoch (AdamW): {res.mean_a:.2f}")
            print(f"Mean Grokking Epoch (Muon): {res.mean_b:.2f}")
            print(f"T-statistic ({kind}, df={res.degrees_of_freedom:.2f}): {res.t_statistic:.4f}")
            print(f"P-value: {res.p_value:.3g}")
    else:
        print("t-test skipped: needs grokked runs from both adamw and muon "
              f"(found {', '.join(sorted(epochs)) or 'none'})")

    shape = _shape_report(rows, ns.runs_csv.parent)
    with open(out_dir / "grokking_shape.csv", "w") as fh:
        fh.write("run_id,grok_epoch,delayed_generalization\n")
        for rid, ge, verdict in shape:
            fh.write(f"{rid},{ge},{verdict}\n")
    ok = sum(v == "ok" for _, _, v in shape)
    print(f"grokking shape (train>=0.99 while val<0.5 before grok): {ok}/{len(shape)} grokked runs")
    for rid, _, verdict in shape:
        if verdict != "ok":
            print(f"  {rid}: {verdict}")
    return 0


def cmd_selftest(ns) -> int:
    from .selftest import run_all

    return 0 if run_all(quick=ns.quick) else 1


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "grid": cmd_grid, "analyze": cmd_analyze, "selftest": cmd_selftest}
    try:
        return handlers[ns.command](ns)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"grokmuon {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except AnalysisError as exc:
        print(f"grokmuon {ns.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
