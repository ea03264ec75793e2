"""Result files: per-row CSV/JSON, cross-pass aggregates, retention summary and lambda sweep table.

Files are byte-stable: rows keep record order and floats are written with
their shortest round-tripping repr.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidInputError, ResultsIOError
from schemas import AggregatePointRead, EvalRow, ExperimentConfig, ExperimentResult, RunRecord

logger = logging.getLogger(__name__)

RUNS_CSV = "runs.csv"
RUNS_JSON = "runs.json"
AGGREGATE_CSV = "aggregate.csv"
AGGREGATE_JSON = "aggregate.json"
SUMMARY_CSV = "summary.csv"
SWEEP_CSV = "sweep.csv"


def runs_header(num_tasks: int, with_train: bool = False, with_failed: bool = False) -> List[str]:
    header = ["pass", "method", "training_task", "global_step"]
    header += [f"task_{k}_acc" for k in range(num_tasks)]
    header.append("mean_acc")
    if with_train:
        header += [f"train_task_{k}_acc" for k in range(num_tasks)]
    if with_failed:
        header.append("failed")
    return header


def _open_for_write(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as e:
        raise ResultsIOError(f"Cannot write {path}: {e}") from e


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with _open_for_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _write_json(path: Path, text: str) -> Path:
    with _open_for_write(path) as fh:
        fh.write(text)
        fh.write("\n")
    return path


def aggregate_rows(rows: Iterable[EvalRow]) -> List[AggregatePointRead]:
    """Mean and sample standard deviation across passes per (method, training_task, global_step)."""
    groups: "OrderedDict[Tuple[str, int, int], List[EvalRow]]" = OrderedDict()
    for row in rows:
        groups.setdefault((row.method, row.training_task, row.global_step), []).append(row)
    points = []
    for (method, training_task, global_step), members in groups.items():
        accs = np.array([m.accuracies for m in members])
        means = np.array([m.mean_accuracy for m in members])
        points.append(AggregatePointRead(
            method=method,
            training_task=training_task,
            global_step=global_step,
            n=len(members),
            mean_accuracy=float(means.mean()),
            sd_accuracy=float(means.std(ddof=1)) if len(members) > 1 else None,
            task_means=[float(v) for v in accs.mean(axis=0)],
        ))
    return points


def _task_sds(rows: Sequence[EvalRow], point: AggregatePointRead) -> List[Optional[float]]:
    members = [r for r in rows if (r.method, r.training_task, r.global_step)
               == (point.method, point.training_task, point.global_step)]
    if len(members) < 2:
        return [None] * len(point.task_means)
    return [float(v) for v in np.array([m.accuracies for m in members]).std(axis=0, ddof=1)]


def write_aggregate(rows: Sequence[EvalRow], out_dir: Path, excluded_runs: int = 0) -> List[Path]:
    points = aggregate_rows(rows)
    if not points:
        raise InvalidInputError("Nothing to aggregate: every run failed")
    num_tasks = len(points[0].task_means)
    header = ["method", "training_task", "global_step", "n"]
    for k in range(num_tasks):
        header += [f"task_{k}_acc_mean", f"task_{k}_acc_sd"]
    header += ["mean_acc_mean", "mean_acc_sd"]
    table = []
    for point in points:
        sds = _task_sds(rows, point)
        line = [point.method, point.training_task, point.global_step, point.n]
        for mean, sd in zip(point.task_means, sds):
            line += [mean, "" if sd is None else sd]
        line += [point.mean_accuracy, "" if point.sd_accuracy is None else point.sd_accuracy]
        table.append(line)
    doc = {
        "excluded_runs": excluded_runs,
        "points": [p.model_dump() for p in points],
    }
    return [
        _write_csv(out_dir / AGGREGATE_CSV, header, table),
        _write_json(out_dir / AGGREGATE_JSON, json.dumps(doc, indent=1)),
    ]


def retention_rows(records: Sequence[RunRecord]) -> List[list]:
    """Per run and task: accuracy right after the task, final accuracy, and their ratio."""
    out = []
    for record in records:
        if record.failed:
            continue
        for t, (post, final) in enumerate(zip(record.post_task_accuracy, record.final_accuracy)):
            ratio = "" if not post else final / post
            out.append([record.pass_id, record.method, record.lambda_, t, post, final, ratio,
                        record.early_stop_steps.get(t, "")])
    return out


def emit_results(records: Sequence[RunRecord], config: ExperimentConfig, out_dir=None,
                 formats: Optional[Sequence[str]] = None) -> List[Path]:
    """Write runs.csv / runs.json, aggregate.csv / aggregate.json and summary.csv.

    Rows of failed runs stay in runs.csv, marked by a trailing ``failed`` column that
    only appears when some run failed; aggregates and the summary leave them out.
    """
    if not records:
        raise InvalidInputError("No run records to emit")
    out_dir = Path(out_dir or config.output_dir)
    formats = formats or config.formats
    with_train = any(r.train_accuracies is not None for rec in records for r in rec.rows)
    num_tasks = len(records[0].task_descriptors)
    good = [r for r in records if not r.failed]
    excluded = len(records) - len(good)
    if excluded:
        logger.warning("%d failed run(s) excluded from aggregates", excluded)

    written = []
    if "csv" in formats:
        table = []
        for record in records:
            for row in record.rows:
                line = [row.pass_id, row.method, row.training_task, row.global_step, *row.accuracies,
                        row.mean_accuracy]
                if with_train:
                    line += row.train_accuracies or [""] * num_tasks
                if excluded:
                    line.append(int(record.failed))
                table.append(line)
        written.append(_write_csv(out_dir / RUNS_CSV, runs_header(num_tasks, with_train, bool(excluded)), table))
    if "json" in formats:
        result = ExperimentResult(config=config, records=list(records))
        written.append(_write_json(out_dir / RUNS_JSON, result.model_dump_json(indent=1, by_alias=True)))
    if good:
        written += write_aggregate([row for r in good for row in r.rows], out_dir, excluded)
        written.append(_write_csv(
            out_dir / SUMMARY_CSV,
            ["pass", "method", "lambda", "task", "post_task_acc", "final_acc", "retention", "early_stop_step"],
            retention_rows(good),
        ))
    for path in written:
        logger.info("Wrote %s", path)
    return written


def load_results(path) -> ExperimentResult:
    try:
        return ExperimentResult.model_validate_json(Path(path).read_text())
    except OSError as e:
        raise ResultsIOError(f"Cannot read {path}: {e}") from e


def read_runs_csv(path) -> List[EvalRow]:
    """Parse a runs.csv back into rows of runs that did not fail (train-split columns are ignored)."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            task_cols = sorted(
                (c for c in reader.fieldnames or [] if c.startswith("task_") and c.endswith("_acc")),
                key=lambda c: int(c.split("_")[1]),
            )
            rows = [
                EvalRow(
                    pass_id=int(line["pass"]),
                    method=line["method"],
                    training_task=int(line["training_task"]),
                    global_step=int(line["global_step"]),
                    accuracies=[float(line[c]) for c in task_cols],
                    mean_accuracy=float(line["mean_acc"]),
                )
                for line in reader
                if line.get("failed", "0") != "1"
            ]
    except OSError as e:
        raise ResultsIOError(f"Cannot read {path}: {e}") from e
    except (KeyError, ValueError) as e:
        raise InvalidInputError(f"{path} is not a runs CSV: {e}") from e
    return rows


def report(run_paths: Sequence, out_dir) -> Dict[str, float]:
    """Aggregate one or more prior runs.csv files (or their directories).

    Passes from different files are renumbered so they stay distinct. Returns the
    final mean accuracy per method, averaged over passes.
    """
    rows: List[EvalRow] = []
    offset = 0
    for p in run_paths:
        p = Path(p)
        csv_path = p / RUNS_CSV if p.is_dir() else p
        part = read_runs_csv(csv_path)
        for row in part:
            row.pass_id += offset
        offset = max([r.pass_id for r in part], default=offset - 1) + 1
        rows.extend(part)
    write_aggregate(rows, Path(out_dir))
    last: Dict[Tuple[str, int], EvalRow] = {}
    for row in rows:
        last[(row.method, row.pass_id)] = row
    finals: Dict[str, List[float]] = {}
    for (method, _), row in last.items():
        finals.setdefault(method, []).append(float(np.mean(row.accuracies)))
    return {method: float(np.mean(values)) for method, values in finals.items()}


def write_sweep(results, out_dir) -> Path:
    """One line per (method, lambda): final mean accuracy, task-1 retention, failures."""
    table = []
    for label, lam, records in results:
        good = [r for r in records if not r.failed]
        final = [float(np.mean(r.final_accuracy)) for r in good]
        first = [r.final_accuracy[0] for r in good]
        post_first = [r.post_task_accuracy[0] for r in good]
        table.append([
            label, lam, len(good), len(records) - len(good),
            float(np.mean(final)) if final else "",
            float(np.mean(first)) if first else "",
            float(np.mean(post_first)) if post_first else "",
        ])
    return _write_csv(
        Path(out_dir) / SWEEP_CSV,
        ["method", "lambda", "runs", "failed", "final_mean_acc", "task_0_final_acc", "task_0_post_acc"],
        table,
    )
