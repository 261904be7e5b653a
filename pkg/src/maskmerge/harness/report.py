"""Evaluation reports and their CSV / JSON serializations."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ContractError

CSV_COLUMNS = ("method", "task", "group", "accuracy")


@dataclass(frozen=True)
class MethodResult:
    """Per-task metrics for one merging method, with its exact average."""

    method: str
    task_metrics: dict[str, float]
    extras: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.task_metrics.values())))

    def group_average(self, task_ids: Iterable[str]) -> float:
        picked = [self.task_metrics[t] for t in task_ids]
        return float(np.mean(picked)) if picked else float("nan")


@dataclass(frozen=True)
class EvalReport:
    results: tuple[MethodResult, ...]
    metadata: dict = field(default_factory=dict)
    seen_tasks: tuple[str, ...] = ()
    unseen_tasks: tuple[str, ...] = ()

    @property
    def is_generalization(self) -> bool:
        return bool(self.unseen_tasks)

    def method(self, name: str) -> MethodResult:
        for r in self.results:
            if r.method == name:
                return r
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {
            "results": [
                {
                    "method": r.method,
                    "task_metrics": r.task_metrics,
                    "average": r.average,
                    "extras": r.extras,
                }
                for r in self.results
            ],
            "metadata": self.metadata,
            "seen_tasks": list(self.seen_tasks),
            "unseen_tasks": list(self.unseen_tasks),
        }

    @staticmethod
    def from_json_dict(payload: dict) -> "EvalReport":
        results = tuple(
            MethodResult(
                method=r["method"],
                task_metrics={k: float(v) for k, v in r["task_metrics"].items()},
                extras=r.get("extras", {}),
            )
            for r in payload["results"]
        )
        return EvalReport(
            results=results,
            metadata=payload.get("metadata", {}),
            seen_tasks=tuple(payload.get("seen_tasks", ())),
            unseen_tasks=tuple(payload.get("unseen_tasks", ())),
        )


def report_rows(report: EvalReport) -> list[dict[str, str]]:
    """Flat row view used by the CSV writer; averages come last per method."""
    rows = []
    groups = {}
    for t in report.seen_tasks:
        groups[t] = "seen"
    for t in report.unseen_tasks:
        groups[t] = "unseen"
    for r in report.results:
        for task, value in r.task_metrics.items():
            rows.append({
                "method": r.method,
                "task": task,
                "group": groups.get(task, ""),
                "accuracy": f"{value:.4f}",
            })
        rows.append({
            "method": r.method, "task": "average", "group": "",
            "accuracy": f"{r.average:.4f}",
        })
        if report.is_generalization:
            rows.append({
                "method": r.method, "task": "average_seen", "group": "seen",
                "accuracy": f"{r.group_average(report.seen_tasks):.4f}",
            })
            rows.append({
                "method": r.method, "task": "average_unseen", "group": "unseen",
                "accuracy": f"{r.group_average(report.unseen_tasks):.4f}",
            })
    return rows


def emit_report(
    report: EvalReport,
    out_dir: str | Path,
    formats: Sequence[str] = ("csv", "json"),
    stem: str = "report",
) -> list[Path]:
    """Write the report in the requested formats, returning the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path = out_dir / f"{stem}.csv"
            with open(path, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
                writer.writeheader()
                writer.writerows(report_rows(report))
        elif fmt == "json":
            path = out_dir / f"{stem}.json"
            with open(path, "w") as f:
                json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
        else:
            raise ContractError(f"unknown report format '{fmt}'")
        written.append(path)
    return written


def load_report(path: str | Path) -> EvalReport:
    with open(path) as f:
        return EvalReport.from_json_dict(json.load(f))


def emit_trace_csv(rows: list[dict], path: str | Path) -> Path:
    """Write optimization-curve rows (no wall-clock columns, stays byte-stable)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path
