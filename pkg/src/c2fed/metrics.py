"""Federated continual learning metrics over an accuracy matrix.

The matrix records, for each evaluation point r (a round that ends a phase)
and each task seen by then, the accuracy of the global model on that task.
Per-task bookkeeping adds the round a task was first seen, the round it
finished, and optionally a single-task training reference accuracy.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class TaskRecord:
    task_id: int
    first_seen: int
    finish: int


@dataclass
class AccuracyMatrix:
    eval_points: list
    tasks: list
    acc: dict = field(default_factory=dict)  # (task_id, eval_point) -> accuracy
    single_task_acc: dict = field(default_factory=dict)

    def existing(self, r: int) -> list[TaskRecord]:
        return [t for t in self.tasks if t.first_seen <= r]

    def final(self, task_id: int) -> float:
        return self.acc[(task_id, max(self.eval_points))]

    def validate(self) -> None:
        for r in self.eval_points:
            for t in self.existing(r):
                if (t.task_id, r) not in self.acc:
                    raise InvalidInputError(f"missing accuracy for task {t.task_id} at point {r}")
                a = self.acc[(t.task_id, r)]
                if not 0.0 <= a <= 1.0:
                    raise InvalidInputError(f"accuracy {a} outside [0, 1]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        ids = [t.task_id for t in self.tasks]
        w.writerow(["eval_point"] + [f"task_{i}" for i in ids])
        for r in self.eval_points:
            w.writerow([r] + [repr(self.acc[(i, r)]) if (i, r) in self.acc else "" for i in ids])
        return buf.getvalue()

    def tasks_json(self) -> list:
        return [{"task_id": t.task_id, "first_seen": t.first_seen, "finish": t.finish,
                 "single_task_acc": self.single_task_acc.get(t.task_id)} for t in self.tasks]

    @classmethod
    def from_csv(cls, text: str, tasks_meta: Optional[list] = None) -> "AccuracyMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        ids = [int(h.split("_", 1)[1]) for h in rows[0][1:]]
        points = []
        acc = {}
        for row in rows[1:]:
            r = int(row[0])
            points.append(r)
            for i, cell in zip(ids, row[1:]):
                if cell != "":
                    acc[(i, r)] = float(cell)
        single = {}
        if tasks_meta:
            tasks = [TaskRecord(int(m["task_id"]), int(m["first_seen"]), int(m["finish"])) for m in tasks_meta]
            single = {int(m["task_id"]): float(m["single_task_acc"]) for m in tasks_meta
                      if m.get("single_task_acc") is not None}
        else:
            # infer first/last points from filled cells; finish defaults to the last point
            tasks = []
            for i in ids:
                seen = [r for r in points if (i, r) in acc]
                tasks.append(TaskRecord(i, min(seen), max(seen)))
        return cls(points, tasks, acc, single)


def _need_points(m: AccuracyMatrix) -> None:
    if not m.eval_points or not m.tasks:
        raise InvalidInputError("accuracy matrix is empty")


def avg(m: AccuracyMatrix) -> float:
    _need_points(m)
    return float(np.mean([m.final(t.task_id) for t in m.tasks]))


def faa(m: AccuracyMatrix) -> float:
    """Final average accuracy; with one final evaluation it coincides with ``avg``."""
    return avg(m)


def aia(m: AccuracyMatrix, variant: str = "mean") -> float:
    _need_points(m)
    per_point = []
    for r in m.eval_points:
        vals = [m.acc[(t.task_id, r)] for t in m.existing(r)]
        per_point.append(_reduce(vals, variant))
    return float(np.mean(per_point))


def fm(m: AccuracyMatrix, variant: str = "mean") -> float:
    """Average over eval points of (best earlier accuracy - current accuracy); positive means forgetting."""
    _need_points(m)
    per_point = []
    for r in m.eval_points:
        terms = []
        for t in m.existing(r):
            earlier = [m.acc[(t.task_id, s)] for s in m.eval_points if s < r and (t.task_id, s) in m.acc]
            terms.append(max(earlier) - m.acc[(t.task_id, r)] if earlier else 0.0)
        per_point.append(_reduce(terms, variant))
    return float(np.mean(per_point))


def _reduce(vals: list, variant: str) -> float:
    if variant == "sum":
        return float(np.sum(vals))
    if variant == "mean":
        return float(np.mean(vals)) if vals else 0.0
    raise InvalidInputError(f"unknown variant {variant!r}")


def _need_single(m: AccuracyMatrix) -> None:
    missing = [t.task_id for t in m.tasks if t.task_id not in m.single_task_acc]
    if missing:
        raise InvalidInputError(f"single-task reference accuracy missing for tasks {missing}")


def ft(m: AccuracyMatrix) -> float:
    _need_single(m)
    return float(np.mean([m.acc[(t.task_id, t.finish)] - m.single_task_acc[t.task_id] for t in m.tasks]))


def bt(m: AccuracyMatrix) -> float:
    _need_points(m)
    return float(np.mean([m.final(t.task_id) - m.acc[(t.task_id, t.finish)] for t in m.tasks]))


def ct(m: AccuracyMatrix) -> float:
    _need_single(m)
    return float(np.mean([m.final(t.task_id) - m.single_task_acc[t.task_id] for t in m.tasks]))


def all_metrics(m: AccuracyMatrix, variant: str = "mean") -> dict:
    out = {"Avg": avg(m), "AIA": aia(m, variant), "FM": fm(m, variant), "BT": bt(m), "FAA": faa(m)}
    if all(t.task_id in m.single_task_acc for t in m.tasks):
        out["FT"] = ft(m)
        out["CT"] = ct(m)
    else:
        out["FT"] = None
        out["CT"] = None
    out["variants"] = {"aia": variant, "fm": variant}
    return out


def write_metrics(m: AccuracyMatrix, path: Path, variant: str = "mean") -> dict:
    out = all_metrics(m, variant)
    out["tasks"] = m.tasks_json()
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True), encoding="utf-8")
    return out
