"""Synthetic feature-space benchmarks for federated continual learning.

A *universe* is a set of axis-aligned Gaussian classes. Tasks pick subsets of
classes (overlapping or disjoint), clients receive tasks according to a phase
schedule, and datasets are drawn from the class Gaussians. Everything here is
a pure function of its arguments and the generator passed in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, GenerationError, InvalidInputError

MAX_PLACEMENT_TRIES = 10_000


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    true_mean: np.ndarray
    true_std: np.ndarray

    def __post_init__(self):
        if np.any(self.true_std <= 0):
            raise InvalidInputError(f"class {self.class_id}: std entries must be positive")
        if self.true_mean.shape != self.true_std.shape:
            raise InvalidInputError(f"class {self.class_id}: mean/std dimension mismatch")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_ids: tuple[int, ...]
    samples_per_class_fraction: float = 1.0

    def __post_init__(self):
        if not self.class_ids:
            raise InvalidInputError(f"task {self.task_id} has no classes")
        if not 0.0 < self.samples_per_class_fraction <= 1.0:
            raise InvalidInputError("samples_per_class_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class Phase:
    phase_id: int
    # client_id -> task_id, or None when the client is idle
    assignments: dict[int, Optional[int]]
    new_clients: tuple[int, ...]


@dataclass(frozen=True)
class StageSchedule:
    phases: tuple[Phase, ...]
    rounds_per_phase: int

    def task_ids(self) -> list[int]:
        seen: list[int] = []
        for ph in self.phases:
            for t in ph.assignments.values():
                if t is not None and t not in seen:
                    seen.append(t)
        return seen


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    """Column-stacked samples: ``x`` is (n, D), ``y`` holds class ids."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield LabeledSample(self.x[i], int(self.y[i]))

    @classmethod
    def from_samples(cls, samples, dim: int) -> "Dataset":
        samples = list(samples)
        if not samples:
            return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))
        x = np.stack([s.features for s in samples]).astype(np.float64)
        y = np.array([s.label for s in samples], dtype=np.int64)
        return cls(x, y)

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))


def gen_universe(
    num_classes: int,
    feature_dim: int,
    rng: np.random.Generator,
    *,
    mean_scale: float = 1.0,
    std_range: tuple[float, float] = (0.5, 1.0),
    separation: float = 2.0,
) -> list[ClassSpec]:
    """Draw ``num_classes`` Gaussians whose means are pairwise at least
    ``separation`` times the average std apart (rejection placement)."""
    if num_classes < 2 or feature_dim < 2:
        raise ConfigError("need num_classes >= 2 and feature_dim >= 2")
    lo, hi = std_range
    if not 0 < lo <= hi:
        raise ConfigError("std_range must satisfy 0 < lo <= hi")
    stds = rng.uniform(lo, hi, size=(num_classes, feature_dim))
    min_dist = separation * float(stds.mean())
    means: list[np.ndarray] = []
    tries = 0
    while len(means) < num_classes:
        tries += 1
        if tries > MAX_PLACEMENT_TRIES:
            raise GenerationError(
                f"could not place {num_classes} classes at separation {min_dist:.3f}"
            )
        cand = rng.normal(0.0, mean_scale, size=feature_dim)
        if means and np.min(np.linalg.norm(np.asarray(means) - cand, axis=1)) < min_dist:
            continue
        means.append(cand)
    return [ClassSpec(i, means[i], stds[i]) for i in range(num_classes)]


def gen_task_stream(
    universe: list[ClassSpec],
    num_tasks: int,
    classes_per_task: int,
    per_class_fraction: float,
    overlap_mode: str,
    rng: np.random.Generator,
    *,
    max_shared: Optional[int] = None,
) -> list[TaskSpec]:
    """Task stream over the universe.

    ``random-overlap`` draws each task's classes uniformly; when ``max_shared``
    is set, candidates sharing more than that many classes with any earlier
    task are rejected. ``disjoint`` partitions a random permutation.
    """
    n = len(universe)
    ids = np.array([c.class_id for c in universe])
    if classes_per_task > n or classes_per_task < 1:
        raise ConfigError("classes_per_task must be in [1, num_classes]")
    if overlap_mode == "disjoint":
        if num_tasks * classes_per_task > n:
            raise ConfigError(
                f"disjoint stream needs {num_tasks * classes_per_task} classes, universe has {n}"
            )
        perm = ids[rng.permutation(n)]
        return [
            TaskSpec(t, tuple(sorted(int(c) for c in perm[t * classes_per_task:(t + 1) * classes_per_task])),
                     per_class_fraction)
            for t in range(num_tasks)
        ]
    if overlap_mode != "random-overlap":
        raise ConfigError(f"unknown overlap_mode {overlap_mode!r}")
    tasks: list[TaskSpec] = []
    for t in range(num_tasks):
        for _ in range(MAX_PLACEMENT_TRIES):
            picked = tuple(sorted(int(c) for c in rng.choice(ids, size=classes_per_task, replace=False)))
            if max_shared is None or all(len(set(picked) & set(p.class_ids)) <= max_shared for p in tasks):
                break
        else:
            raise GenerationError(f"task {t}: no class draw satisfies max_shared={max_shared}")
        tasks.append(TaskSpec(t, picked, per_class_fraction))
    return tasks


def class_totals(task: TaskSpec, samples_per_class: int) -> dict[int, int]:
    per = max(1, int(round(task.samples_per_class_fraction * samples_per_class)))
    return {c: per for c in task.class_ids}


def largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    """Integer apportionment of ``total`` by ``shares`` preserving the sum."""
    raw = shares * total
    base = np.floor(raw).astype(np.int64)
    left = total - int(base.sum())
    if left > 0:
        # stable tie-break by index keeps the result deterministic
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:left]] += 1
    return base


def partition_dirichlet(
    task: TaskSpec,
    num_clients: int,
    beta: float,
    rng: np.random.Generator,
    *,
    samples_per_class: int = 100,
) -> tuple[list[dict[int, int]], dict[int, np.ndarray]]:
    """Split each class of ``task`` across clients with Dirichlet(beta) shares.

    Returns the per-client manifests (class id -> count) and the drawn share
    vectors per class.
    """
    if not beta > 0:
        raise ConfigError("beta must be positive")
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    totals = class_totals(task, samples_per_class)
    manifests: list[dict[int, int]] = [dict() for _ in range(num_clients)]
    shares_by_class: dict[int, np.ndarray] = {}
    for c in task.class_ids:
        if num_clients == 1:
            shares = np.ones(1)
        else:
            shares = rng.dirichlet(np.full(num_clients, beta))
            shares = shares / shares.sum()
        shares_by_class[c] = shares
        counts = largest_remainder(totals[c], shares)
        for k in range(num_clients):
            manifests[k][c] = int(counts[k])
    return manifests, shares_by_class


def gen_schedule(
    num_clients: int,
    num_phases: int,
    rounds_per_phase: int,
    new_task_client_fraction: float,
    rng: np.random.Generator,
) -> StageSchedule:
    """Phase schedule: each phase, ceil(fraction * K) clients start a new task.

    Idle clients are picked before busy ones; a client that does not start a
    new task keeps working on its current one. Task ids are handed out in
    (phase, client id) order.
    """
    if not 0.0 < new_task_client_fraction <= 1.0:
        raise ConfigError("new_task_client_fraction must lie in (0, 1]")
    if rounds_per_phase < 1 or num_phases < 1 or num_clients < 1:
        raise ConfigError("num_clients, num_phases and rounds_per_phase must be >= 1")
    # tolerance keeps 0.4 * 5 at exactly 2
    m = min(num_clients, math.ceil(new_task_client_fraction * num_clients - 1e-9))
    current: dict[int, Optional[int]] = {k: None for k in range(num_clients)}
    next_task = 0
    phases = []
    for p in range(num_phases):
        idle = [k for k in range(num_clients) if current[k] is None]
        busy = [k for k in range(num_clients) if current[k] is not None]
        idle_perm = [idle[i] for i in rng.permutation(len(idle))]
        busy_perm = [busy[i] for i in rng.permutation(len(busy))]
        chosen = sorted((idle_perm + busy_perm)[:m])
        for k in chosen:
            current[k] = next_task
            next_task += 1
        phases.append(Phase(p, dict(current), tuple(chosen)))
    return StageSchedule(tuple(phases), rounds_per_phase)


def sample_dataset(
    spec: TaskSpec,
    manifest: dict[int, int],
    universe: list[ClassSpec],
    rng: np.random.Generator,
    *,
    shift: Optional[dict[int, np.ndarray]] = None,
) -> Dataset:
    """Draw ``manifest[c]`` i.i.d. samples of each class from its Gaussian.

    ``shift`` optionally offsets a class's sampling mean (used to give a task a
    biased view of a class); without it samples follow the true Gaussian.
    """
    by_id = {c.class_id: c for c in universe}
    dim = universe[0].true_mean.shape[0]
    xs, ys = [], []
    for c in sorted(manifest):
        n = manifest[c]
        if n < 0:
            raise ConfigError(f"negative count for class {c}")
        if c not in by_id:
            raise ConfigError(f"unknown class {c} in manifest of task {spec.task_id}")
        if n == 0:
            continue
        cs = by_id[c]
        mu = cs.true_mean + (shift[c] if shift and c in shift else 0.0)
        xs.append(mu + cs.true_std * rng.standard_normal((n, dim)))
        ys.append(np.full(n, c, dtype=np.int64))
    if not xs:
        return Dataset(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys))


@dataclass
class Benchmark:
    universe: list[ClassSpec]
    tasks: list[TaskSpec]
    schedule: StageSchedule
    num_clients: int
    # task_id -> client_id -> class -> count
    manifests: dict[int, dict[int, dict[int, int]]]
    # task_id -> class -> sampling offset of that task's view of the class
    shifts: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)
    train: dict[tuple[int, int], Dataset] = field(default_factory=dict)
    test: dict[int, Dataset] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return int(self.universe[0].true_mean.shape[0])

    def to_json(self) -> dict:
        return {
            "num_clients": self.num_clients,
            "classes": [
                {"class_id": c.class_id, "true_mean": c.true_mean.tolist(), "true_std": c.true_std.tolist()}
                for c in self.universe
            ],
            "tasks": [
                {"task_id": t.task_id, "class_ids": list(t.class_ids),
                 "samples_per_class_fraction": t.samples_per_class_fraction}
                for t in self.tasks
            ],
            "manifests": {
                str(t): {str(k): {str(c): n for c, n in m.items()} for k, m in per_client.items()}
                for t, per_client in self.manifests.items()
            },
            "shifts": {
                str(t): {str(c): v.tolist() for c, v in per_class.items()}
                for t, per_class in self.shifts.items()
            },
            "schedule": {
                "rounds_per_phase": self.schedule.rounds_per_phase,
                "phases": [
                    {
                        "phase_id": ph.phase_id,
                        "assignments": {str(k): v for k, v in ph.assignments.items()},
                        "new_clients": list(ph.new_clients),
                    }
                    for ph in self.schedule.phases
                ],
            },
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def from_json(cls, doc: dict) -> "Benchmark":
        universe = [
            ClassSpec(int(c["class_id"]), np.asarray(c["true_mean"], float), np.asarray(c["true_std"], float))
            for c in doc["classes"]
        ]
        tasks = [
            TaskSpec(int(t["task_id"]), tuple(int(c) for c in t["class_ids"]),
                     float(t["samples_per_class_fraction"]))
            for t in doc["tasks"]
        ]
        sched = doc["schedule"]
        phases = tuple(
            Phase(
                int(ph["phase_id"]),
                {int(k): (None if v is None else int(v)) for k, v in ph["assignments"].items()},
                tuple(int(k) for k in ph["new_clients"]),
            )
            for ph in sched["phases"]
        )
        manifests = {
            int(t): {int(k): {int(c): int(n) for c, n in m.items()} for k, m in per_client.items()}
            for t, per_client in doc["manifests"].items()
        }
        shifts = {
            int(t): {int(c): np.asarray(v, float) for c, v in per_class.items()}
            for t, per_class in doc.get("shifts", {}).items()
        }
        return cls(universe, tasks, StageSchedule(phases, int(sched["rounds_per_phase"])),
                   int(doc["num_clients"]), manifests, shifts)

    @classmethod
    def load(cls, path: Path) -> "Benchmark":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
