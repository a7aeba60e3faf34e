"""Per-class diagonal Gaussian statistics: client estimation, server pooling.

Clients report population moments and raw counts. The server mixes them with
count-proportional weights, which reproduces the moments of the pooled raw
samples exactly (mixture mean, mixture second moment minus squared mean).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import InvalidInputError, ShapeError

VAR_CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class GaussianClassStats:
    class_id: int
    mean: np.ndarray
    var: np.ndarray
    count: int

    def to_json(self) -> dict:
        return {"class_id": self.class_id, "mean": self.mean.tolist(), "var": self.var.tolist(),
                "count": self.count}

    @classmethod
    def from_json(cls, d: dict) -> "GaussianClassStats":
        return cls(int(d["class_id"]), np.asarray(d["mean"], float), np.asarray(d["var"], float),
                   int(d["count"]))


@dataclass(frozen=True)
class DistributionReport:
    client_id: int
    stage: int
    stats: tuple[GaussianClassStats, ...] = field(default_factory=tuple)

    def by_class(self) -> dict[int, GaussianClassStats]:
        return {s.class_id: s for s in self.stats}

    def to_json(self) -> dict:
        return {"client_id": self.client_id, "stage": self.stage, "stats": [s.to_json() for s in self.stats]}

    @classmethod
    def from_json(cls, d: dict) -> "DistributionReport":
        return cls(int(d["client_id"]), int(d["stage"]),
                   tuple(GaussianClassStats.from_json(s) for s in d["stats"]))


def estimate_from_arrays(client_id: int, stage: int, feats: np.ndarray, labels: np.ndarray) -> DistributionReport:
    """Vectorised ``estimate_local`` over precomputed features."""
    feats = np.asarray(feats, dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        raise InvalidInputError("non-finite feature vector")
    stats = []
    for c in sorted(int(v) for v in np.unique(labels)):
        f = feats[labels == c]
        mu = f.mean(axis=0)
        var = ((f - mu) ** 2).mean(axis=0)
        stats.append(GaussianClassStats(c, mu, var, int(f.shape[0])))
    return DistributionReport(client_id, stage, tuple(stats))


def estimate_local(samples: Iterable, features_of: Callable[[object], np.ndarray],
                   client_id: int = 0, stage: int = 0) -> DistributionReport:
    """Mean, population variance (divide by n) and count of each class."""
    samples = list(samples)
    if not samples:
        return DistributionReport(client_id, stage, ())
    feats = np.stack([np.asarray(features_of(s), dtype=np.float64) for s in samples])
    labels = np.array([s.label for s in samples])
    return estimate_from_arrays(client_id, stage, feats, labels)


def aggregate_global(reports: Iterable[DistributionReport], *, _flip_second_moment: bool = False) -> list[GaussianClassStats]:
    """Count-weighted pooling of per-client class moments.

    For every class, with p_k = n_k / sum(n): mean = sum p_k mu_k and
    var = sum p_k (mu_k^2 + var_k) - mean^2. Reduction order is fixed
    (class id, then client id) so shuffling the reports changes nothing.
    ``_flip_second_moment`` is a fault-injection hook for the self-test.
    """
    reports = list(reports)
    if not reports:
        raise InvalidInputError("aggregate_global needs at least one report")
    per_class: dict[int, list[tuple[int, int, GaussianClassStats]]] = {}
    dim: Optional[int] = None
    for rep in reports:
        for i, s in enumerate(rep.stats):
            if s.count < 1:
                raise InvalidInputError(f"client {rep.client_id} reports class {s.class_id} with count {s.count}")
            if dim is None:
                dim = s.mean.shape[0]
            if s.mean.shape != (dim,) or s.var.shape != (dim,):
                raise ShapeError(f"client {rep.client_id}: class {s.class_id} has dimension {s.mean.shape}, expected {dim}")
            per_class.setdefault(s.class_id, []).append((rep.client_id, i, s))
    out = []
    sign = -1.0 if _flip_second_moment else 1.0
    for c in sorted(per_class):
        entries = sorted(per_class[c], key=lambda e: (e[0], e[1]))
        total = sum(e[2].count for e in entries)
        mu = np.zeros(dim)
        second = np.zeros(dim)
        for _, _, s in entries:
            p = s.count / total
            mu += p * s.mean
            second += p * (s.mean**2 + sign * s.var)
        var = second - mu**2
        # tiny negatives are rounding noise from the subtraction
        var = np.where((var < 0) & (var >= -VAR_CLAMP_TOL), 0.0, var)
        out.append(GaussianClassStats(c, mu, var, total))
    return out


def pooled_moments(feats: np.ndarray, labels: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Direct population moments of pooled raw samples (the pooling oracle)."""
    out = {}
    for c in sorted(int(v) for v in np.unique(labels)):
        f = feats[labels == c]
        out[c] = (f.mean(axis=0), f.var(axis=0))
    return out
