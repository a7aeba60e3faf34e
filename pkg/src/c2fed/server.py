"""Server side: global class statistics and class-aware prompt aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .distribution import DistributionReport, GaussianClassStats, aggregate_global
from .errors import InvalidInputError, ProtocolError
from .numerics import softmax_rows
from .prompting import PromptPool


@dataclass
class AggregationResult:
    blocks: list  # per-client (N, width) rows, roster order
    weights: np.ndarray  # (KN, KN) row-stochastic mixing matrix


def cpa_aggregate(histograms: np.ndarray, prompts: np.ndarray, tau: float, *, num_clients: Optional[int] = None,
                  normalize_rows: bool = False) -> AggregationResult:
    """Mix prompt rows by softmax(H H^T / tau).

    ``prompts`` holds one flattened prompt per row (keys and attention may be
    appended as extra columns; they are mixed with the same weights). The
    result is split into ``num_clients`` consecutive equal blocks. With
    ``normalize_rows`` the histogram rows are L2-normalised first; an all-zero
    row then stays zero and its softmax row is uniform.
    """
    h = np.asarray(histograms, dtype=np.float64)
    p = np.asarray(prompts, dtype=np.float64)
    if h.ndim != 2 or p.ndim != 2 or h.shape[0] != p.shape[0]:
        raise ProtocolError(f"histogram rows {h.shape} and prompt rows {p.shape} do not match")
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    if normalize_rows:
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        h = h / np.where(norms > 0, norms, 1.0)
    # compute in a canonical row order so that jointly permuting the inputs
    # permutes the output bit-for-bit (float sums depend on term order)
    order = np.lexsort(np.concatenate([h, p], axis=1).T[::-1])
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    hc, pc = h[order], p[order]
    wc = softmax_rows(hc @ hc.T, tau)
    w = wc[inv][:, inv]
    return AggregationResult(_split((wc @ pc)[inv], num_clients), w)


def uniform_aggregate(prompts: np.ndarray, *, num_clients: Optional[int] = None) -> AggregationResult:
    """Plain averaging: every output row is the mean of all input rows."""
    p = np.asarray(prompts, dtype=np.float64)
    n = p.shape[0]
    w = np.full((n, n), 1.0 / n)
    mean = p.mean(axis=0)
    return AggregationResult(_split(np.repeat(mean[None], n, axis=0), num_clients), w)


def _split(rows: np.ndarray, num_clients: Optional[int]) -> list:
    k = 1 if num_clients is None else num_clients
    if rows.shape[0] % k:
        raise ProtocolError(f"{rows.shape[0]} rows cannot be split into {k} equal client blocks")
    n = rows.shape[0] // k
    return [rows[i * n:(i + 1) * n] for i in range(k)]


def estimate_and_broadcast(reports: list[DistributionReport], clients: Optional[list[int]] = None) -> dict[int, bytes]:
    """Pool the reports and return one identical encoded stats message per client."""
    if not reports:
        raise ProtocolError("no distribution reports to aggregate")
    stats = aggregate_global(reports)
    payload = encode_stats(stats)
    targets = sorted({r.client_id for r in reports}) if clients is None else sorted(clients)
    return {k: payload for k in targets}


def encode_stats(stats: list[GaussianClassStats]) -> bytes:
    return json.dumps([s.to_json() for s in stats], sort_keys=True).encode()


def decode_stats(payload: bytes) -> list[GaussianClassStats]:
    return [GaussianClassStats.from_json(d) for d in json.loads(payload)]


@dataclass
class ServerState:
    prompt_len: int
    dim: int
    global_pool: PromptPool = None
    # (client, task) -> latest distribution report for that local task
    report_archive: dict = field(default_factory=dict)
    global_stats: dict = field(default_factory=dict)
    round_counter: int = 0
    roster: list = field(default_factory=list)
    w_snapshots: list = field(default_factory=list)

    def __post_init__(self):
        if self.global_pool is None:
            self.global_pool = PromptPool(self.prompt_len, self.dim)

    def ingest_reports(self, reports: dict[tuple[int, int], DistributionReport]) -> list[GaussianClassStats]:
        """Archive new reports and re-pool over every local task reported so far."""
        self.report_archive.update(reports)
        pooled = aggregate_global([self.report_archive[k] for k in sorted(self.report_archive)])
        self.global_stats = {s.class_id: s for s in pooled}
        return pooled

    def aggregate_round(self, stage: int, rnd: int, uploads: dict[int, tuple[PromptPool, np.ndarray]],
                        class_order: list[int], *, tau: float, class_aware: bool,
                        normalize_rows: bool = False) -> dict[int, PromptPool]:
        """Barrier step: mix every client's current-stage prompts, hand each its block back."""
        roster = sorted(uploads)
        pools = [uploads[k][0] for k in roster]
        sizes = {len(p) for p in pools}
        if len(sizes) != 1:
            raise ProtocolError(f"clients uploaded different prompt counts: {sorted(sizes)}")
        rows = np.concatenate([p.param_matrix() for p in pools])
        if class_aware:
            hist = np.concatenate([uploads[k][1] for k in roster])
            res = cpa_aggregate(hist, rows, tau, num_clients=len(roster), normalize_rows=normalize_rows)
        else:
            res = uniform_aggregate(rows, num_clients=len(roster))
        self.round_counter += 1
        self.roster = roster
        self.w_snapshots.append({"stage": stage, "round": rnd, "roster": roster, "class_order": class_order,
                                 "W": res.weights.tolist()})
        return {k: pools[i].with_param_matrix(res.blocks[i]) for i, k in enumerate(roster)}
