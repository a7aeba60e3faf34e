"""Prompt-class affinity histograms.

Entry (i, j) of a client histogram accumulates the rectified weight of
current-stage prompt i over every training instance labelled with class j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ProtocolError


@dataclass(frozen=True)
class InstanceHistogram:
    scores: np.ndarray


@dataclass
class ClientHistogram:
    matrix: np.ndarray  # (N prompts, local classes)
    class_index: tuple[int, ...]
    client_id: int = 0
    stage: int = 0

    @classmethod
    def empty(cls, num_prompts: int, class_ids, client_id: int = 0, stage: int = 0) -> "ClientHistogram":
        idx = tuple(sorted(int(c) for c in class_ids))
        return cls(np.zeros((num_prompts, len(idx))), idx, client_id, stage)

    def column(self, label: int) -> int:
        try:
            return self.class_index.index(int(label))
        except ValueError:
            raise InvalidInputError(f"label {label} not among local classes {self.class_index}") from None

    def to_json(self) -> dict:
        return {"client_id": self.client_id, "stage": self.stage, "class_index": list(self.class_index),
                "matrix": self.matrix.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ClientHistogram":
        idx = tuple(int(c) for c in d["class_index"])
        m = np.asarray(d["matrix"], float).reshape(-1, len(idx))
        return cls(m, idx, int(d["client_id"]), int(d["stage"]))


def instance_hist(alpha_current_stage: np.ndarray) -> InstanceHistogram:
    return InstanceHistogram(np.maximum(np.asarray(alpha_current_stage, dtype=np.float64), 0.0))


def accumulate(ch: ClientHistogram, ih: InstanceHistogram, label: int) -> ClientHistogram:
    if ih.scores.shape != (ch.matrix.shape[0],):
        raise InvalidInputError("instance histogram length does not match prompt count")
    j = ch.column(label)
    m = ch.matrix.copy()
    m[:, j] += ih.scores
    return ClientHistogram(m, ch.class_index, ch.client_id, ch.stage)


def accumulate_batch(ch: ClientHistogram, alpha: np.ndarray, labels: np.ndarray) -> None:
    """In-place online update for a batch; instances are added in batch order."""
    cols = np.array([ch.column(c) for c in labels], dtype=np.int64)
    scores = np.maximum(alpha, 0.0)
    for b in range(scores.shape[0]):
        ch.matrix[:, cols[b]] += scores[b]


def flatten_for_upload(ch: ClientHistogram, global_class_order) -> np.ndarray:
    """(N, |C_t|) block with columns in global order, zero where the class is absent locally."""
    order = [int(c) for c in global_class_order]
    pos = {c: i for i, c in enumerate(order)}
    missing = [c for c in ch.class_index if c not in pos]
    if missing:
        raise ProtocolError(f"local classes {missing} are missing from the global class order")
    out = np.zeros((ch.matrix.shape[0], len(order)))
    for j, c in enumerate(ch.class_index):
        out[:, pos[c]] = ch.matrix[:, j]
    return out
