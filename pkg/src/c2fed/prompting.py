"""Prompt pool storage and query-key weighted prompt synthesis.

A pool keeps its entries stacked: ``prompts`` (n, L_p, d), ``keys`` (n, d) and
``attn`` (n, d). The weight of entry i for a query q is the raw cosine between
``q * attn[i]`` and ``keys[i]``; the synthesized prompt is the weight-sum of
the entries' prompt blocks. Weights are not normalised and may be negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ShapeError
from .numerics import cosine_rows, cosine_rows_grad

INIT_SCALE = 0.02


@dataclass(frozen=True)
class PromptEntry:
    prompt: np.ndarray
    key: np.ndarray
    attn: np.ndarray
    origin: tuple[int, int, int]  # (stage, client, index)


@dataclass
class PromptPool:
    length: int
    dim: int
    prompts: np.ndarray = None
    keys: np.ndarray = None
    attn: np.ndarray = None
    origins: list = field(default_factory=list)

    def __post_init__(self):
        if self.prompts is None:
            self.prompts = np.zeros((0, self.length, self.dim))
            self.keys = np.zeros((0, self.dim))
            self.attn = np.zeros((0, self.dim))
        n = self.prompts.shape[0]
        if (self.prompts.shape[1:] != (self.length, self.dim) or self.keys.shape != (n, self.dim)
                or self.attn.shape != (n, self.dim) or len(self.origins) != n):
            raise ShapeError("prompt pool arrays have inconsistent shapes")

    def __len__(self) -> int:
        return int(self.prompts.shape[0])

    @property
    def entries(self) -> list[PromptEntry]:
        return list(iter(self))

    def __iter__(self) -> Iterator[PromptEntry]:
        for i in range(len(self)):
            yield PromptEntry(self.prompts[i], self.keys[i], self.attn[i], tuple(self.origins[i]))

    @classmethod
    def from_entries(cls, entries: list[PromptEntry], length: int, dim: int) -> "PromptPool":
        pool = cls(length, dim)
        return grow_pool(pool, entries)

    def copy(self) -> "PromptPool":
        return PromptPool(self.length, self.dim, self.prompts.copy(), self.keys.copy(), self.attn.copy(),
                          list(self.origins))

    def param_matrix(self) -> np.ndarray:
        """Row i = [flattened prompt_i, key_i, attn_i]."""
        n = len(self)
        return np.concatenate([self.prompts.reshape(n, -1), self.keys, self.attn], axis=1)

    def with_param_matrix(self, rows: np.ndarray) -> "PromptPool":
        n = len(self)
        lp = self.length * self.dim
        if rows.shape != (n, lp + 2 * self.dim):
            raise ShapeError(f"param matrix shape {rows.shape} does not fit pool of {n}")
        return PromptPool(self.length, self.dim, rows[:, :lp].reshape(n, self.length, self.dim).copy(),
                          rows[:, lp:lp + self.dim].copy(), rows[:, lp + self.dim:].copy(), list(self.origins))

    def to_json(self) -> dict:
        return {"length": self.length, "dim": self.dim, "prompts": self.prompts.tolist(),
                "keys": self.keys.tolist(), "attn": self.attn.tolist(),
                "origins": [list(o) for o in self.origins]}

    @classmethod
    def from_json(cls, d: dict) -> "PromptPool":
        length, dim = int(d["length"]), int(d["dim"])
        n = len(d["origins"])
        return cls(length, dim, np.asarray(d["prompts"], float).reshape(n, length, dim),
                   np.asarray(d["keys"], float).reshape(n, dim), np.asarray(d["attn"], float).reshape(n, dim),
                   [tuple(int(v) for v in o) for o in d["origins"]])


def init_entries(n: int, length: int, dim: int, rng: np.random.Generator, stage: int, client: int) -> PromptPool:
    """Fresh pool of ``n`` entries with U(-0.02, 0.02) prompts, keys and attention."""
    return PromptPool(
        length, dim,
        rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n, length, dim)),
        rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n, dim)),
        rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n, dim)),
        [(stage, client, i) for i in range(n)],
    )


def query_weights(pool: PromptPool, query: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (pool.dim,):
        raise ShapeError(f"query length {query.shape} does not match pool dim {pool.dim}")
    if len(pool) == 0:
        return np.zeros(0)
    return cosine_rows(query[None, :] * pool.attn, pool.keys)


def query_weights_batch(keys: np.ndarray, attn: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """(B, n) weights for a batch of queries against stacked keys/attention."""
    return cosine_rows(queries[:, None, :] * attn[None, :, :], keys[None, :, :])


def query_weights_backward(keys: np.ndarray, attn: np.ndarray, queries: np.ndarray,
                           g_alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(g_alpha * alpha) w.r.t. keys and attention vectors."""
    a = queries[:, None, :] * attn[None, :, :]
    b = np.broadcast_to(keys[None, :, :], a.shape)
    ga, gb = cosine_rows_grad(a, b, g_alpha)
    return gb.sum(axis=0), (ga * queries[:, None, :]).sum(axis=0)


def synthesize_prompt(pool: PromptPool, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(pool),):
        raise ShapeError(f"{weights.shape[0] if weights.ndim else 0} weights for a pool of {len(pool)}")
    return np.tensordot(weights, pool.prompts, axes=1) if len(pool) else np.zeros((pool.length, pool.dim))


def grow_pool(pool: PromptPool, new_entries) -> PromptPool:
    """Append entries (a list of PromptEntry or another pool); old entries are copied unchanged."""
    if isinstance(new_entries, PromptPool):
        add = new_entries
    else:
        new_entries = list(new_entries)
        for e in new_entries:
            if e.prompt.shape != (pool.length, pool.dim) or e.key.shape != (pool.dim,) or e.attn.shape != (pool.dim,):
                raise ShapeError(f"entry {e.origin} does not match pool shape ({pool.length}, {pool.dim})")
        if not new_entries:
            return pool.copy()
        add = PromptPool(pool.length, pool.dim,
                         np.stack([e.prompt for e in new_entries]).astype(np.float64),
                         np.stack([e.key for e in new_entries]).astype(np.float64),
                         np.stack([e.attn for e in new_entries]).astype(np.float64),
                         [tuple(e.origin) for e in new_entries])
    if (add.length, add.dim) != (pool.length, pool.dim):
        raise ShapeError("cannot grow a pool with differently shaped prompts")
    return PromptPool(pool.length, pool.dim,
                      np.concatenate([pool.prompts, add.prompts]),
                      np.concatenate([pool.keys, add.keys]),
                      np.concatenate([pool.attn, add.attn]),
                      list(pool.origins) + list(add.origins))


@dataclass
class ClassPromptSet:
    """One compensation prompt (L_c, d) per locally seen class."""

    length: int
    dim: int
    prompts: dict = field(default_factory=dict)
    frozen: bool = False

    def get(self, class_id: int) -> np.ndarray:
        return self.prompts[class_id]

    def stacked(self, labels: np.ndarray) -> np.ndarray:
        return np.stack([self.prompts[int(c)] for c in labels]) if len(labels) else np.zeros((0, self.length, self.dim))

    @classmethod
    def init(cls, class_ids, length: int, dim: int, rng: np.random.Generator) -> "ClassPromptSet":
        return cls(length, dim, {int(c): rng.uniform(-INIT_SCALE, INIT_SCALE, size=(length, dim))
                                 for c in sorted(class_ids)})
