"""Frozen toy encoder standing in for a pretrained transformer, plus the
linear classifier head.

Two encoder kinds are available:

``mean-pool-linear``
    feature = W_f tanh(mean of tokens)
``single-head-attention``
    one attention head whose query comes from the last (cls) token;
    feature = W_o (sum_j a_j W_v x_j), a = softmax(K q / sqrt(d)).

Both expose a batched forward pass that caches what the backward pass needs,
so gradients reach prompt tokens exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, MergeError, ShapeError
from .numerics import make_rng

KINDS = ("mean-pool-linear", "single-head-attention")


@dataclass(frozen=True)
class TokenSeq:
    """Token matrix plus its segment layout, e.g. (("data", 4), ("comp", 3), ("disc", 10), ("cls", 1))."""

    tokens: np.ndarray
    layout: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if sum(n for _, n in self.layout) != self.tokens.shape[0]:
            raise ShapeError("segment lengths do not add up to the sequence length")
        if not self.layout or self.layout[-1] != ("cls", 1):
            raise ShapeError("cls must be the last token")

    def segment_slice(self, name: str) -> Optional[slice]:
        start = 0
        for seg, n in self.layout:
            if seg == name:
                return slice(start, start + n)
            start += n
        return None


class FrozenEncoder:
    def __init__(self, kind: str = "single-head-attention", d: int = 16, feature_dim: int = 16,
                 seq_len: int = 4, raw_dim: Optional[int] = None, seed: int = 0):
        if kind not in KINDS:
            raise ConfigError(f"unknown encoder kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.d = d
        self.feature_dim = feature_dim
        self.seq_len = seq_len
        self.raw_dim = seq_len * d if raw_dim is None else raw_dim
        self.seed = seed
        rng = make_rng(seed, 0xE1C)
        # projection only when the raw feature does not reshape into tokens exactly
        self.w_in = None
        if self.raw_dim != seq_len * d:
            self.w_in = rng.normal(0, 1 / np.sqrt(self.raw_dim), size=(seq_len * d, self.raw_dim))
        self.cls = rng.normal(0, 1.0, size=d)
        s = 1 / np.sqrt(d)
        if kind == "mean-pool-linear":
            self.w_f = rng.normal(0, s, size=(feature_dim, d))
        else:
            self.w_q = rng.normal(0, s, size=(d, d))
            self.w_k = rng.normal(0, s, size=(d, d))
            self.w_v = rng.normal(0, s, size=(d, d))
            self.w_o = rng.normal(0, s, size=(feature_dim, d))
        for arr in self.weights().values():
            arr.setflags(write=False)

    def weights(self) -> dict[str, np.ndarray]:
        names = ["cls", "w_f", "w_q", "w_k", "w_v", "w_o", "w_in"]
        return {n: getattr(self, n) for n in names if getattr(self, n, None) is not None}

    def config(self) -> dict:
        return {"kind": self.kind, "d": self.d, "feature_dim": self.feature_dim,
                "seq_len": self.seq_len, "raw_dim": self.raw_dim, "seed": self.seed}

    # tokenisation

    def tokenize(self, features: np.ndarray) -> np.ndarray:
        """(D,) -> (L_h, d) or (B, D) -> (B, L_h, d)."""
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.raw_dim:
            raise ConfigError(f"sample dimension {x.shape[-1]} does not match encoder raw_dim {self.raw_dim}")
        if self.w_in is not None:
            x = x @ self.w_in.T
        return x.reshape(x.shape[:-1] + (self.seq_len, self.d))

    def cls_tokens(self, batch: int) -> np.ndarray:
        return np.broadcast_to(self.cls, (batch, 1, self.d))

    # forward / backward on (B, L, d) token stacks

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        if x.shape[-1] != self.d:
            raise ShapeError(f"token width {x.shape[-1]} != d={self.d}")
        if self.kind == "mean-pool-linear":
            z = np.tanh(x.mean(axis=1))
            return z @ self.w_f.T, {"z": z, "L": x.shape[1]}
        q = x[:, -1, :] @ self.w_q.T
        k = x @ self.w_k.T
        v = x @ self.w_v.T
        scale = 1.0 / np.sqrt(self.d)
        s = np.einsum("bld,bd->bl", k, q) * scale
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        o = np.einsum("bl,bld->bd", a, v)
        return o @ self.w_o.T, {"q": q, "k": k, "v": v, "a": a}

    def backward(self, cache: dict, g_feat: np.ndarray) -> np.ndarray:
        """Gradient of sum(g_feat * feature) w.r.t. every token, (B, L, d)."""
        if self.kind == "mean-pool-linear":
            g_m = (g_feat @ self.w_f) * (1.0 - cache["z"] ** 2)
            return np.repeat(g_m[:, None, :] / cache["L"], cache["L"], axis=1)
        q, k, v, a = cache["q"], cache["k"], cache["v"], cache["a"]
        scale = 1.0 / np.sqrt(self.d)
        g_o = g_feat @ self.w_o
        g_a = np.einsum("bld,bd->bl", v, g_o)
        g_v = a[:, :, None] * g_o[:, None, :]
        g_s = a * (g_a - np.sum(a * g_a, axis=1, keepdims=True)) * scale
        g_k = g_s[:, :, None] * q[:, None, :]
        g_q = np.einsum("bl,bld->bd", g_s, k)
        g_x = g_k @ self.w_k + g_v @ self.w_v
        g_x[:, -1, :] += g_q @ self.w_q
        return g_x

    def encode_batch(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def build_tokens(data: np.ndarray, segments: list[tuple[str, Optional[np.ndarray]]], cls: np.ndarray) -> np.ndarray:
    """Concatenate per-sample token blocks (B, *, d) in order, cls last."""
    parts = [data] + [seg for _, seg in segments if seg is not None] + [cls]
    return np.concatenate(parts, axis=1)


def encode(enc: FrozenEncoder, seq: TokenSeq) -> np.ndarray:
    return enc.forward(seq.tokens[None])[0][0]


def encode_grad_prompts(enc: FrozenEncoder, seq: TokenSeq, upstream_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradient of <upstream_grad, encode(seq)> w.r.t. the prompt segments ("comp", "disc")."""
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != (enc.feature_dim,):
        raise ShapeError("upstream gradient must have length feature_dim")
    _, cache = enc.forward(seq.tokens[None])
    g = enc.backward(cache, upstream_grad[None])[0]
    out = {}
    for name in ("comp", "disc", "prompt"):
        sl = seq.segment_slice(name)
        if sl is not None:
            out[name] = g[sl]
    return out


def query_features(enc: FrozenEncoder, data_tokens: np.ndarray) -> np.ndarray:
    """q(x): encoder output on the bare sequence [h_x, cls]; also the space of class statistics."""
    b = data_tokens.shape[0]
    return enc.encode_batch(np.concatenate([data_tokens, enc.cls_tokens(b)], axis=1))


@dataclass
class Classifier:
    weight: np.ndarray  # (num_classes, feature_dim), rows indexed by global class id
    owner: Optional[int] = None
    trained: set = field(default_factory=set)

    def copy(self) -> "Classifier":
        return Classifier(self.weight.copy(), self.owner, set(self.trained))


def classify(clf: Classifier, feature: np.ndarray) -> np.ndarray:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != clf.weight.shape[1]:
        raise ShapeError(f"feature dim {feature.shape[-1]} != classifier dim {clf.weight.shape[1]}")
    return feature @ clf.weight.T


def merge_classifiers(locals_: list[Classifier], class_ownership: Optional[dict[int, list[int]]] = None,
                      classes: Optional[list[int]] = None) -> Classifier:
    """Global head: each class row is the uniform mean of the rows of every
    local classifier that trained that class.

    ``class_ownership`` maps class id -> indices into ``locals_``; by default it
    is read from each classifier's ``trained`` set. Rows of classes listed in
    ``classes`` with no owner raise MergeError; other unowned rows stay zero.
    """
    if not locals_:
        raise MergeError("no local classifiers to merge")
    shape = locals_[0].weight.shape
    if any(c.weight.shape != shape for c in locals_):
        raise MergeError("local classifiers disagree on shape")
    if class_ownership is None:
        class_ownership = {}
        for i, c in enumerate(locals_):
            for cls_id in sorted(c.trained):
                class_ownership.setdefault(cls_id, []).append(i)
    if classes is not None:
        orphans = [c for c in classes if not class_ownership.get(c)]
        if orphans:
            raise MergeError(f"classes without an owning classifier: {orphans}")
    w = np.zeros(shape)
    for cls_id in sorted(class_ownership):
        owners = sorted(class_ownership[cls_id])
        if not owners:
            raise MergeError(f"class {cls_id} has an empty owner list")
        w[cls_id] = np.mean([locals_[i].weight[cls_id] for i in owners], axis=0)
    return Classifier(w, None, set(class_ownership))
