"""Client side of a stage: distribution compensation (round 0) and
discriminative prompt training (rounds 1..N_r).

All per-sample work is batched: a mini-batch is split into the samples that
carry their class compensation prompt and those that do not, since the two
groups have different sequence lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import Dataset
from .distribution import DistributionReport, GaussianClassStats, estimate_from_arrays
from .encoder import Classifier, FrozenEncoder, query_features
from .errors import ProtocolError
from .histograms import ClientHistogram, accumulate_batch
from .losses import (AdamState, HyperParams, adam_step, ce_loss_batch, comp_loss_batch, floored_var,
                     kd_loss_batch)
from .prompting import ClassPromptSet, PromptPool, init_entries, query_weights_backward, query_weights_batch


@dataclass
class Reference:
    """Frozen model copy taken at the start of a communication round."""

    disc: PromptPool
    history: PromptPool
    weight: np.ndarray

    def logits(self, enc: FrozenEncoder, data_tok, queries, comp_tok, cols) -> np.ndarray:
        px = mixed_prompt(self.history, self.disc, queries)[0]
        feats = _encode_groups(enc, data_tok, comp_tok, px)[0]
        return feats @ self.weight[cols].T


@dataclass
class RoundReport:
    client_id: int
    prompts: PromptPool
    histogram: ClientHistogram
    loss_trace: list = field(default_factory=list)


def mixed_prompt(history: PromptPool, current: PromptPool, queries: np.ndarray):
    """Weighted prompt over history + current entries and the current-stage weights."""
    a_cur = query_weights_batch(current.keys, current.attn, queries)
    px = np.einsum("bn,nld->bld", a_cur, current.prompts)
    if len(history):
        a_hist = query_weights_batch(history.keys, history.attn, queries)
        px = px + np.einsum("bn,nld->bld", a_hist, history.prompts)
    return px, a_cur


def _encode_groups(enc: FrozenEncoder, data_tok, comp_tok, px):
    """Encode [h, (p_c), p_x, cls]. ``comp_tok`` is (B, L_c, d) with NaN rows
    marking samples that do not use a compensation prompt."""
    b = data_tok.shape[0]
    cls = enc.cls_tokens(b)
    if comp_tok is None:
        use = np.zeros(b, dtype=bool)
    else:
        use = ~np.isnan(comp_tok[:, 0, 0])
    feats = np.empty((b, enc.feature_dim))
    groups = []
    for flag in (True, False):
        idx = np.flatnonzero(use == flag)
        if idx.size == 0:
            continue
        parts = [data_tok[idx]]
        if flag:
            parts.append(comp_tok[idx])
        if px is not None:
            parts.append(px[idx])
        parts.append(cls[idx])
        f, cache = enc.forward(np.concatenate(parts, axis=1))
        feats[idx] = f
        groups.append((idx, flag, cache))
    return feats, groups


class ClientState:
    def __init__(self, client_id: int, num_classes: int, enc: FrozenEncoder, hp: HyperParams,
                 rng: np.random.Generator, *, batch_size: int = 32, logit_scope: str = "owned",
                 lcdc_rng: Optional[np.random.Generator] = None):
        self.client_id = client_id
        self.enc = enc
        self.hp = hp
        self.rng = rng
        # round 0 draws from its own stream so skipping it leaves later rounds unchanged
        self.lcdc_rng = lcdc_rng if lcdc_rng is not None else rng
        self.batch_size = batch_size
        self.logit_scope = logit_scope
        self.classifier = Classifier(rng.normal(0, 0.01, size=(num_classes, enc.feature_dim)), client_id)
        self.task_id: Optional[int] = None
        self.stage: int = -1
        self.data: Optional[Dataset] = None
        self.comp: Optional[ClassPromptSet] = None
        self.disc: Optional[PromptPool] = None
        self.history = PromptPool(hp.prompt_len, enc.d)
        self.reference: Optional[Reference] = None
        self._fresh = True

    # task lifecycle

    def start_task(self, task_id: int, stage: int, data: Dataset) -> None:
        self.task_id = task_id
        self.stage = stage
        self.data = data
        self.tokens = self.enc.tokenize(data.x)
        self.queries = query_features(self.enc, self.tokens)
        self.comp = None
        self.disc = None
        self._fresh = True

    @property
    def classes(self) -> list[int]:
        return self.data.classes()

    def report_distribution(self, stage: int) -> DistributionReport:
        """Per-class moments of bare-sequence encoder features of the local data."""
        return estimate_from_arrays(self.client_id, stage, self.queries, self.data.y)

    # round 0: class distribution compensation

    def lcdc_phase(self, global_stats: dict[int, GaussianClassStats], epochs: int, trace: Optional[list] = None,
                   stage: int = 0) -> None:
        missing = [c for c in self.classes if c not in global_stats]
        if missing:
            raise ProtocolError(f"client {self.client_id}: no global statistics for classes {missing}")
        comp = ClassPromptSet.init(self.classes, self.hp.comp_len, self.enc.d, self.lcdc_rng)
        mu = {c: global_stats[c].mean for c in self.classes}
        var = {c: floored_var(global_stats[c].var) for c in self.classes}
        state = AdamState()
        n = len(self.data)
        step = 0
        for _ in range(epochs):
            order = self.lcdc_rng.permutation(n)
            for s in range(0, n, self.batch_size):
                idx = order[s:s + self.batch_size]
                y = self.data.y[idx]
                pc = comp.stacked(y)
                tok = np.concatenate([self.tokens[idx], pc, self.enc.cls_tokens(idx.size)], axis=1)
                feats, cache = self.enc.forward(tok)
                mus = np.stack([mu[int(c)] for c in y])
                vs = np.stack([var[int(c)] for c in y])
                loss, g = comp_loss_batch(feats, mus, vs)
                g_tok = self.enc.backward(cache, g / idx.size)
                lh = self.tokens.shape[1]
                g_pc = g_tok[:, lh:lh + self.hp.comp_len]
                grads = {}
                for c in np.unique(y):
                    grads[int(c)] = g_pc[y == c].sum(axis=0)
                comp.prompts = adam_step(comp.prompts, grads, state, self.hp.lr)
                if trace is not None:
                    trace.append((stage, 0, self.client_id, step, "comp", float(loss.mean())))
                step += 1
        comp.frozen = True
        self.comp = comp

    def comp_features(self, use_comp: bool = True) -> np.ndarray:
        """Features of local data under [h, p_c, cls] (or the bare sequence)."""
        if not use_comp or self.comp is None:
            return self.queries
        pc = self.comp.stacked(self.data.y)
        tok = np.concatenate([self.tokens, pc, self.enc.cls_tokens(len(self.data))], axis=1)
        return self.enc.encode_batch(tok)

    # rounds 1..N_r: discriminative prompts

    def receive_prompts(self, pool: Optional[PromptPool], stage: int) -> None:
        if pool is None:
            if self.disc is None:
                self.disc = init_entries(self.hp.num_prompts, self.hp.prompt_len, self.enc.d, self.rng,
                                         stage, self.client_id)
                self._fresh = True
        else:
            self.disc = pool
            self._fresh = False

    def set_history(self, history: PromptPool) -> None:
        self.history = history

    def logit_columns(self) -> np.ndarray:
        if self.logit_scope == "task":
            return np.array(self.classes, dtype=np.int64)
        return np.array(sorted(set(self.classifier.trained) | set(self.classes)), dtype=np.int64)

    def snapshot_reference(self) -> Reference:
        self.reference = Reference(self.disc.copy(), self.history, self.classifier.weight.copy())
        return self.reference

    def kd_active(self, rnd: int) -> bool:
        return self.hp.beta > 0 and (rnd >= 2 or not self._fresh or len(self.history) > 0)

    def disc_train_round(self, epochs: int, stage: int, rnd: int, use_comp: bool,
                         trace: Optional[list] = None) -> RoundReport:
        if self.disc is None:
            raise ProtocolError("discriminative prompts were not initialised")
        if use_comp and self.comp is not None and not self.comp.frozen:
            raise ProtocolError("compensation prompts must be frozen before discriminative training")
        ref = self.snapshot_reference()
        use_kd = self.kd_active(rnd)
        cols = self.logit_columns()
        pos = {int(c): i for i, c in enumerate(cols)}
        hist = ClientHistogram.empty(len(self.disc), self.classes, self.client_id, stage)
        params = {"prompts": self.disc.prompts, "keys": self.disc.keys, "attn": self.disc.attn,
                  "weight": self.classifier.weight}
        state = AdamState()
        lh = self.tokens.shape[1]
        lc = self.hp.comp_len
        lp = self.hp.prompt_len
        n = len(self.data)
        step = 0
        for _ in range(epochs):
            order = self.rng.permutation(n)
            draws = self.rng.random(n)
            for s in range(0, n, self.batch_size):
                idx = order[s:s + self.batch_size]
                b = idx.size
                y = self.data.y[idx]
                yl = np.array([pos[int(c)] for c in y])
                q = self.queries[idx]
                data_tok = self.tokens[idx]
                comp_tok = None
                if use_comp and self.comp is not None and self.hp.p_use_comp > 0:
                    use = draws[idx] < self.hp.p_use_comp
                    comp_tok = np.full((b, lc, self.enc.d), np.nan)
                    if use.any():
                        comp_tok[use] = self.comp.stacked(y[use])
                cur = PromptPool(lp, self.enc.d, params["prompts"], params["keys"], params["attn"],
                                 self.disc.origins)
                px, a_cur = mixed_prompt(self.history, cur, q)
                feats, groups = _encode_groups(self.enc, data_tok, comp_tok, px)
                w = params["weight"][cols]
                logits = feats @ w.T
                ce, g_logits = ce_loss_batch(logits, yl)
                kd = np.zeros(b)
                if use_kd:
                    ref_logits = ref.logits(self.enc, data_tok, q, comp_tok, cols)
                    kd, g_kd = kd_loss_batch(logits, ref_logits, yl)
                    g_logits = g_logits + self.hp.beta * g_kd
                g_logits /= b
                g_w = np.zeros_like(params["weight"])
                g_w[cols] = g_logits.T @ feats
                g_feats = g_logits @ w
                g_px = np.empty((b, lp, self.enc.d))
                for gidx, flag, cache in groups:
                    g_tok = self.enc.backward(cache, g_feats[gidx])
                    off = lh + (lc if flag else 0)
                    g_px[gidx] = g_tok[:, off:off + lp]
                g_p = np.einsum("bn,bld->nld", a_cur, g_px)
                g_alpha = np.einsum("bld,nld->bn", g_px, params["prompts"])
                g_k, g_a = query_weights_backward(params["keys"], params["attn"], q, g_alpha)
                accumulate_batch(hist, a_cur, y)
                params = adam_step(params, {"prompts": g_p, "keys": g_k, "attn": g_a, "weight": g_w},
                                   state, self.hp.lr)
                if trace is not None:
                    ce_m, kd_m = float(ce.mean()), float(kd.mean())
                    trace.append((stage, rnd, self.client_id, step, "ce", ce_m))
                    trace.append((stage, rnd, self.client_id, step, "kd", kd_m))
                    trace.append((stage, rnd, self.client_id, step, "total", ce_m + self.hp.beta * kd_m))
                step += 1
        self.disc = PromptPool(lp, self.enc.d, params["prompts"], params["keys"], params["attn"],
                               list(self.disc.origins))
        self.classifier.weight = params["weight"]
        self.classifier.trained |= set(self.classes)
        return RoundReport(self.client_id, self.disc, hist)
