"""Training objectives with analytic gradients, and the Adam update."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError
from .numerics import softmax

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class LossValue:
    scalar: float
    components: dict
    weights: dict

    def reconstruct(self) -> float:
        return sum(self.weights[k] * v for k, v in self.components.items())


@dataclass(frozen=True)
class HyperParams:
    beta: float = 1.0
    tau: float = 1.0
    p_use_comp: float = 0.5
    lr: float = 0.01
    comp_len: int = 3
    prompt_len: int = 10
    num_prompts: int = 8

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidInputError("beta must be >= 0")
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")
        if not 0.0 <= self.p_use_comp <= 1.0:
            raise InvalidInputError("p_use_comp must lie in [0, 1]")
        if not self.lr > 0:
            raise InvalidInputError("lr must be positive")
        if min(self.comp_len, self.prompt_len, self.num_prompts) < 1:
            raise InvalidInputError("prompt lengths and counts must be >= 1")


def floored_var(var: np.ndarray, floor: float = VAR_FLOOR) -> np.ndarray:
    if np.any(var < floor):
        log.debug("flooring %d variance entries below %g", int(np.sum(var < floor)), floor)
    return np.maximum(var, floor)


def comp_loss(feature: np.ndarray, global_stats, var_floor: float = VAR_FLOOR) -> tuple[float, np.ndarray]:
    """Gaussian NLL without constants: 0.5 * sum (f - mu)^2 / var."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != np.shape(global_stats.mean) or feature.shape != np.shape(global_stats.var):
        raise ShapeError("feature and class statistics differ in dimension")
    var = floored_var(np.asarray(global_stats.var, dtype=np.float64), var_floor)
    diff = feature - global_stats.mean
    return float(0.5 * np.sum(diff**2 / var)), diff / var


def comp_loss_batch(feats: np.ndarray, mu: np.ndarray, var: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses (B,) and gradients (B, F); ``var`` already floored."""
    diff = feats - mu
    return 0.5 * np.sum(diff**2 / var, axis=1), diff / var


def _check_label(logits: np.ndarray, label: int) -> None:
    if not 0 <= label < logits.shape[-1]:
        raise InvalidInputError(f"label {label} outside logit range {logits.shape[-1]}")


def ce_loss(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    _check_label(logits, label)
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    p = np.exp(z - lse)
    g = p.copy()
    g[label] -= 1.0
    return float(lse - z[label]), g


def ce_loss_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    p = np.exp(z - lse[:, None])
    rows = np.arange(logits.shape[0])
    g = p
    g[rows, labels] -= 1.0
    return lse - z[rows, labels], g


def kd_loss(cur_logits: np.ndarray, ref_logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """-sum_{k != y} r_k log(c_k / r_k) with c, r softmaxes of current and reference logits.

    The label term is dropped without renormalising the rest, so the value can
    dip below zero.
    """
    cur_logits = np.asarray(cur_logits, dtype=np.float64)
    ref_logits = np.asarray(ref_logits, dtype=np.float64)
    if cur_logits.shape != ref_logits.shape:
        raise ShapeError("current and reference logits differ in length")
    _check_label(cur_logits, label)
    loss, g = kd_loss_batch(cur_logits[None], ref_logits[None], np.array([label]))
    return float(loss[0]), g[0]


def kd_loss_batch(cur: np.ndarray, ref: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zc = cur - cur.max(axis=1, keepdims=True)
    log_c = zc - np.log(np.exp(zc).sum(axis=1, keepdims=True))
    zr = ref - ref.max(axis=1, keepdims=True)
    log_r = zr - np.log(np.exp(zr).sum(axis=1, keepdims=True))
    r = np.exp(log_r)
    mask = np.ones_like(r)
    rows = np.arange(cur.shape[0])
    mask[rows, labels] = 0.0
    rm = r * mask
    loss = -np.sum(rm * (log_c - log_r), axis=1)
    # d/dz_j = c_j * sum_{k != y} r_k - r_j [j != y]
    g = np.exp(log_c) * rm.sum(axis=1, keepdims=True) - rm
    return loss, g


def total_loss(ce: float, kd: float, beta: float) -> LossValue:
    return LossValue(ce + beta * kd, {"ce": ce, "kd": kd}, {"ce": 1.0, "kd": beta})


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam step; returns new arrays, state advanced in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out
