"""Small dense kernel: RNG construction, softmax, cosine similarity, FD oracle.

Vectors and matrices are plain float64 numpy arrays. Random streams come from
numpy's PCG64 bit generator seeded through ``SeedSequence``; equal seeds and
equal spawn keys give bit-identical streams on every platform numpy supports.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidInputError, OracleFailure, ShapeError

Vec = np.ndarray
Mat = np.ndarray

NORM_EPS = 1e-12


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional path of integer sub-keys.

    Sub-keys give independent, reproducible streams per actor (client id,
    stage, ...) without any actor consuming another one's draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def as_vec(x) -> Vec:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty vector, got shape {v.shape}")
    return v


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"non-finite values in {what}")


def softmax_rows(m: Mat, temperature: float = 1.0) -> Mat:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {m.shape}")
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    check_finite(m, "softmax input")
    z = m / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(v: Vec) -> Vec:
    z = v - np.max(v)
    e = np.exp(z)
    return e / e.sum()


def cosine(a: Vec, b: Vec) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(a: Mat, b: Mat) -> Mat:
    """Row-wise cosine of broadcastable stacks ``a[..., d]`` and ``b[..., d]``."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    denom = np.where(ok, na * nb, 1.0)
    return np.where(ok, np.clip(dot / denom, -1.0, 1.0), 0.0)


def cosine_rows_grad(a: Mat, b: Mat, upstream: np.ndarray) -> tuple[Mat, Mat]:
    """Gradients of ``sum(upstream * cosine_rows(a, b))`` with respect to a and b.

    Zero-norm rows (where cosine is pinned at 0) get zero gradient.
    """
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    cos = np.sum(a * b, axis=-1, keepdims=True) / (na_s * nb_s)
    g = upstream[..., None] * ok
    ga = g * (b / (na_s * nb_s) - cos * a / na_s**2)
    gb = g * (a / (na_s * nb_s) - cos * b / nb_s**2)
    return ga, gb


def fd_gradient(f: Callable[[Vec], float], x: Vec, h: float = 1e-5) -> Vec:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise InvalidInputError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    shape = x.shape
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(flat.reshape(shape))
        flat[i] = old - h
        fm = f(flat.reshape(shape))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(shape)


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-4) -> float:
    """Max relative error, falling back to absolute error on near-zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    small = scale < abs_floor
    rel = np.where(small, 0.0, diff / np.where(small, 1.0, scale))
    if np.any(small & (diff > abs_floor)):
        return float("inf")
    return float(rel.max(initial=0.0))
