"""Embedded oracle suite behind ``c2fed self-test``.

Every check is seeded, so repeated invocations print the same report.
``fault="flip-second-moment"`` flips the sign of the variance term in the
server's pooling so the pooled-moment check can be seen to fail.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .distribution import GaussianClassStats, aggregate_global, estimate_from_arrays, pooled_moments
from .encoder import FrozenEncoder, TokenSeq, encode, encode_grad_prompts
from .losses import ce_loss, comp_loss, kd_loss
from .metrics import AccuracyMatrix, TaskRecord, all_metrics
from .numerics import fd_gradient, grad_rel_error, make_rng
from .server import cpa_aggregate

FAULTS = ("flip-second-moment",)
GRAD_TOL = 1e-5


def check_pooled_moments(trials: int = 50, seed: int = 0, fault: Optional[str] = None) -> tuple[bool, str]:
    rng = make_rng(seed, 1)
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(2, 11))
        c = int(rng.integers(2, 21))
        dim = int(rng.integers(2, 33))
        feats, labels, reports = [], [], []
        for client in range(k):
            n = int(rng.integers(1, 40))
            y = rng.integers(0, c, size=n)
            x = rng.normal(rng.normal(0, 3, size=dim), rng.uniform(0.1, 2.0), size=(n, dim))
            feats.append(x)
            labels.append(y)
            reports.append(estimate_from_arrays(client, 0, x, y))
        try:
            got = aggregate_global(reports, _flip_second_moment=fault == "flip-second-moment")
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            return False, f"aggregation raised {type(exc).__name__}: {exc}"
        want = pooled_moments(np.concatenate(feats), np.concatenate(labels))
        for s in got:
            mu, var = want[s.class_id]
            worst = max(worst, float(np.max(np.abs(s.mean - mu))), float(np.max(np.abs(s.var - var))))
    return worst <= 1e-10, f"max abs deviation {worst:.3e} over {trials} datasets (tol 1e-10)"


def _grad_trials(name: str, trials: int, fn: Callable[[np.random.Generator], tuple]) -> tuple[bool, str]:
    rng = make_rng(0, 2, sum(map(ord, name)))
    worst = 0.0
    for _ in range(trials):
        analytic, numeric = fn(rng)
        worst = max(worst, grad_rel_error(analytic, numeric))
    return worst < GRAD_TOL, f"max rel err {worst:.3e} over {trials} trials (tol {GRAD_TOL:g})"


def _comp_trial(rng):
    dim = int(rng.integers(2, 10))
    stats = GaussianClassStats(0, rng.normal(size=dim), rng.uniform(0.2, 2.0, size=dim), 10)
    f0 = rng.normal(size=dim)
    return comp_loss(f0, stats)[1], fd_gradient(lambda f: comp_loss(f, stats)[0], f0)


def _ce_trial(rng):
    n = int(rng.integers(2, 8))
    z0 = rng.normal(0, 2, size=n)
    y = int(rng.integers(n))
    return ce_loss(z0, y)[1], fd_gradient(lambda z: ce_loss(z, y)[0], z0)


def _kd_trial(rng):
    n = int(rng.integers(2, 8))
    z0 = rng.normal(0, 2, size=n)
    ref = rng.normal(0, 2, size=n)
    y = int(rng.integers(n))
    return kd_loss(z0, ref, y)[1], fd_gradient(lambda z: kd_loss(z, ref, y)[0], z0)


def _encoder_trial(kind: str):
    def trial(rng):
        d = int(rng.integers(2, 6))
        enc = FrozenEncoder(kind, d=d, feature_dim=d, seq_len=2, seed=int(rng.integers(1000)))
        data = rng.normal(size=(2, d))
        comp = rng.normal(0, 0.5, size=(2, d))
        disc = rng.normal(0, 0.5, size=(3, d))
        layout = (("data", 2), ("comp", 2), ("disc", 3), ("cls", 1))
        up = rng.normal(size=d)

        def seq(c, p):
            return TokenSeq(np.concatenate([data, c, p, enc.cls[None]]), layout)

        g = encode_grad_prompts(enc, seq(comp, disc), up)
        num_c = fd_gradient(lambda c: float(up @ encode(enc, seq(c, disc))), comp)
        num_p = fd_gradient(lambda p: float(up @ encode(enc, seq(comp, p))), disc)
        return np.concatenate([g["comp"].ravel(), g["disc"].ravel()]), np.concatenate([num_c.ravel(), num_p.ravel()])
    return trial


def check_cpa_uniform_limit() -> tuple[bool, str]:
    rng = make_rng(0, 3)
    h = rng.uniform(0, 5, size=(12, 4))
    p = rng.normal(size=(12, 7))
    res = cpa_aggregate(h, p, 1e9, num_clients=3)
    dev = float(np.max(np.abs(np.concatenate(res.blocks) - p.mean(axis=0))))
    return dev < 1e-6, f"max deviation from uniform mean {dev:.3e} (tol 1e-6)"


def check_cpa_one_hot() -> tuple[bool, str]:
    h = np.eye(2)
    p = np.arange(6.0).reshape(2, 3)
    res = cpa_aggregate(h, p, 0.01)
    diag = float(np.min(np.diag(res.weights)))
    return diag > 0.99, f"min diag(W) {diag:.6f} (need > 0.99)"


def check_cpa_row_sums() -> tuple[bool, str]:
    rng = make_rng(0, 4)
    worst = 0.0
    for tau in (1e-3, 0.1, 1.0, 10.0, 1e6):
        h = rng.uniform(0, 3, size=(10, 5))
        w = cpa_aggregate(h, rng.normal(size=(10, 2)), tau).weights
        worst = max(worst, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
    return worst <= 1e-12, f"max |row sum - 1| {worst:.3e} (tol 1e-12)"


def check_cpa_equivariance(trials: int = 50) -> tuple[bool, str]:
    rng = make_rng(0, 5)
    h = rng.uniform(0, 3, size=(8, 4))
    p = rng.normal(size=(8, 6))
    base = np.concatenate(cpa_aggregate(h, p, 0.7).blocks)
    for _ in range(trials):
        perm = rng.permutation(8)
        out = np.concatenate(cpa_aggregate(h[perm], p[perm], 0.7).blocks)
        if not np.array_equal(out, base[perm]):
            return False, "permuted output differs from permuted reference"
    return True, f"bit-exact over {trials} permutations"


def hand_matrices() -> list[tuple[str, AccuracyMatrix, dict]]:
    """Small accuracy matrices with metric values worked out by hand (per-point mean variant)."""
    # single task dropping 0.9 -> 0.7
    m1 = AccuracyMatrix([1, 2], [TaskRecord(0, 1, 1)], {(0, 1): 0.9, (0, 2): 0.7}, {0: 0.8})
    e1 = {"Avg": 0.7, "FAA": 0.7, "AIA": 0.8, "FM": 0.1, "FT": 0.1, "BT": -0.2, "CT": -0.1}
    # two tasks, the second arrives at point 2
    m2 = AccuracyMatrix([1, 2], [TaskRecord(0, 1, 1), TaskRecord(1, 2, 2)],
                        {(0, 1): 0.8, (0, 2): 0.6, (1, 2): 0.9}, {0: 0.7, 1: 1.0})
    e2 = {"Avg": 0.75, "FAA": 0.75, "AIA": 0.775, "FM": 0.05, "FT": 0.0, "BT": -0.1, "CT": -0.1}
    # three points, a task that improves after it finishes
    m3 = AccuracyMatrix([3, 6, 9], [TaskRecord(0, 3, 3), TaskRecord(1, 6, 9)],
                        {(0, 3): 0.5, (0, 6): 0.4, (0, 9): 0.6, (1, 6): 0.2, (1, 9): 0.4},
                        {0: 0.5, 1: 0.5})
    e3 = {"Avg": 0.5, "FAA": 0.5, "AIA": (0.5 + 0.3 + 0.5) / 3, "FM": (0.0 + 0.05 - 0.15) / 3,
          "FT": (0.0 - 0.1) / 2, "BT": (0.1 + 0.0) / 2, "CT": (0.1 - 0.1) / 2}
    return [("single-task drop", m1, e1), ("late arrival", m2, e2), ("recovery", m3, e3)]


def check_metric_oracles() -> tuple[bool, str]:
    worst = 0.0
    ident = 0.0
    for _, m, want in hand_matrices():
        got = all_metrics(m)
        for k, v in want.items():
            worst = max(worst, abs(got[k] - v))
        ident = max(ident, abs(got["CT"] - (got["FT"] + got["BT"])))
    ok = worst <= 1e-12 and ident <= 1e-12
    return ok, f"max deviation {worst:.3e}; |CT - (FT + BT)| {ident:.3e} (tol 1e-12)"


def run_all(fault: Optional[str] = None, grad_trials: int = 100) -> list[dict]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    checks = [
        ("pooled-moments", lambda: check_pooled_moments(fault=fault)),
        ("grad-comp-loss", lambda: _grad_trials("comp", grad_trials, _comp_trial)),
        ("grad-ce-loss", lambda: _grad_trials("ce", grad_trials, _ce_trial)),
        ("grad-kd-loss", lambda: _grad_trials("kd", grad_trials, _kd_trial)),
        ("grad-encoder-mean-pool", lambda: _grad_trials("mp", grad_trials, _encoder_trial("mean-pool-linear"))),
        ("grad-encoder-attention", lambda: _grad_trials("att", grad_trials, _encoder_trial("single-head-attention"))),
        ("cpa-uniform-limit", check_cpa_uniform_limit),
        ("cpa-one-hot-identity", check_cpa_one_hot),
        ("cpa-row-sums", check_cpa_row_sums),
        ("cpa-permutation-equivariance", check_cpa_equivariance),
        ("metric-hand-oracles", check_metric_oracles),
    ]
    report = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report, do not crash the suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        report.append({"check": name, "passed": bool(ok), "detail": detail})
    return report
