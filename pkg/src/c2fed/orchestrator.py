"""Simulation driver: phases, rounds, message routing, barriers, evaluation.

The server and clients only talk through :class:`Network`, a deterministic
tick-driven channel with per-(sender, receiver) FIFO queues. Aggregation at
the server waits on a barrier for every scheduled client's upload.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import datagen
from .client import ClientState, mixed_prompt, _encode_groups
from .config import MetricsConfig, OutputConfig, RunConfig
from .datagen import Benchmark, Dataset
from .distribution import DistributionReport
from .encoder import Classifier, FrozenEncoder, merge_classifiers, query_features
from .errors import ClientTimeout, ProtocolError, RoutingError
from .histograms import ClientHistogram, flatten_for_upload
from .metrics import AccuracyMatrix, TaskRecord
from .numerics import make_rng
from .prompting import PromptPool, grow_pool
from .server import ServerState, decode_stats, encode_stats

log = logging.getLogger(__name__)

KINDS = ("DistReport", "GlobalStats", "PromptUpload", "HistogramUpload", "AggregatedPrompts", "EvalRequest")
SERVER = "server"
EVALUATOR = "evaluator"


def client_name(k: int) -> str:
    return f"client:{k}"


@dataclass
class Message:
    kind: str
    sender: str
    receiver: str
    stage: int
    round: int
    payload: bytes
    sent_tick: int = -1
    deliver_tick: int = -1


class Network:
    """In-order, lossless simulated channel with optional fixed latency."""

    def __init__(self, latency_ticks: int = 0):
        self.latency = latency_ticks
        self.tick = 0
        self.endpoints: set[str] = set()
        self.queues: dict[tuple[str, str], deque] = {}
        self.log: list[dict] = []
        self._last: dict[str, tuple[int, int]] = {}

    def register(self, name: str) -> None:
        self.endpoints.add(name)

    def send(self, msg: Message) -> None:
        if msg.kind not in KINDS:
            raise ProtocolError(f"unknown message kind {msg.kind}")
        if msg.receiver not in self.endpoints:
            raise RoutingError(f"unknown receiver {msg.receiver!r}")
        last = self._last.get(msg.sender)
        if last is not None and (msg.stage, msg.round) < last:
            raise ProtocolError(f"{msg.sender} went back from {last} to {(msg.stage, msg.round)}")
        self._last[msg.sender] = (msg.stage, msg.round)
        msg.sent_tick = self.tick
        msg.deliver_tick = self.tick + self.latency
        self.queues.setdefault((msg.sender, msg.receiver), deque()).append(msg)

    def broadcast(self, kind: str, sender: str, receivers: list[str], stage: int, rnd: int, payload: bytes) -> None:
        for r in receivers:
            self.send(Message(kind, sender, r, stage, rnd, payload))

    def advance(self) -> None:
        self.tick += 1

    def receive(self, receiver: str, kind: Optional[str] = None) -> list[Message]:
        """Pop every deliverable message for ``receiver`` (senders in sorted order, FIFO per sender)."""
        out = []
        for (snd, rcv) in sorted(self.queues):
            if rcv != receiver:
                continue
            q = self.queues[(snd, rcv)]
            while q and q[0].deliver_tick <= self.tick and (kind is None or q[0].kind == kind):
                msg = q.popleft()
                self._record(msg)
                out.append(msg)
        return out

    def barrier(self, receiver: str, kind: str, stage: int, rnd: int, senders: list[str],
                timeout_ticks: int) -> dict[str, Message]:
        """Block (in simulated ticks) until each sender's message of this kind has arrived."""
        got: dict[str, Message] = {}
        waited = 0
        while True:
            for msg in self.receive(receiver, kind):
                if (msg.stage, msg.round) != (stage, rnd):
                    raise ProtocolError(f"{kind} from {msg.sender} for {(msg.stage, msg.round)} "
                                        f"arrived during barrier {(stage, rnd)}")
                got[msg.sender] = msg
            if all(s in got for s in senders):
                self.note(f"Barrier:{kind}", receiver, stage, rnd)
                return got
            if waited >= timeout_ticks:
                missing = [s for s in senders if s not in got]
                raise ClientTimeout(f"stage {stage} round {rnd}: no {kind} from {missing} "
                                    f"after {timeout_ticks} ticks")
            self.advance()
            waited += 1

    def note(self, kind: str, actor: str, stage: int, rnd: int) -> None:
        """Log a local event (barrier release, aggregation) between deliveries."""
        self.log.append({"seq": len(self.log), "tick": self.tick, "kind": kind, "sender": actor,
                         "receiver": actor, "stage": stage, "round": rnd, "bytes": 0, "sha256": ""})

    def _record(self, msg: Message) -> None:
        self.log.append({"seq": len(self.log), "tick": self.tick, "kind": msg.kind, "sender": msg.sender,
                         "receiver": msg.receiver, "stage": msg.stage, "round": msg.round,
                         "bytes": len(msg.payload), "sha256": hashlib.sha256(msg.payload).hexdigest()[:16]})


def route(net: Network, msg: Message) -> Message:
    """Send one message and return it as delivered to its receiver."""
    net.send(msg)
    for _ in range(net.latency):
        net.advance()
    for m in net.receive(msg.receiver, msg.kind):
        if m is msg:
            return m
    raise ProtocolError("message was not delivered")


# benchmark assembly


def build_benchmark(cfg: RunConfig) -> Benchmark:
    b, f, seed = cfg.benchmark, cfg.federation, cfg.seed
    raw_dim = cfg.encoder.seq_len * cfg.encoder.d
    universe = datagen.gen_universe(b.num_classes, raw_dim, make_rng(seed, 1), mean_scale=b.mean_scale,
                                    std_range=(b.std_low, b.std_high), separation=b.separation)
    k = f.num_clients
    if b.setting == "overlap":
        sched = datagen.gen_schedule(k, f.num_phases, f.rounds_per_stage, f.new_task_client_fraction,
                                     make_rng(seed, 3))
        n_tasks = len(sched.task_ids())
        tasks = datagen.gen_task_stream(universe, n_tasks, b.classes_per_task, b.per_class_fraction,
                                        b.overlap_mode, make_rng(seed, 2), max_shared=b.max_shared)
        owner = {}
        for ph in sched.phases:
            for c in ph.new_clients:
                owner[ph.assignments[c]] = c
        manifests = {t.task_id: {owner[t.task_id]: datagen.class_totals(t, b.train_per_class)} for t in tasks}
    else:
        tasks = datagen.gen_task_stream(universe, f.num_phases, b.classes_per_task, b.per_class_fraction,
                                        b.overlap_mode, make_rng(seed, 2), max_shared=b.max_shared)
        manifests = {}
        phases = []
        for t in tasks:
            per_client, _ = datagen.partition_dirichlet(t, k, b.dirichlet_beta, make_rng(seed, 4, t.task_id),
                                                        samples_per_class=b.train_per_class)
            manifests[t.task_id] = {c: m for c, m in enumerate(per_client) if sum(m.values()) > 0}
            active = sorted(manifests[t.task_id])
            phases.append(datagen.Phase(t.task_id, {c: (t.task_id if c in active else None) for c in range(k)},
                                        tuple(active)))
        sched = datagen.StageSchedule(tuple(phases), f.rounds_per_stage)
    shifts = {}
    if b.task_shift > 0:
        by_id = {c.class_id: c for c in universe}
        for t in tasks:
            rng = make_rng(seed, 5, t.task_id)
            per = {}
            for c in t.class_ids:
                u = rng.standard_normal(raw_dim)
                per[c] = b.task_shift * by_id[c].true_std * u / np.linalg.norm(u) * np.sqrt(raw_dim)
            shifts[t.task_id] = per
    bench = Benchmark(universe, tasks, sched, k, manifests, shifts)
    materialize(bench, cfg)
    return bench


def materialize(bench: Benchmark, cfg: RunConfig) -> None:
    """Draw the train sets per (task, client) and the unshifted test set per task."""
    seed = cfg.seed
    for t in bench.tasks:
        for c, man in sorted(bench.manifests[t.task_id].items()):
            bench.train[(t.task_id, c)] = datagen.sample_dataset(
                t, man, bench.universe, make_rng(seed, 6, t.task_id, c), shift=bench.shifts.get(t.task_id))
        test_man = {cl: cfg.benchmark.test_per_class for cl in t.class_ids}
        bench.test[t.task_id] = datagen.sample_dataset(t, test_man, bench.universe, make_rng(seed, 7, t.task_id))


# evaluation


def evaluate(pool: PromptPool, clf: Classifier, eval_sets: dict[int, Dataset], enc: FrozenEncoder,
             classes: Optional[list[int]] = None) -> dict[int, Optional[float]]:
    """Accuracy per task with prompts synthesised from the whole pool.

    Prediction is the argmax over ``classes`` (default: classes the merged
    head has rows for). Empty sets map to None.
    """
    if len(pool) == 0:
        raise ProtocolError("evaluation needs a non-empty prompt pool")
    cols = np.array(sorted(classes if classes is not None else clf.trained), dtype=np.int64)
    w = clf.weight[cols]
    empty = PromptPool(pool.length, pool.dim)
    out: dict[int, Optional[float]] = {}
    for tid in sorted(eval_sets):
        ds = eval_sets[tid]
        if len(ds) == 0:
            out[tid] = None
            continue
        tok = enc.tokenize(ds.x)
        q = query_features(enc, tok)
        px, _ = mixed_prompt(empty, pool, q)
        feats, _ = _encode_groups(enc, tok, None, px)
        pred = cols[np.argmax(feats @ w.T, axis=1)]
        out[tid] = float(np.mean(pred == ds.y))
    return out


# the run


@dataclass
class RunRecord:
    config: dict
    accuracy: AccuracyMatrix
    loss_trace: list = field(default_factory=list)
    w_snapshots: list = field(default_factory=list)
    message_log: list = field(default_factory=list)
    wall_clock: float = 0.0


class Simulation:
    def __init__(self, cfg: RunConfig, bench: Optional[Benchmark] = None, faults: Optional[dict] = None):
        self.cfg = cfg.validate()
        self.hp = cfg.hyperparams()
        self.bench = bench if bench is not None else build_benchmark(cfg)
        e = cfg.encoder
        self.enc = FrozenEncoder(e.kind, e.d, e.feature_dim, e.seq_len, raw_dim=self.bench.feature_dim, seed=e.seed)
        self.net = Network(cfg.federation.latency_ticks)
        self.net.register(SERVER)
        self.net.register(EVALUATOR)
        self.server = ServerState(self.hp.prompt_len, e.d)
        k = self.bench.num_clients
        t = cfg.training
        self.clients = {
            c: ClientState(c, len(self.bench.universe), self.enc, self.hp, make_rng(cfg.seed, 10, c),
                           batch_size=t.batch_size, logit_scope=t.logit_scope,
                           lcdc_rng=make_rng(cfg.seed, 11, c))
            for c in range(k)
        }
        for c in self.clients:
            self.net.register(client_name(c))
        self.trace: list = []
        self.faults = faults or {}

    def _upload_dropped(self, phase: int, rnd: int, client: int) -> bool:
        return (phase, rnd, client) in self.faults.get("drop_upload", set())

    def run(self) -> RunRecord:
        cfg, bench, net = self.cfg, self.bench, self.net
        start = time.perf_counter()
        nr = cfg.federation.rounds_per_stage
        timeout = cfg.federation.timeout_ticks
        trace = self.trace if cfg.outputs.loss_trace else None
        current: dict[int, Optional[int]] = {c: None for c in self.clients}
        task_records: dict[int, list] = {}
        acc: dict = {}
        eval_points = []
        for ph in bench.schedule.phases:
            p = ph.phase_id
            point = (p + 1) * nr
            active = []
            for c in sorted(self.clients):
                tid = ph.assignments.get(c)
                if tid is not None and len(bench.train.get((tid, c), ())) == 0:
                    tid = None
                if current[c] is not None and tid != current[c]:
                    # the finished local task's prompts join the frozen pool
                    if self.clients[c].disc is not None:
                        self.server.global_pool = grow_pool(self.server.global_pool, self.clients[c].disc)
                    current[c] = None
                if tid is None:
                    continue
                if current[c] is None:
                    self.clients[c].start_task(tid, p, bench.train[(tid, c)])
                    task_records.setdefault(tid, [point, point])
                    current[c] = tid
                task_records[tid][1] = point
                active.append(c)
            new = [c for c in active if self.clients[c].stage == p]
            for c in active:
                self.clients[c].set_history(self.server.global_pool)

            if cfg.lcdc_enabled and new:
                self._round_zero(p, new)

            pools: dict[int, Optional[PromptPool]] = {c: None for c in active}
            for rnd in range(1, nr + 1):
                if not active:
                    break
                names = [client_name(c) for c in active]
                for c in active:
                    cl = self.clients[c]
                    cl.receive_prompts(pools[c], p)
                    rep = cl.disc_train_round(cfg.training.epochs, p, rnd, use_comp=cfg.lcdc_enabled, trace=trace)
                    if self._upload_dropped(p, rnd, c):
                        continue
                    net.send(Message("PromptUpload", client_name(c), SERVER, p, rnd,
                                     json.dumps(rep.prompts.to_json()).encode()))
                    net.send(Message("HistogramUpload", client_name(c), SERVER, p, rnd,
                                     json.dumps(rep.histogram.to_json()).encode()))
                prompt_msgs = net.barrier(SERVER, "PromptUpload", p, rnd, names, timeout)
                hist_msgs = net.barrier(SERVER, "HistogramUpload", p, rnd, names, timeout)
                hists = {c: ClientHistogram.from_json(json.loads(hist_msgs[client_name(c)].payload)) for c in active}
                order = sorted({cl for h in hists.values() for cl in h.class_index})
                uploads = {
                    c: (PromptPool.from_json(json.loads(prompt_msgs[client_name(c)].payload)),
                        flatten_for_upload(hists[c], order))
                    for c in active
                }
                net.note("Aggregate", SERVER, p, rnd)
                mixed = self.server.aggregate_round(p, rnd, uploads, order, tau=self.hp.tau,
                                                    class_aware=cfg.cpa_enabled,
                                                    normalize_rows=cfg.training.normalize_histograms)
                for c in active:
                    net.send(Message("AggregatedPrompts", SERVER, client_name(c), p, rnd,
                                     json.dumps(mixed[c].to_json()).encode()))
                for c in active:
                    net.barrier(client_name(c), "AggregatedPrompts", p, rnd, [SERVER], timeout)
                for c in active:
                    pools[c] = mixed[c]
                    self.clients[c].disc = mixed[c]
            net.advance()

            # evaluation on every task seen so far
            net.send(Message("EvalRequest", SERVER, EVALUATOR, p, nr, json.dumps({"point": point}).encode()))
            net.barrier(EVALUATOR, "EvalRequest", p, nr, [SERVER], timeout)
            eval_pool = self.server.global_pool
            for c in active:
                eval_pool = grow_pool(eval_pool, self.clients[c].disc)
            merged = merge_classifiers([self.clients[c].classifier for c in sorted(self.clients)
                                        if self.clients[c].classifier.trained])
            seen = {tid: bench.test[tid] for tid in sorted(task_records)}
            res = evaluate(eval_pool, merged, seen, self.enc)
            for tid, a in res.items():
                if a is not None:
                    acc[(tid, point)] = a
            eval_points.append(point)

        tasks = [TaskRecord(t, r[0], r[1]) for t, r in sorted(task_records.items())]
        matrix = AccuracyMatrix(eval_points, tasks, acc)
        if cfg.metrics.single_task_reference:
            matrix.single_task_acc = single_task_references(cfg, bench, sorted(task_records))
        return RunRecord(cfg.to_dict(), matrix, list(self.trace), list(self.server.w_snapshots), list(net.log),
                         time.perf_counter() - start)

    def _round_zero(self, p: int, new: list[int]) -> None:
        net, cfg = self.net, self.cfg
        timeout = cfg.federation.timeout_ticks
        for c in new:
            rep = self.clients[c].report_distribution(p)
            net.send(Message("DistReport", client_name(c), SERVER, p, 0, json.dumps(rep.to_json()).encode()))
        msgs = net.barrier(SERVER, "DistReport", p, 0, [client_name(c) for c in new], timeout)
        reports = {(c, self.clients[c].task_id): DistributionReport.from_json(json.loads(msgs[client_name(c)].payload))
                   for c in new}
        stats = self.server.ingest_reports(reports)
        payload = encode_stats(stats)
        net.broadcast("GlobalStats", SERVER, [client_name(c) for c in new], p, 0, payload)
        trace = self.trace if cfg.outputs.loss_trace else None
        for c in new:
            got = net.barrier(client_name(c), "GlobalStats", p, 0, [SERVER], timeout)
            gstats = {s.class_id: s for s in decode_stats(got[SERVER].payload)}
            self.clients[c].lcdc_phase(gstats, cfg.training.lcdc_epochs, trace=trace, stage=p)


def single_task_references(cfg: RunConfig, bench: Benchmark, task_ids: list[int]) -> dict[int, float]:
    """Accuracy of one client trained alone on each task with the same round budget and mode."""
    out = {}
    for tid in task_ids:
        parts = [bench.train[k] for k in sorted(bench.train) if k[0] == tid]
        data = Dataset(np.concatenate([d.x for d in parts]), np.concatenate([d.y for d in parts]))
        task = next(t for t in bench.tasks if t.task_id == tid)
        phase = datagen.Phase(0, {0: tid}, (0,))
        solo = Benchmark(bench.universe, [task], datagen.StageSchedule((phase,), bench.schedule.rounds_per_phase),
                         1, {tid: {0: {}}}, {}, {(tid, 0): data}, {tid: bench.test[tid]})
        sub = dataclasses.replace(
            cfg, seed=cfg.seed * 1000 + 17 + tid,
            metrics=MetricsConfig(aia_variant=cfg.metrics.aia_variant, single_task_reference=False),
            outputs=OutputConfig(w_snapshots=False, message_log=False, loss_trace=False))
        rec = Simulation(sub, bench=solo).run()
        out[tid] = rec.accuracy.acc[(tid, rec.accuracy.eval_points[-1])]
    return out


def run(config: RunConfig, faults: Optional[dict] = None) -> RunRecord:
    return Simulation(config, faults=faults).run()
