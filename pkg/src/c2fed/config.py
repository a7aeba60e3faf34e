"""Run configuration: nested YAML sections mirroring ``RunConfig``.

Every field has a default. Unknown keys are rejected by name, and the fully
resolved configuration is echoed into each run directory so the run can be
replayed from that file alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .losses import HyperParams

MODES = ("baseline", "lcdc-only", "cpa-only", "full")


@dataclass
class FederationConfig:
    num_clients: int = 5
    rounds_per_stage: int = 3
    num_phases: int = 4
    new_task_client_fraction: float = 0.4
    latency_ticks: int = 0
    timeout_ticks: int = 100


@dataclass
class BenchmarkConfig:
    setting: str = "overlap"  # overlap: one client per task; fcil: disjoint tasks split by Dirichlet
    num_classes: int = 20
    classes_per_task: int = 5
    overlap_mode: str = "random-overlap"
    max_shared: Optional[int] = None
    train_per_class: int = 200
    per_class_fraction: float = 0.2
    test_per_class: int = 40
    dirichlet_beta: float = 0.5
    # per-task offset of a class's sampling mean, in units of that class's std
    task_shift: float = 0.0
    mean_scale: float = 1.0
    std_low: float = 0.5
    std_high: float = 1.0
    separation: float = 2.0


@dataclass
class EncoderConfig:
    kind: str = "single-head-attention"
    d: int = 16
    feature_dim: int = 16
    seq_len: int = 4
    seed: int = 0


@dataclass
class PromptConfig:
    num_prompts: int = 8
    prompt_len: int = 10
    comp_len: int = 3


@dataclass
class TrainingConfig:
    lr: float = 0.01
    beta: float = 1.0
    tau: float = 1.0
    p_use_comp: float = 0.5
    epochs: int = 5
    lcdc_epochs: int = 5
    batch_size: int = 32
    normalize_histograms: bool = False
    logit_scope: str = "owned"  # owned: every class this client has trained; task: current task only


@dataclass
class MetricsConfig:
    aia_variant: str = "mean"  # mean (per eval point) or sum (literal)
    single_task_reference: bool = True


@dataclass
class OutputConfig:
    w_snapshots: bool = False
    message_log: bool = True
    loss_trace: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "full"
    run_id: str = "run"
    federation: FederationConfig = field(default_factory=FederationConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)

    @property
    def lcdc_enabled(self) -> bool:
        return self.mode in ("lcdc-only", "full")

    @property
    def cpa_enabled(self) -> bool:
        return self.mode in ("cpa-only", "full")

    def hyperparams(self) -> HyperParams:
        t, p = self.training, self.prompts
        return HyperParams(beta=t.beta, tau=t.tau, p_use_comp=t.p_use_comp, lr=t.lr,
                           comp_len=p.comp_len, prompt_len=p.prompt_len, num_prompts=p.num_prompts)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    def validate(self) -> "RunConfig":
        f, b, e, t = self.federation, self.benchmark, self.encoder, self.training
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (f.num_clients >= 1, "federation.num_clients must be >= 1"),
            (f.rounds_per_stage >= 1, "federation.rounds_per_stage must be >= 1"),
            (f.num_phases >= 1, "federation.num_phases must be >= 1"),
            (0 < f.new_task_client_fraction <= 1, "federation.new_task_client_fraction must lie in (0, 1]"),
            (f.latency_ticks >= 0, "federation.latency_ticks must be >= 0"),
            (b.setting in ("overlap", "fcil"), "benchmark.setting must be overlap or fcil"),
            (b.overlap_mode in ("random-overlap", "disjoint"), "benchmark.overlap_mode must be random-overlap or disjoint"),
            (2 <= b.num_classes, "benchmark.num_classes must be >= 2"),
            (1 <= b.classes_per_task <= b.num_classes, "benchmark.classes_per_task must be in [1, num_classes]"),
            (0 < b.per_class_fraction <= 1, "benchmark.per_class_fraction must lie in (0, 1]"),
            (b.train_per_class >= 1 and b.test_per_class >= 1, "benchmark sample counts must be >= 1"),
            (b.dirichlet_beta > 0, "benchmark.dirichlet_beta must be positive"),
            (b.task_shift >= 0, "benchmark.task_shift must be >= 0"),
            (e.kind in ("mean-pool-linear", "single-head-attention"), "encoder.kind is unknown"),
            (e.d >= 1 and e.seq_len >= 1, "encoder.d and encoder.seq_len must be >= 1"),
            (e.feature_dim == e.d, "encoder.feature_dim must equal encoder.d (queries live in token space)"),
            (t.epochs >= 1 and t.lcdc_epochs >= 0 and t.batch_size >= 1, "training epochs and batch_size must be >= 1"),
            (t.logit_scope in ("owned", "task"), "training.logit_scope must be owned or task"),
            (self.metrics.aia_variant in ("mean", "sum"), "metrics.aia_variant must be mean or sum"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if b.setting == "fcil" and b.overlap_mode == "disjoint":
            if f.num_phases * b.classes_per_task > b.num_classes:
                raise ConfigError("fcil: num_phases * classes_per_task exceeds num_classes")
        try:
            self.hyperparams()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        f = known[key]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[key] = _build(sub, value or {}, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(value, f, f"{prefix}{key}")
    return cls(**kwargs)


def _coerce(value: Any, f, name: str):
    default = f.default
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes", "on"):
                    return True
                if value.lower() in ("false", "0", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {name}") from None


def from_dict(data: Optional[dict]) -> RunConfig:
    return _build(RunConfig, data or {})


def load(path: Optional[Path], overrides: Optional[list[str]] = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    for item in overrides or []:
        apply_override(data, item)
    return from_dict(data).validate()


def apply_override(data: dict, item: str) -> None:
    """``a.b=value``; the value is parsed as YAML so numbers and booleans keep their type."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key} walks into a scalar")
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError:
        node[parts[-1]] = raw
