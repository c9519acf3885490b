"""Run configuration: one JSON document, strictly validated.

Unknown keys are rejected so that typos cannot silently fall back to
defaults. The top-level ``seed`` determines the dataset, the initialisation
and the training order.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .align import LOSS_TERMS
from .compress import CompressConfig, MetricKind, RecoverConfig
from .detector import ModelConfig, TaskConfig
from .exceptions import ConfigError
from .metrics import THUMOS_TIOUS, EvalConfig
from .nn import LORA_TARGETS


@dataclass
class TrainSection:
    lr: float = 3e-3
    steps: int = 2400
    batch_size: int = 16
    warmup: int = 20
    focal: bool = False


@dataclass
class CompressSection:
    metric_kind: str = MetricKind.TRAIN_MAP.value
    epsilon: float = 0.0
    max_drops: int = 3
    rank_ratio: float = 0.25
    targets: list = field(default_factory=lambda: list(LORA_TARGETS))
    freeze_head: bool = False
    full_ft: bool = False
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_TERMS})
    lr: float = 3e-3
    steps: int = 150
    batch_size: int = 16
    lr_overrides: dict = field(default_factory=dict)


@dataclass
class EvalSection:
    tiou_thresholds: list = field(default_factory=lambda: list(THUMOS_TIOUS))
    nms_tiou: float = 0.5
    score_thr: float = 0.05
    max_dets: int = 50
    report_tiou: float = 0.5


@dataclass
class BenchSection:
    reps: int = 30
    warmup: int = 5
    precision: str = "float32"


@dataclass
class AblateSection:
    seeds: list = field(default_factory=lambda: [0])
    drops: int = 3
    sparsity_steps: int = 300
    sparsity_full_ft: bool = True


_TASK_FIELDS = [f.name for f in dataclasses.fields(TaskConfig) if f.name != "seed"]


@dataclass
class RunConfig:
    seed: int = 0
    task: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    compress: CompressSection = field(default_factory=CompressSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    # -- derived objects --------------------------------------------------
    def task_config(self):
        return TaskConfig(seed=self.seed, **self.task).validate()

    def eval_config(self):
        e = self.eval
        return EvalConfig(tuple(e.tiou_thresholds), e.nms_tiou, e.score_thr, e.max_dets)

    def recover_config(self):
        c = self.compress
        weights = {k: 1.0 for k in LOSS_TERMS}
        weights.update(c.loss_weights)
        return RecoverConfig(lr=c.lr, steps=c.steps, batch_size=c.batch_size,
                             rank_ratio=c.rank_ratio, targets=tuple(c.targets),
                             freeze_head=c.freeze_head, full_ft=c.full_ft, weights=weights,
                             focal=self.train.focal, seed=self.seed)

    def compress_config(self):
        c = self.compress
        return CompressConfig(c.metric_kind, c.epsilon, c.max_drops, self.recover_config(),
                              self.eval_config(), self.eval.report_tiou,
                              {int(k): float(v) for k, v in c.lr_overrides.items()})

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        self.task_config()
        self.model.validate()
        self.eval_config()
        c = self.compress
        if c.metric_kind not in MetricKind.__members__:
            raise ConfigError(f"compress.metric_kind must be one of {list(MetricKind.__members__)}")
        if c.epsilon < 0:
            raise ConfigError("compress.epsilon must be non-negative")
        if c.max_drops < 0:
            raise ConfigError("compress.max_drops must be non-negative")
        if not 0 < c.rank_ratio <= 1:
            raise ConfigError("compress.rank_ratio must lie in (0, 1]")
        if not c.targets or set(c.targets) - set(LORA_TARGETS):
            raise ConfigError(f"compress.targets must be a non-empty subset of {list(LORA_TARGETS)}")
        unknown = set(c.loss_weights) - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"compress.loss_weights: unknown terms {sorted(unknown)}")
        if any(w < 0 for w in c.loss_weights.values()):
            raise ConfigError("compress.loss_weights must be non-negative")
        for k in c.lr_overrides:
            if not str(k).isdigit():
                raise ConfigError("compress.lr_overrides keys must be iteration numbers")
        for name, v in (("train.lr", self.train.lr), ("compress.lr", c.lr)):
            if not v > 0:
                raise ConfigError(f"{name} must be positive")
        for name, v in (("train.steps", self.train.steps), ("compress.steps", c.steps)):
            if v < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.train.batch_size < 1 or c.batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.bench.reps < 10:
            raise ConfigError("bench.reps must be at least 10")
        if self.bench.precision not in ("float32", "float64"):
            raise ConfigError("bench.precision must be float32 or float64")
        if not self.ablate.seeds:
            raise ConfigError("ablate.seeds must be non-empty")
        return self


# ---------------------------------------------------------------------
# strict parsing
# ---------------------------------------------------------------------
def _check_type(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
        value = list(value) if ok else value
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(defaults, key)
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, sub)
        elif key == "task" and cls is RunConfig:
            kwargs[key] = _build_task(value, sub)
        else:
            kwargs[key] = _check_type(sub, value, default)
    return cls(**kwargs)


def _build_task(data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(data) - set(_TASK_FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)} (the seed is set at top level)")
    defaults = TaskConfig()
    return {k: _check_type(f"{path}.{k}", v, getattr(defaults, k)) for k, v in data.items()}


def parse_config(data):
    """Build and validate a ``RunConfig`` from a parsed JSON object."""
    return _build(RunConfig, data, "").validate()


def load_config(path, seed=None):
    """Read ``path``; ``seed`` (when given) overrides the file's seed."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = parse_config(data)
    return cfg.with_seed(seed) if seed is not None else cfg


def default_config():
    return RunConfig().validate()
