"""Experiment configuration: a TOML file mapped onto nested dataclasses.

Every field has a default, so an empty file is a valid config. Unknown keys
and ill-typed values are rejected before any compute starts.

Example::

    seed = 1
    out = "runs/demo"

    [pretrain]
    steps = 12000

    [[tasks]]
    family = "mod_chain"
    low = [1, 2]
    high = [6, 7, 8]

    [[policies]]
    kind = "lora"
    rank = 8

    [[policies]]
    kind = "flexi"
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..methods import KINDS


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 96


@dataclass
class PretrainSection:
    """Base-model pretraining; its seed is separate so one base can serve many experiment seeds."""

    seed: int = 0
    steps: int = 12000
    lr: float = 2e-3
    batch_size: int = 32
    warmup: int = 100
    n_copy: int = 2000
    kv_knobs: list[int] = field(default_factory=lambda: [2, 3, 4])
    mod_knobs: list[int] = field(default_factory=lambda: [1, 2])
    n_per_knob: int = 5000


@dataclass
class TaskSection:
    family: str = "mod_chain"
    low: list[int] = field(default_factory=lambda: [1, 2])
    high: list[int] = field(default_factory=lambda: [6, 7, 8])
    n_train: int = 4096
    n_eval: int = 200
    metric: str = ""  # empty: the family's default metric


@dataclass
class AdapterSection:
    r_max: int = 8
    alpha: float = 16.0
    targets: list[str] = field(default_factory=lambda: ["q", "v"])


@dataclass
class RouterSection:
    sigma: float = 0.1
    tau: float = 0.5
    hidden: int = 32
    epochs: int = 60
    lr: float = 1e-2
    rank_table: list[int] = field(default_factory=lambda: [2, 8])
    holdout: float = 0.2
    label_by: str = "zero_shot"  # or "knob": easy iff knob in the task's low set


@dataclass
class FinetuneSection:
    steps: int = 1500
    lr: float = 0.03
    batch_size: int = 32
    momentum: float = 0.9
    clip: float = 1.0


@dataclass
class EvalSection:
    batch_size: int = 32
    max_new: int = 4
    threads: int = 1


@dataclass
class PolicySection:
    kind: str = "lora"
    rank: int = 8  # lora
    low: int = 1  # dylora / dylora+
    high: int = 8
    inference_rank: int = 0  # dylora; 0 means ``high``


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    cache: str = ""  # base-model cache directory; empty means <out>/cache
    precision: str = "f32"
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    tasks: list[TaskSection] = field(default_factory=lambda: [TaskSection()])
    adapters: AdapterSection = field(default_factory=AdapterSection)
    router: RouterSection = field(default_factory=RouterSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    policies: list[PolicySection] = field(default_factory=lambda: [PolicySection()])

    def validate(self) -> ExperimentConfig:
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if not self.policies:
            raise ConfigError("at least one policy is required")
        if self.model.d_model % self.model.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        for t in self.tasks:
            if t.family not in ("kv_recall", "mod_chain"):
                raise ConfigError(f"unknown task family {t.family!r}")
            if t.metric and t.metric not in ("token_f1", "exact_match", "accuracy"):
                raise ConfigError(f"unknown metric {t.metric!r}")
        if len({t.family for t in self.tasks}) != len(self.tasks):
            raise ConfigError("task families must be unique")
        if self.router.label_by not in ("zero_shot", "knob"):
            raise ConfigError(f"router.label_by must be zero_shot or knob, got {self.router.label_by!r}")
        if sorted(set(self.router.rank_table)) != list(self.router.rank_table):
            raise ConfigError("router.rank_table must be strictly ascending")
        for p in self.policies:
            if p.kind not in KINDS:
                raise ConfigError(f"unknown policy kind {p.kind!r}; choose from {', '.join(KINDS)}")
        if max(self.router.rank_table) > self.adapters.r_max:
            raise ConfigError("router.rank_table exceeds adapters.r_max")
        if self.eval.threads < 1:
            raise ConfigError("eval.threads must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def slice_hash(self, *names: str, extra: Any = None) -> str:
        """Content hash of the named config sections (plus ``extra``), used as a cache key."""
        d = self.to_dict()
        blob = json.dumps({"sections": {n: d[n] for n in names}, "extra": extra}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return _build(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        (item,) = get_args(tp)
        return [_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls, data: dict, where: str):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)
