"""Run configuration for the command-line runner.

A run is described by one JSON document with five blocks::

    {
      "task":       {"kind": "regression", "dataset": {"synthetic": {"kind": "sine-regression", "n": 2000}}},
      "model":      {"architecture": "A", "train": {"max_epochs": 400}},
      "samplers":   [{"kind": "bernoulli"}, {"kind": "dpp"}],
      "evaluation": {"t_list": [10, 30, 100], "splits": 5, "folds": 2, "runs": 5},
      "io":         {"out": "runs/sine", "seed": 0}
    }

Unknown keys are rejected at every level. Relative input paths (datasets,
weights, kernels, masks, input rows) are resolved against the directory of
the config file; the output directory is relative to the working directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from divdrop.errors import DivdropError
from divdrop.evaluation.data import CsvSchema, TabularDataset, load_csv, make_synthetic
from divdrop.evaluation.protocols import ARCHITECTURES, ModelConfig, ProtocolConfig
from divdrop.network import TrainConfig
from divdrop.samplers import SamplerConfig


ALL_ONES = "all-ones"  # io.masks sentinel: deterministic pass, no bank file


class ConfigError(DivdropError, ValueError):
    """Invalid or unreadable run configuration."""


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticBlock(_Block):
    kind: Literal["sine-regression", "gaussian-blobs"]
    n: int = Field(2000, ge=16)
    noise: float = Field(0.1, ge=0)
    seed: int = 0
    n_features: int = Field(2, ge=2)
    n_classes: int = Field(3, ge=2)
    separation: float = 4.0
    label_noise: float = Field(0.0, ge=0, le=1)
    shift: float = 0.0


class DatasetBlock(_Block):
    path: Optional[str] = None
    target: Optional[str] = None
    features: Optional[list[str]] = None
    n_classes: Optional[int] = Field(None, ge=2)
    synthetic: Optional[SyntheticBlock] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("give exactly one of 'path' or 'synthetic'")
        if self.path is not None and not self.target:
            raise ValueError("'target' is required with 'path'")
        return self


class TaskBlock(_Block):
    kind: Literal["regression", "classification"] = "regression"
    dataset: DatasetBlock
    ood: Optional[DatasetBlock] = None


class TrainBlock(_Block):
    max_epochs: int = Field(10_000, ge=1)
    batch_size: int = Field(500, ge=1)
    check_interval: int = Field(100, ge=1)
    patience: int = Field(5, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    loss: Optional[Literal["mse", "cross-entropy"]] = None
    validation_fraction: float = Field(0.2, gt=0, lt=1)


class ModelBlock(_Block):
    architecture: Optional[Literal["A", "B", "C", "D"]] = None
    hidden: Optional[list[int]] = None
    activation: Optional[Literal["leaky-relu", "relu", "celu"]] = None
    dropout_rate: Optional[float] = Field(None, gt=0, lt=1)
    dropout_layers: Optional[list[int]] = None
    ensemble_size: int = Field(1, ge=1)
    train: TrainBlock = TrainBlock()

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if v is not None and (not v or any(w < 1 for w in v)):
            raise ValueError("hidden widths must be a non-empty list of positive integers")
        return v


class SamplerBlock(_Block):
    kind: Literal["bernoulli", "leverage", "dpp", "kdpp"]
    name: Optional[str] = None
    ridge: float = Field(1.0, ge=0)
    kernel_kind: Optional[Literal["correlation", "covariance"]] = None
    max_attempts: int = Field(100, ge=1)
    rescale_leverage: bool = False


class EvaluationBlock(_Block):
    t_list: list[int] = [10, 30, 100]
    T: int = Field(100, ge=1)
    t_max: int = Field(100, ge=2)
    splits: int = Field(5, ge=1)
    folds: Literal[1, 2] = 2
    runs: int = Field(5, ge=1)
    repeats: int = Field(5, ge=1)
    percentiles: list[float] = [80.0, 90.0, 95.0]
    measure: Literal["bald", "entropy", "max_prob", "variation_ratio"] = "bald"
    calibration: Literal["validation", "test", "train"] = "validation"
    var_floor: float = Field(1e-6, gt=0)
    split_kind: Literal["ood-median", "random-half"] = "ood-median"
    feature: Optional[int] = Field(None, ge=0)
    grid_size: int = Field(50, ge=2)

    @field_validator("t_list")
    @classmethod
    def _t_list(cls, v):
        if not v or any(t < 1 for t in v):
            raise ValueError("t_list must be a non-empty list of positive integers")
        return v

    @field_validator("percentiles")
    @classmethod
    def _percentiles(cls, v):
        if not v or any(not 0 < q < 100 for q in v):
            raise ValueError("percentiles must lie in (0, 100)")
        return v


class IoBlock(_Block):
    out: str = "divdrop-out"
    seed: Optional[int] = Field(None, ge=0)
    weights: Optional[str] = None
    kernels: Optional[str] = None
    masks: Optional[str] = None
    input: Optional[str] = None


class RunConfig(_Block):
    task: TaskBlock
    model: ModelBlock = ModelBlock()
    samplers: list[SamplerBlock] = [SamplerBlock(kind="bernoulli")]
    evaluation: EvaluationBlock = EvaluationBlock()
    io: IoBlock = IoBlock()

    @model_validator(mode="after")
    def _consistent(self):
        if not self.samplers:
            raise ValueError("at least one sampler is required")
        names = [s.name or s.kind for s in self.samplers]
        if len(set(names)) != len(names):
            raise ValueError("sampler names must be unique; set 'name' to tell repeated kinds apart")
        return self

    # --- conversion to library objects ---------------------------------

    def model_config_obj(self, seed: int = 0) -> ModelConfig:
        m = self.model
        hidden, act, p = ARCHITECTURES[m.architecture] if m.architecture else ((128, 128, 64), "leaky-relu", 0.5)
        return ModelConfig(
            hidden=tuple(m.hidden) if m.hidden else hidden,
            activation=m.activation or act,
            dropout_rate=m.dropout_rate if m.dropout_rate is not None else p,
            dropout_layers=tuple(m.dropout_layers) if m.dropout_layers is not None else None,
            train=TrainConfig(**m.train.model_dump(), seed=seed),
            ensemble_size=m.ensemble_size,
        )

    def sampler_configs(self) -> list[SamplerConfig]:
        p = self.model_config_obj().dropout_rate
        return [SamplerConfig(dropout_rate=p, **s.model_dump()) for s in self.samplers]

    def protocol(self) -> ProtocolConfig:
        e = self.evaluation
        return ProtocolConfig(calibration=e.calibration, var_floor=e.var_floor,
                              validation_fraction=self.model.train.validation_fraction)

    def echo(self) -> dict:
        """Config as echoed into reports; excludes output locations."""
        doc = self.model_dump(mode="json")
        doc["io"] = {k: v for k, v in doc["io"].items() if k not in ("out",)}
        return doc


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    return _resolve_paths(cfg, base_dir) if base_dir is not None else cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(doc, path.resolve().parent)


def _abs(p: str | None, base: Path) -> str | None:
    if p is None or p == ALL_ONES:
        return None if p is None else p
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    task = cfg.task
    ds = task.dataset.model_copy(update={"path": _abs(task.dataset.path, base)})
    ood = task.ood.model_copy(update={"path": _abs(task.ood.path, base)}) if task.ood else None
    io = cfg.io.model_copy(update={k: _abs(getattr(cfg.io, k), base) for k in ("weights", "kernels", "masks", "input")})
    return cfg.model_copy(update={"task": task.model_copy(update={"dataset": ds, "ood": ood}), "io": io})


def load_dataset(block: DatasetBlock, task: str) -> TabularDataset:
    if block.synthetic is not None:
        s = block.synthetic
        expected = "sine-regression" if task == "regression" else "gaussian-blobs"
        if s.kind != expected:
            raise ConfigError(f"task.dataset.synthetic.kind: {s.kind!r} does not fit a {task} task")
        return make_synthetic(**s.model_dump())
    schema = CsvSchema(block.target, task, block.n_classes, tuple(block.features) if block.features else None)
    path = Path(block.path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_csv(path, schema)
