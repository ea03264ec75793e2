"""Pydantic models: experiment configuration, run records, persisted documents and API read models."""
from __future__ import annotations

import json
import os
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

from errors import ConfigurationError

load_dotenv()

SOFTWARE_VERSION = "1.0.0"
DEFAULT_OUTPUT_DIR = os.getenv("WVA_OUTPUT_DIR", "./results")


class SignificanceKind(str, Enum):
    signal = "signal"
    fisher = "fisher"


class FisherLabels(str, Enum):
    sampled = "sampled"
    true = "true"


class Method(str, Enum):
    sgd = "sgd"
    ewc = "ewc"
    wva = "wva"


class ExperimentKind(str, Enum):
    permuted = "permuted"
    split = "split"


class EvalSplit(str, Enum):
    test = "test"
    train = "train"
    both = "both"


METHOD_LABELS = ("sgd", "ewc-s", "ewc-f", "wva-s", "wva-f")
_KIND_SUFFIX = {"s": SignificanceKind.signal, "f": SignificanceKind.fisher}


class MethodConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True)

    method: Method
    significance_kind: Optional[SignificanceKind] = None
    lambda_: float = Field(0.0, alias="lambda", ge=0.0)
    learning_rate: float = Field(0.1, gt=0.0)

    @model_validator(mode="after")
    def _kind_for_regularized(self):
        if self.method is not Method.sgd and self.significance_kind is None:
            raise ValueError(f"{self.method.value} needs a significance_kind")
        return self

    @property
    def label(self) -> str:
        if self.method is Method.sgd:
            return "sgd"
        return f"{self.method.value}-{self.significance_kind.value[0]}"

    @classmethod
    def from_label(cls, label: str, lambda_: float = 0.0, learning_rate: float = 0.1) -> "MethodConfig":
        label = label.strip().lower()
        if label not in METHOD_LABELS:
            raise ConfigurationError(f"Unknown method {label!r}; choose from {', '.join(METHOD_LABELS)}")
        if label == "sgd":
            return cls(method=Method.sgd, learning_rate=learning_rate)
        method, suffix = label.split("-")
        return cls(method=Method(method), significance_kind=_KIND_SUFFIX[suffix],
                   lambda_=lambda_, learning_rate=learning_rate)


class EarlyStopConfig(BaseModel):
    enabled: bool = False
    # eval points without improvement before halting; None scans the whole task
    patience: Optional[int] = Field(None, ge=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentKind = ExperimentKind.permuted
    tasks: Optional[int] = Field(None, ge=1)
    methods: List[str] = Field(default_factory=lambda: list(METHOD_LABELS))
    lambdas: Dict[str, float] = Field(default_factory=dict)
    hidden_sizes: List[int] = Field(default_factory=lambda: [300, 150])
    learning_rate: float = Field(0.1, gt=0.0)
    batch_size: int = Field(100, ge=1)
    epochs: int = Field(5, ge=1)
    passes: int = Field(10, ge=1)
    eval_interval: int = Field(100, ge=1)
    eval_split: EvalSplit = EvalSplit.test
    early_stop: EarlyStopConfig = Field(default_factory=EarlyStopConfig)
    seed: int = Field(0, ge=0)
    subsample: Optional[int] = Field(None, ge=1)
    subsample_test: Optional[int] = Field(None, ge=1)
    split_classes: List[List[int]] = Field(default_factory=lambda: [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]])
    identity_first_task: bool = True
    fisher_labels: FisherLabels = FisherLabels.sampled
    significance_batch_size: int = Field(1000, ge=1)
    data_dir: Optional[str] = None
    output_dir: str = DEFAULT_OUTPUT_DIR
    formats: List[str] = Field(default_factory=lambda: ["csv", "json"])
    persist_artifacts: bool = False

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, value: List[str]) -> List[str]:
        value = [m.strip().lower() for m in value]
        if not value:
            raise ValueError("at least one method is required")
        unknown = [m for m in value if m not in METHOD_LABELS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHOD_LABELS)}")
        if len(set(value)) != len(value):
            raise ValueError("methods must not repeat")
        return value

    @field_validator("lambdas")
    @classmethod
    def _non_negative_lambdas(cls, value: Dict[str, float]) -> Dict[str, float]:
        for key, lam in value.items():
            if key.lower() not in METHOD_LABELS:
                raise ValueError(f"lambda given for unknown method {key!r}")
            if lam < 0:
                raise ValueError(f"lambda for {key} must be >= 0")
        return {k.lower(): v for k, v in value.items()}

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_sizes(cls, value: List[int]) -> List[int]:
        if any(n <= 0 for n in value):
            raise ValueError("hidden layer sizes must be positive")
        return value

    @field_validator("split_classes")
    @classmethod
    def _valid_classes(cls, value: List[List[int]]) -> List[List[int]]:
        for classes in value:
            if not classes or any(c < 0 or c > 9 for c in classes):
                raise ValueError(f"class set {classes} must be a non-empty subset of 0..9")
        return value

    @field_validator("formats")
    @classmethod
    def _known_formats(cls, value: List[str]) -> List[str]:
        if not value or any(f not in ("csv", "json") for f in value):
            raise ValueError("formats must be a non-empty subset of ['csv', 'json']")
        return value

    @model_validator(mode="after")
    def _resolve_tasks_and_lambdas(self, info: ValidationInfo):
        if self.experiment is ExperimentKind.split:
            if self.tasks is not None and self.tasks != len(self.split_classes):
                raise ValueError(
                    f"split experiment has {len(self.split_classes)} class sets but tasks={self.tasks}"
                )
            self.tasks = len(self.split_classes)
        elif self.tasks is None:
            self.tasks = 3
        # a lambda sweep supplies its own grid
        require_lambdas = (info.context or {}).get("require_lambdas", True)
        missing = [m for m in self.methods if m != "sgd" and m not in self.lambdas]
        if missing and require_lambdas:
            raise ValueError(f"lambda is required for {missing}")
        return self

    def method_configs(self) -> List[MethodConfig]:
        return [MethodConfig.from_label(m, self.lambdas.get(m, 0.0), self.learning_rate) for m in self.methods]


def parse_config(data: Dict[str, Any], require_lambdas: bool = True) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data, context={"require_lambdas": require_lambdas})
    except ValidationError as e:
        raise ConfigurationError(f"Invalid experiment configuration:\n{e}") from e


def read_config_file(path) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigurationError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must hold a JSON object")
    return data


def load_config(path, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a JSON config file; ``overrides`` (e.g. CLI flags) win over file values."""
    data: Dict[str, Any] = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return parse_config(data)


class EvalRow(BaseModel):
    pass_id: int
    method: str
    training_task: int
    global_step: int
    accuracies: List[float]
    mean_accuracy: float
    train_accuracies: Optional[List[float]] = None
    selected: bool = False


class RunSeeds(BaseModel):
    init: int
    permutations: List[Optional[int]]
    batch_order: List[int]
    fisher: List[int]


class RunRecord(BaseModel):
    pass_id: int
    method: str
    lambda_: float = Field(0.0, alias="lambda")
    learning_rate: float
    seeds: RunSeeds
    task_descriptors: List[Dict[str, Any]]
    rows: List[EvalRow] = Field(default_factory=list)
    post_task_accuracy: List[Optional[float]] = Field(default_factory=list)
    final_accuracy: List[Optional[float]] = Field(default_factory=list)
    early_stop_steps: Dict[int, int] = Field(default_factory=dict)
    failed: bool = False
    failure: Optional[str] = None

    model_config = ConfigDict(populate_by_name=True)


class ExperimentResult(BaseModel):
    software_version: str = SOFTWARE_VERSION
    config: ExperimentConfig
    records: List[RunRecord]


class SignificanceDocument(BaseModel):
    kind: SignificanceKind
    source_tasks: List[int] = Field(default_factory=list)
    n_examples: int = 0
    weights: List[List[List[float]]]
    biases: List[List[float]]


class AnchorDocument(BaseModel):
    source_task: Optional[int] = None
    weights: List[List[List[float]]]
    biases: List[List[float]]


# ---------------- Read models for the results API ----------------

class ExperimentRead(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    experiment_id: int
    name: str
    kind: str
    created_at: datetime
    software_version: str
    num_runs: int = 0


class ExperimentDetail(ExperimentRead):
    config: Dict[str, Any]


class RunRead(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    run_id: int
    experiment_id: int
    pass_id: int
    method: str
    lambda_value: float
    failed: bool
    failure: Optional[str] = None


class EvalPointRead(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    training_task: int
    global_step: int
    mean_accuracy: float
    accuracies: List[float]
    selected: bool


class AggregatePointRead(BaseModel):
    method: str
    training_task: int
    global_step: int
    n: int
    mean_accuracy: float
    sd_accuracy: Optional[float] = None
    task_means: List[float]
