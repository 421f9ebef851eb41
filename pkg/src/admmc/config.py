"""JSON run configuration. Unknown keys are rejected before any compute."""

from __future__ import annotations

import json
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, InputError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    source: Literal["mnist", "synthetic"] = "mnist"
    val_size: int = Field(5000, ge=0)
    train_limit: Optional[int] = Field(None, ge=1)
    n: int = Field(2000, ge=0)
    classes: int = Field(4, ge=1)
    dim: int = Field(16, ge=1)
    spread: float = Field(0.1, gt=0)


class ModelConfig(_Strict):
    arch: Literal["mlp", "lenet5", "lstsq"] = "mlp"
    sizes: list[int] = [784, 300, 100, 10]


class TrainConfig(_Strict):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(128, ge=1)


class OptimizerConfig(_Strict):
    kind: Literal["sgd", "adam"] = "adam"
    lr: float = Field(1e-3, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdmmConfig(_Strict):
    mode: Literal["joint", "sequential"] = "sequential"
    rho: Union[float, list[float]] = 1e-3
    eps: Union[None, float, list[float]] = None
    max_iters: int = Field(30, ge=0)
    epochs_per_iter: int = Field(1, ge=0)
    lr: float = Field(1e-4, ge=0)


class PruneConfig(_Strict):
    alphas: Optional[list[Optional[int]]] = None
    keep_fractions: Optional[list[Optional[float]]] = None

    @model_validator(mode="after")
    def _one_of(self):
        if self.alphas is not None and self.keep_fractions is not None:
            raise ValueError("give either prune.alphas or prune.keep_fractions, not both")
        return self


class DiscretizeConfig(_Strict):
    kind: Literal["quantize", "cluster"] = "quantize"
    bits: Union[int, list[Optional[int]]] = 4
    freeze_fraction: float = Field(0.2, gt=0, le=1)
    freeze_stop_fraction: float = Field(0.01, ge=0, lt=1)
    epochs_per_step: float = Field(1.0, ge=0)
    cluster_retrain_epochs: int = Field(3, ge=0)
    kmeans_init: int = Field(10, ge=1)
    max_iters: Optional[int] = Field(None, ge=0)


class RetrainConfig(_Strict):
    max_epochs: int = Field(10, ge=0)
    patience: int = Field(3, ge=1)
    lr: float = Field(1e-4, ge=0)


class ToyConfig(_Strict):
    n_samples: int = Field(40, ge=1)
    n_features: int = Field(8, ge=1)
    alpha: int = Field(3, ge=0)
    bits: int = Field(1, ge=1)
    noise: float = Field(0.1, ge=0)
    rho: float = Field(80.0, gt=0)


class RunConfig(_Strict):
    recipe: str = "custom"
    seed: int = 0
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    admm: AdmmConfig = AdmmConfig()
    prune: PruneConfig = PruneConfig()
    discretize: DiscretizeConfig = DiscretizeConfig()
    retrain: RetrainConfig = RetrainConfig()
    toy: ToyConfig = ToyConfig()


def parse_config(obj):
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError(f"invalid run config:\n{exc}") from exc


def load_config(path):
    try:
        with open(path) as f:
            obj = json.load(f)
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(obj)
