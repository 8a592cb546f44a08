"""Run configuration: a strict, nested YAML/JSON document.

Unknown keys anywhere in the document are rejected so a misspelt
hyperparameter never silently falls back to its default.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

OUTPUT_ROOT_ENV = "FEDMPT_OUTPUT_ROOT"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class GeneratorSection(_Strict):
    C: int = Field(12, ge=1)
    input_dim: int = Field(48, ge=1)
    samples: int = Field(2400, ge=1)
    eval_samples: int = Field(600, ge=1)
    spurious_strength: float = Field(0.8, ge=0.0, le=1.0)
    eval_spurious_strength: float = Field(0.0, ge=0.0, le=1.0)
    base_rate: float = Field(0.15, ge=0.0, le=1.0)
    noise_std: float = Field(0.3, ge=0.0)
    context_scale: float = 1.0


class EncoderSection(_Strict):
    M: int = Field(16, ge=1)
    D: int = Field(32, ge=1)
    token_dim: int = Field(32, ge=1)


class PartitionSection(_Strict):
    t_percent: float = Field(60.0, gt=0.0, le=100.0)


class MaskSection(_Strict):
    mask_percent: float = Field(0.0, ge=0.0, lt=100.0)


class FedSection(_Strict):
    rounds: int = Field(10, ge=0)
    participation: float = Field(1.0, gt=0.0, le=1.0)
    weighting: Literal["uniform", "size_weighted"] = "uniform"


class HyperSection(_Strict):
    tau: float = Field(4.0, gt=0.0)
    lam: float = Field(0.2, gt=0.0, alias="lambda")
    logit_scale: float = Field(25.0, gt=0.0)
    beta_cond: int = Field(4, ge=0)
    beta_cls: int = Field(4, ge=0)
    beta_baseline: int = Field(8, ge=0)
    D_s: int = Field(16, ge=1)
    gamma_pos: float = Field(1.0, ge=0.0)
    gamma_neg: float = Field(2.0, ge=0.0)
    clip: float = Field(0.05, ge=0.0, lt=1.0)
    lr: float = Field(0.001, gt=0.0)
    batch: int = Field(32, ge=1)
    local_epochs: int = Field(1, ge=0)
    sinkhorn_iters: int = Field(200, ge=1)
    sinkhorn_tol: float = Field(1e-8, gt=0.0)
    alpha_init: float = 5.0


class RunConfig(_Strict):
    model: Literal["fedmpt", "baseline"] = "fedmpt"
    conditions: list[str] = Field(default_factory=lambda: ["background", "position", "shape", "action"])
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    mask: MaskSection = Field(default_factory=MaskSection)
    fed: FedSection = Field(default_factory=FedSection)
    hyper: HyperSection = Field(default_factory=HyperSection)
    eval_interval: int = Field(1, ge=1)
    threshold: float = Field(0.5, gt=0.0, lt=1.0)
    output_dir: str = "runs/default"
    seed: int = 0

    def snapshot(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


class ConfigError(ValueError):
    pass


def parse_config(doc: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(doc or {})
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            where = ".".join(str(p) for p in err["loc"])
            problems.append(f"{where}: {err['msg']}")
        raise ConfigError("invalid config: " + "; ".join(problems)) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(doc)
