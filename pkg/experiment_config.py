# experiment_config.py - JSON experiment configuration with strict validation

import json
import logging
import os
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from attacks import PGDConfig, ROAConfig
from datasets import SyntheticSpec, cifar_files, class_templates, default_cifar_dir
from defaults import (OUTPUT_DIR, PGD, ROA, SGD, SUBSTITUTE_BLOCKS, SUBSTITUTE_CLASSES, SYNTHETIC,
                      TARGET_BLOCKS, TARGET_CLASSES)
from error_handler import ConfigError
from networks import ConvBlockSpec, block_extents
from training import SGDConfig

logger = logging.getLogger(__name__)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticTaskConfig(StrictModel):
    num_samples: int = Field(SYNTHETIC["num_samples"], ge=8)
    image_size: int = Field(SYNTHETIC["image_size"], ge=4)
    num_classes: int = Field(SYNTHETIC["num_classes"], ge=2)
    margin: float = Field(SYNTHETIC["margin"], gt=0)
    noise: float = Field(SYNTHETIC["noise"], ge=0)
    blob_sigma: float = Field(SYNTHETIC["blob_sigma"], gt=0)
    test_fraction: float = Field(0.25, gt=0, lt=1)


class TaskConfig(StrictModel):
    kind: Literal["image-toy", "cifar-subset"] = "image-toy"
    cifar_dir: Optional[str] = None
    substitute_classes: List[int] = Field(default_factory=lambda: list(SUBSTITUTE_CLASSES))
    target_classes: List[int] = Field(default_factory=lambda: list(TARGET_CLASSES))
    max_train_per_task: Optional[int] = Field(None, ge=2)
    synthetic: SyntheticTaskConfig = Field(default_factory=SyntheticTaskConfig)

    @model_validator(mode="after")
    def check_classes(self):
        for name in ("substitute_classes", "target_classes"):
            classes = getattr(self, name)
            if len(classes) < 2 or len(set(classes)) != len(classes):
                raise ValueError(f"{name} needs at least two distinct classes")
            if any(not 0 <= c < 10 for c in classes):
                raise ValueError(f"{name} must name CIFAR-10 classes 0..9")
        if set(self.substitute_classes) & set(self.target_classes):
            raise ValueError("substitute and target classes must be disjoint")
        return self

    def resolved_cifar_dir(self) -> str:
        return self.cifar_dir or default_cifar_dir()

    def synthetic_spec(self, role: str) -> SyntheticSpec:
        """Substitute and target tasks use disjoint blob families"""
        s = self.synthetic
        return SyntheticSpec(num_samples=s.num_samples, image_size=s.image_size, num_classes=s.num_classes,
                             margin=s.margin, noise=s.noise, blob_sigma=s.blob_sigma,
                             class_offset=0 if role == "substitute" else s.num_classes)


class BlockConfig(StrictModel):
    out_channels: int = Field(ge=1)
    kernel_size: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    pool: bool = False


def _blocks(rows) -> List[BlockConfig]:
    return [BlockConfig(out_channels=c, kernel_size=k, stride=s, pool=p) for c, k, s, p in rows]


class ModelsConfig(StrictModel):
    target: List[BlockConfig] = Field(default_factory=lambda: _blocks(TARGET_BLOCKS), min_length=1)
    substitute: List[BlockConfig] = Field(default_factory=lambda: _blocks(SUBSTITUTE_BLOCKS), min_length=1)
    attack_mode: Literal["composite", "target_only"] = "composite"

    @model_validator(mode="after")
    def check_depths(self):
        if len(self.substitute) < len(self.target):
            raise ValueError("substitute needs at least as many blocks as the target")
        return self

    def target_specs(self) -> List[ConvBlockSpec]:
        return [ConvBlockSpec(**b.model_dump()) for b in self.target]

    def substitute_specs(self) -> List[ConvBlockSpec]:
        return [ConvBlockSpec(**b.model_dump()) for b in self.substitute]


class PGDSettings(StrictModel):
    epsilon: float = Field(PGD["epsilon"], ge=0, lt=1)
    t_max: int = Field(PGD["t_max"], ge=0)
    step_size: Optional[float] = Field(PGD["step_size"], ge=0)
    random_start: bool = PGD["random_start"]

    def build(self) -> PGDConfig:
        return PGDConfig(**self.model_dump())


class ROASettings(StrictModel):
    area_fraction: float = Field(ROA["area_fraction"], gt=0, le=1)
    search_stride: int = Field(ROA["search_stride"], ge=1)
    t_max: int = Field(ROA["t_max"], ge=0)
    step_size: float = Field(ROA["step_size"], ge=0)
    fill_value: float = Field(ROA["fill_value"], ge=0, le=1)

    def build(self) -> ROAConfig:
        inner = PGDConfig(epsilon=0.0, t_max=self.t_max, step_size=self.step_size, random_start=False)
        return ROAConfig(area_fraction=self.area_fraction, search_stride=self.search_stride,
                         inner_pgd=inner, fill_value=self.fill_value)


class AttacksConfig(StrictModel):
    pgd: PGDSettings = Field(default_factory=PGDSettings)
    roa: ROASettings = Field(default_factory=ROASettings)
    eval_samples: Optional[int] = Field(None, ge=1)
    eval_batch_size: int = Field(128, ge=2)
    preview_samples: int = Field(8, ge=1)


class SGDSettings(StrictModel):
    learning_rate: float = Field(SGD["learning_rate"], gt=0)
    momentum: float = Field(SGD["momentum"], ge=0, lt=1)
    epochs: int = Field(SGD["epochs"], ge=1)
    batch_size: int = Field(SGD["batch_size"], ge=2)
    weight_decay: float = Field(SGD["weight_decay"], ge=0)
    schedule: Literal["constant", "step"] = SGD["schedule"]
    step_epochs: int = Field(SGD["step_epochs"], ge=1)
    gamma: float = Field(SGD["gamma"], gt=0, le=1)

    def build(self, seed: int) -> SGDConfig:
        return SGDConfig(seed=seed, **self.model_dump())


class TrainingConfig(StrictModel):
    substitute: SGDSettings = Field(default_factory=SGDSettings)
    target: SGDSettings = Field(default_factory=SGDSettings)
    baseline: SGDSettings = Field(default_factory=SGDSettings)


class ExperimentConfig(StrictModel):
    name: str = "abnn"
    task: TaskConfig = Field(default_factory=TaskConfig)
    models: ModelsConfig = Field(default_factory=ModelsConfig)
    attacks: AttacksConfig = Field(default_factory=AttacksConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    seed: int = Field(0, ge=0)
    seeds: Optional[List[int]] = None
    output_dir: str = OUTPUT_DIR

    @model_validator(mode="after")
    def check_files(self):
        if self.attacks.pgd.t_max < 1:
            raise ValueError("attacks.pgd.t_max must be >= 1 (the PGD-AT baseline trains with it)")
        if self.task.kind == "cifar-subset":
            directory = self.task.resolved_cifar_dir()
            missing = [f for split in ("train", "test") for f in cifar_files(directory, split)
                       if not os.path.exists(f)]
            if missing:
                raise ValueError(f"CIFAR-10 files missing under {directory}: "
                                 + ", ".join(os.path.basename(f) for f in missing))
        return self

    @model_validator(mode="after")
    def check_geometry(self):
        size = self.input_size()
        for role, specs in (("target", self.models.target_specs()), ("substitute", self.models.substitute_specs())):
            try:
                block_extents(specs, size)
            except ConfigError as e:
                raise ValueError(f"models.{role} does not fit a {size}x{size} input: {e.message}")
        if self.task.kind == "image-toy":
            for role in ("substitute", "target"):
                try:
                    class_templates(self.task.synthetic_spec(role))
                except ConfigError as e:
                    raise ValueError(f"task.synthetic ({role} task): {e.message} ({e.details})")
        return self

    def input_size(self) -> int:
        return 32 if self.task.kind == "cifar-subset" else self.task.synthetic.image_size


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def parse_experiment_config(data, source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config {source}", details=_format_validation_error(e),
                          user_action="Fix the listed fields; unknown keys are rejected.")


def load_experiment_config(path: str) -> ExperimentConfig:
    """Read and fully validate a JSON config before any compute"""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON",
                          details=f"line {e.lineno}, column {e.colno}: {e.msg}")
    config = parse_experiment_config(data, source=path)
    logger.info("✓ config loaded: %s (task %s, seed %d)", path, config.task.kind, config.seed)
    return config
