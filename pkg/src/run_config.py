"""Run configuration loaded from ``config/default.yaml`` (or ``$CSI_CONFIG``)."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.errors import ConfigInvalid
from src.framework import PRESETS, ArchitectureSpec, Knob, dropout_rate, load_spec, parse_knob
from src.harness import TrainConfig
from src.sigproc import PipelineConfig
from src.synthgen import SynthConfig

DEFAULT_CONFIG_PATH = Path("config") / "default.yaml"


class ArchitectureConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    preset: str = Field(default="activity", description="signfi | activity")
    filters: int = Field(default=32, ge=1)
    dropout: float = Field(default=0.8, ge=0.0, le=1.0, description="table dropout value")
    dropout_is_keep_prob: bool = False
    spec_file: Path | None = Field(default=None, description="explicit conv_/ap_/fc_ spec, overrides preset")

    def resolve(self, input_shape: tuple[int, int, int], num_classes: int) -> ArchitectureSpec:
        if self.spec_file is not None:
            return load_spec(self.spec_file)
        if self.preset not in PRESETS:
            raise ConfigInvalid(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
        rate = dropout_rate(self.dropout, self.dropout_is_keep_prob)
        if not 0.0 <= rate < 1.0:
            raise ConfigInvalid(f"dropout {self.dropout} gives drop probability {rate}")
        return PRESETS[self.preset](input_shape, num_classes, filters=self.filters, dropout=rate)


class CrossvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = Field(default=5, ge=2)
    workers: int = Field(default=1, ge=1)
    per_user: bool = False


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    crossval: CrossvalConfig = field(default_factory=CrossvalConfig)
    knobs: list[Knob] = field(default_factory=list)
    source: Path | None = None

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            synth=self.synth.model_copy(update={"seed": seed}),
            pipeline=self.pipeline,
            train=self.train.model_copy(update={"seed": seed}),
            architecture=self.architecture,
            crossval=self.crossval,
            knobs=list(self.knobs),
            source=self.source,
        )


def _section(data: dict[str, Any], name: str) -> dict[str, Any]:
    value = data.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigInvalid(f"config section {name!r} must be a mapping")
    return value


def _validated(model: type[BaseModel], data: dict[str, Any], name: str) -> Any:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigInvalid(f"invalid {name} config: {exc}") from exc


def load_run_config(path: Path) -> RunConfig:
    if not path.exists():
        return RunConfig()

    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if data is None:
        return RunConfig(source=path)
    if not isinstance(data, dict):
        raise ConfigInvalid("run config must be a mapping")

    architecture = _section(data, "architecture")
    spec_file = architecture.get("spec_file")
    if spec_file:
        # relative spec paths are taken from the config file's directory
        architecture = {**architecture, "spec_file": (path.parent / spec_file)}

    raw_knobs = _section(data, "ablation").get("knobs", [])
    if not isinstance(raw_knobs, list):
        raise ConfigInvalid("ablation.knobs must be a list")

    return RunConfig(
        synth=SynthConfig.from_mapping(_section(data, "synth")),
        pipeline=_validated(PipelineConfig, _section(data, "pipeline"), "pipeline"),
        train=TrainConfig.from_mapping(_section(data, "train")),
        architecture=_validated(ArchitectureConfig, architecture, "architecture"),
        crossval=_validated(CrossvalConfig, _section(data, "crossval"), "crossval"),
        knobs=[parse_knob(str(k)) for k in raw_knobs],
        source=path,
    )
