"""Run configuration: one YAML/JSON file plus command-line overrides.

Every field has a default, so an empty file (or no file) is a valid config
describing the standard synthetic desk-scale benchmark.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cascade import StageConfig
from .classifier import ArchError, ArchSpec, Hyper
from .synth import SynthSpec

__all__ = ["RunConfig", "ConfigError", "load_config", "apply_overrides", "describe_fields"]


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
        self.message = message


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="constants")


class SynthSection(_Strict):
    n_positive: int = Field(150, ge=0, description="synthetic nodule candidates")
    n_negative: int = Field(4500, ge=0, description="synthetic non-nodule candidates")
    volume_dims: tuple[int, int, int] = Field((128, 128, 20), description="volume size x, y, z in voxels")
    patch_size: int = Field(16, ge=2, description="in-plane size of one candidate cell")
    cell_depth: int = Field(5, ge=3, description="slices per candidate cell")
    spacing: tuple[float, float, float] = Field((0.75, 0.75, 1.25), description="voxel spacing in mm")
    background_hu: float = Field(-850.0, description="parenchyma intensity")
    noise_hu: float = Field(60.0, ge=0, description="Gaussian noise standard deviation")
    nodule_radius: tuple[float, float] = Field((1.8, 4.5), description="nodule radius range in voxels")
    nodule_hu: tuple[float, float] = Field((-150.0, 80.0), description="nodule intensity range")
    vessel_radius: tuple[float, float] = Field((0.8, 2.2), description="vessel radius range in voxels")
    vessel_hu: tuple[float, float] = Field((-250.0, 60.0), description="vessel intensity range")
    empty_fraction: float = Field(0.55, ge=0, le=1, description="share of non-nodules without a centred vessel")
    juxtavascular_fraction: float = Field(0.3, ge=0, le=1, description="share of nodules touching a vessel")
    center_jitter: float = Field(1.0, ge=0, description="max in-plane offset of the structure centre")

    def to_spec(self) -> SynthSpec:
        return SynthSpec(**self.model_dump())


class DatasetSection(_Strict):
    source: Literal["synthetic", "directory", "files"] = Field(
        "synthetic", description="synthetic: generate from `synth` and the seed; directory: load a "
                                 "`synth` output dir; files: volume_dir + candidates")
    path: Optional[str] = Field(None, description="dataset directory (source=directory)")
    volume_dir: Optional[str] = Field(None, description="directory of .mhd volumes (source=files)")
    candidates: Optional[str] = Field(None, description="candidate CSV (source=files)")
    synth: SynthSection = Field(default_factory=SynthSection)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "directory" and not self.path:
            raise ValueError("source=directory needs `path`")
        if self.source == "files" and not (self.volume_dir and self.candidates):
            raise ValueError("source=files needs `volume_dir` and `candidates`")
        return self


class StageSection(_Strict):
    ratio: float = Field(24.0, gt=0, description="declared nodule:non-nodule ratio of the training set")
    per_subset: Optional[int] = Field(None, ge=1, description="non-nodules kept per training fold "
                                                                 "(null: derived from ratio)")
    divisor: float = Field(10.0, gt=0, description="threshold = std(validation non-nodule scores) / divisor")

    def to_stage(self) -> StageConfig:
        return StageConfig(self.ratio, self.per_subset, self.divisor)


class ArchSection(_Strict):
    channels: tuple[int, ...] = Field((8, 16, 32), min_length=1, description="filters of each conv+pool block")
    hidden: int = Field(64, ge=1, description="units of the hidden dense layer")
    kernel_size: int = Field(3, ge=1, description="odd convolution kernel size")

    @field_validator("channels")
    @classmethod
    def _positive(cls, v):
        if any(c < 1 for c in v):
            raise ValueError("channel counts must be >= 1")
        return v

    @field_validator("kernel_size")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return v


class HyperSection(_Strict):
    learning_rate: float = Field(0.03, gt=0, description="SGD step size")
    momentum: float = Field(0.9, ge=0, lt=1, description="SGD momentum")
    batch_size: int = Field(32, ge=1, description="minibatch size")
    epochs: int = Field(30, ge=0, description="training epochs per model")
    tie_break: Literal["latest", "earliest"] = Field(
        "latest", description="epoch kept when the selection criterion ties")

    def to_hyper(self) -> Hyper:
        return Hyper(**self.model_dump())


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64, description="master seed; every sub-seed derives from it")
    k: int = Field(10, ge=3, description="cross-validation folds (one tests, one validates, k-2 train)")
    mode: Literal["cascade", "baseline"] = Field("cascade", description="pipeline run by `run`")
    patch_size: int = Field(16, ge=8, description="in-plane patch size fed to the network")
    slabs: int = Field(3, ge=1, description="axial slices per patch (channels)")
    bins: int = Field(50, ge=1, description="histogram bins in reports")
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    stages: tuple[StageSection, ...] = Field(
        (StageSection(), StageSection(), StageSection()), min_length=1,
        description="gating stages before the balanced final stage")
    arch: ArchSection = Field(default_factory=ArchSection)
    hyper: HyperSection = Field(default_factory=HyperSection)

    @model_validator(mode="after")
    def _arch_fits(self):
        try:
            self.arch_spec().validate()
        except ArchError as exc:
            raise ValueError(f"arch does not fit patch_size {self.patch_size}: {exc}") from None
        return self

    def arch_spec(self) -> ArchSpec:
        return ArchSpec.standard(self.patch_size, self.arch.channels, self.arch.hidden, self.slabs,
                                 kernel_size=self.arch.kernel_size)

    def stage_configs(self) -> list[StageConfig]:
        return [s.to_stage() for s in self.stages]


def _field_path(loc) -> str:
    return ".".join(str(p) for p in loc)


def _validate(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_field_path(err["loc"]), err["msg"]) from None


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a YAML or JSON config file (JSON is valid YAML); None gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"config {path} is not valid YAML/JSON: {exc}".replace("\n", " ")) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("", "config file must hold a mapping at top level")
    return _validate(data)


def apply_overrides(cfg: RunConfig, *, seed=None, mode=None, stages=None, ratio=None, k=None,
                    epochs=None) -> RunConfig:
    """Flag values win over file values.

    ``stages`` resizes the stage list (repeating the last stage or truncating);
    ``ratio`` is then applied to every stage.
    """
    data = json.loads(cfg.model_dump_json())
    if seed is not None:
        data["seed"] = seed
    if mode is not None:
        data["mode"] = mode
    if k is not None:
        data["k"] = k
    if epochs is not None:
        data["hyper"]["epochs"] = epochs
    if stages is not None:
        if stages < 1:
            raise ConfigError("stages", f"need at least 1 stage, got {stages}")
        current = data["stages"]
        data["stages"] = (current + [current[-1]] * stages)[:stages]
    if ratio is not None:
        data["stages"] = [{**s, "ratio": ratio} for s in data["stages"]]
    return _validate(data)


def describe_fields(model: type[BaseModel] = RunConfig, prefix: str = "") -> list[str]:
    """``path = default  description`` lines for every leaf field, for --help."""
    lines = []
    for name, info in model.model_fields.items():
        path = f"{prefix}{name}"
        ann = info.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            lines.extend(describe_fields(ann, path + "."))
            continue
        default = info.get_default(call_default_factory=True)
        if name == "stages":
            lines.append(f"  {path} = list of {len(default)} stages, each:")
            lines.extend(describe_fields(StageSection, f"{path}[i]."))
            continue
        shown = json.dumps(list(default) if isinstance(default, tuple) else default)
        lines.append(f"  {path} = {shown}  {info.description or ''}".rstrip())
    return lines
