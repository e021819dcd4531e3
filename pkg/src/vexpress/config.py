"""Run configuration: a single strict-schema JSON file shared by all commands.

Unknown keys are rejected so typos fail loudly. The resolved configuration is
hashed into every output sidecar; identical hash plus seed implies identical
artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .diffusion import LatentCodec, NoiseSchedule, make_schedule
from .errors import ConfigurationError
from .network import ModelConfig
from .training import DropoutConfig

ENV_CONFIG_VAR = "VEXPRESS_CONFIG"


@dataclass(frozen=True)
class StageSettings:
    steps: int = 1000
    batch_size: int = 4
    learning_rate: float | None = None  # None: use train.learning_rate


@dataclass(frozen=True)
class TrainSection:
    seed: int = 7
    learning_rate: float = 1e-4
    w_mouth: float = 100.0
    grad_clip_norm: float = 1.0
    checkpoint_every: int = 0
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    stage1: StageSettings = field(default_factory=lambda: StageSettings(2000, 8))
    stage2: StageSettings = field(default_factory=lambda: StageSettings(3000, 4))
    stage3: StageSettings = field(default_factory=lambda: StageSettings(1000, 4))

    def stage_settings(self, stage: int) -> StageSettings:
        return {1: self.stage1, 2: self.stage2, 3: self.stage3}[stage]


@dataclass(frozen=True)
class DiffusionSection:
    timesteps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    kind: str = "scaled_linear"
    ddim_steps: int = 20
    codec_mode: str = "identity"
    codec_downscale: int = 1


@dataclass(frozen=True)
class PipelineSection:
    segment_length: int = 12
    overlap: int = 4
    fps: float = 25.0
    rounding: str = "round"


@dataclass(frozen=True)
class DataSection:
    image_size: int = 64
    clip_frames: int = 12
    audio_stub_seed: int = 1234
    line_width: int = 2


@dataclass(frozen=True)
class PathsSection:
    dataset_dir: str = "data/train"
    eval_dataset_dir: str = "data/eval"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        d = self.diffusion
        if d.codec_mode == "identity":
            expect = 3 * d.codec_downscale**2
            if self.model.latent_channels != expect:
                raise ConfigurationError(
                    f"identity codec at downscale {d.codec_downscale} produces "
                    f"{expect} latent channels, model declares {self.model.latent_channels}"
                )
        if self.model.latent_downscale != d.codec_downscale:
            raise ConfigurationError(
                f"model latent_downscale {self.model.latent_downscale} != "
                f"codec downscale {d.codec_downscale}"
            )
        if self.data.image_size % max(1, d.codec_downscale):
            raise ConfigurationError("image_size must be divisible by codec downscale")
        if self.pipeline.overlap >= self.pipeline.segment_length:
            raise ConfigurationError("overlap must be smaller than segment_length")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def make_schedule(self) -> NoiseSchedule:
        d = self.diffusion
        return make_schedule(d.timesteps, d.beta_start, d.beta_end, d.kind)

    def make_codec(self) -> LatentCodec:
        d = self.diffusion
        if d.codec_mode != "identity":
            raise ConfigurationError(
                "only the identity codec is constructible from configuration; "
                "tiny_autoencoder requires a trained module"
            )
        return LatentCodec("identity", d.codec_downscale)


_SECTION_TYPES = {
    "model": ModelConfig,
    "train": TrainSection,
    "diffusion": DiffusionSection,
    "pipeline": PipelineSection,
    "data": DataSection,
    "paths": PathsSection,
}


# dataclass field types are strings under `from __future__ import annotations`;
# map nested-object fields explicitly
_NESTED_FIELDS = {
    (TrainSection, "dropout"): DropoutConfig,
    (TrainSection, "stage1"): StageSettings,
    (TrainSection, "stage2"): StageSettings,
    (TrainSection, "stage3"): StageSettings,
}


def _build_section(dc_type, data, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(dc_type)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED_FIELDS.get((dc_type, name))
        if nested is not None and isinstance(value, dict):
            kwargs[name] = _build_section(nested, value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load and validate a RunConfig from JSON.

    Falls back to the VEXPRESS_CONFIG environment variable, then to defaults
    when neither is given.
    """
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    if path is None:
        return RunConfig().validate()
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    unknown = set(doc) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")
    sections = {}
    for name, dc_type in _SECTION_TYPES.items():
        if name in doc:
            sections[name] = _build_section(dc_type, doc[name], name)
    return RunConfig(**sections).validate()
