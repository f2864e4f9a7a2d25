"""JSON engine configuration: dsp, augment, model, train and data sections."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .audio import DspConfig
from .augment import AugmentPolicy
from .data import get_schema
from .model import HRNetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    schema: str = "ravdess"
    n_frames_target: int = 300
    audio_root: str = ""  # base for relative manifest paths; empty = manifest's directory
    merge_calm: bool = False

    def __post_init__(self):
        if self.n_frames_target < 1:
            raise ValueError("n_frames_target must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def base_dir(self) -> Path:
        if self.audio_root:
            return Path(self.audio_root)
        return Path(self.manifest).resolve().parent


SECTIONS = {
    "dsp": DspConfig,
    "augment": AugmentPolicy,
    "model": HRNetConfig,
    "train": TrainConfig,
    "data": DataConfig,
}

# model fields that follow from other sections unless given explicitly
_DERIVED = ("in_mels", "in_frames", "n_classes")


@dataclass(frozen=True)
class EngineConfig:
    dsp: DspConfig = field(default_factory=DspConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    model: HRNetConfig = field(default_factory=HRNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section(name: str, raw) -> object:
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name!r} section: {e}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    raw = {k: dict(v) for k, v in raw.items()}
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        raw.setdefault(section, {})[key] = _parse_value(value)
    return raw


def from_dict(raw: dict, overrides=None) -> EngineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
    raw = apply_overrides(raw, overrides)

    dsp = _section("dsp", raw.get("dsp", {}))
    data = _section("data", raw.get("data", {}))
    try:
        schema = get_schema(data.schema)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    model_raw = dict(raw.get("model", {}))
    derived = {"in_mels": dsp.n_mels, "in_frames": data.n_frames_target, "n_classes": len(schema)}
    for key in _DERIVED:
        if key in model_raw and model_raw[key] != derived[key]:
            raise ConfigError(f"model.{key}={model_raw[key]} conflicts with the value {derived[key]} implied by dsp/data")
        model_raw[key] = derived[key]
    model = _section("model", model_raw)
    augment = _section("augment", raw.get("augment", {}))
    if augment.F > dsp.n_mels or augment.T > data.n_frames_target:
        raise ConfigError("augment.F / augment.T exceed the spectrogram size")
    if augment.max_shift >= data.n_frames_target:
        raise ConfigError("augment.max_shift must be smaller than n_frames_target")
    return EngineConfig(dsp, augment, model, _section("train", raw.get("train", {})), data)


def load(path=None, overrides=None) -> EngineConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    cfg = from_dict(raw, overrides)
    if path is not None and cfg.data.manifest and not Path(cfg.data.manifest).is_absolute():
        # relative manifest paths are relative to the config file
        cfg = dataclasses.replace(
            cfg, data=dataclasses.replace(cfg.data, manifest=str((Path(path).parent / cfg.data.manifest).resolve()))
        )
    return cfg
