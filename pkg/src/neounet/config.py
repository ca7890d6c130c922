"""Run configuration: one YAML file holding every knob of a run."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import yaml

from .data import AugmentationPolicy, BinaryMaskCodec, MaskCodec
from .exceptions import ConfigError
from .network import NetworkConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    train_dir: str = ""
    valid_dir: str = ""
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    augment: bool = True
    mask_format: str = "color"  # "binary" for black/white pretraining masks
    codec: MaskCodec = field(default_factory=MaskCodec)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationPolicy(**self.augmentation)
        if isinstance(self.codec, dict):
            self.codec = MaskCodec(**self.codec)
        if self.mask_format not in ("color", "binary"):
            raise ConfigError(f"mask_format must be 'color' or 'binary', got {self.mask_format!r}")

    def make_codec(self):
        return BinaryMaskCodec() if self.mask_format == "binary" else self.codec


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    pretrained: str | None = None  # ImageNet HarDNet weights for the encoder
    init_from: str | None = None  # NeoUNet checkpoint, e.g. from binary pretraining
    device: str = "cpu"
    workers: int = 0

    def __post_init__(self):
        for name, cls in (("train", TrainConfig), ("network", NetworkConfig), ("data", DataConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, _build(cls, value, name))

    @property
    def seed(self):
        return self.train.seed

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _build(cls, data, prefix):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigError(f"unknown config field(s): {', '.join(where + k for k in sorted(unknown))}")
    try:
        return cls(**data)
    except ConfigError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
