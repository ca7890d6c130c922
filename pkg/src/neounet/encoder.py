"""HarDNet-style encoder built from Harmonic Dense Blocks.

Layer ``k`` of a block reads from every layer ``k - 2**n`` where ``2**n``
divides ``k``; layers at indices divisible by large powers of two get wider
outputs (``growth_rate * compression**n``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
from torch import nn

from .exceptions import ConfigError, InputShapeError


def _two_adic_order(value: int) -> int:
    """Largest ``n`` with ``2**n`` dividing ``value``."""
    n = 0
    while value % 2 == 0:
        value //= 2
        n += 1
    return n


def hdb_links(layer_index: int) -> list[int]:
    """Indices of the layers feeding ``layer_index`` (0 is the block input).

    Ordered nearest first, e.g. ``hdb_links(8) == [7, 6, 4, 0]``.
    """
    if int(layer_index) != layer_index or layer_index < 1:
        raise ValueError(f"layer_index must be a positive integer, got {layer_index!r}")
    links = []
    step = 1
    while step <= layer_index:
        if layer_index % step == 0:
            links.append(layer_index - step)
        step *= 2
    return links


def hdb_out_channels(layer_index: int, growth_rate: int, compression: float,
                     rounding: str = "floor_even") -> int:
    """Output width of layer ``layer_index`` in a harmonic block.

    ``rounding="floor_even"`` rounds ``k * m**n`` down to an even integer and
    never goes below ``growth_rate``. ``rounding="reference"`` reproduces the
    public HarDNet code (``int(int(x + 1) / 2) * 2``), which is what pretrained
    checkpoints were built with.
    """
    if int(layer_index) != layer_index or layer_index < 1:
        raise ValueError(f"layer_index must be a positive integer, got {layer_index!r}")
    if growth_rate < 1:
        raise ValueError(f"growth_rate must be >= 1, got {growth_rate!r}")
    if compression <= 0:
        raise ValueError(f"compression must be > 0, got {compression!r}")
    width = growth_rate * compression ** _two_adic_order(int(layer_index))
    if rounding == "floor_even":
        return max(growth_rate, int(width // 2) * 2)
    if rounding == "reference":
        return int(int(width + 1) / 2) * 2
    raise ValueError(f"unknown rounding mode {rounding!r}")


@dataclass
class HDBConfig:
    num_layers: int
    growth_rate: int
    compression: float = 1.7
    input_channels: int = 64
    rounding: str = "floor_even"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.growth_rate < 1:
            raise ConfigError(f"growth_rate must be >= 1, got {self.growth_rate}")
        if self.compression <= 1:
            raise ConfigError(f"compression must be > 1, got {self.compression}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")

    def layer_channels(self) -> list[int]:
        """Channel count of every node, index 0 being the block input."""
        return [self.input_channels] + [
            hdb_out_channels(layer, self.growth_rate, self.compression, self.rounding)
            for layer in range(1, self.num_layers + 1)
        ]

    def output_layers(self) -> list[int]:
        """Layers concatenated into the block output: odd layers plus the last."""
        last = self.num_layers
        return [layer for layer in range(1, last + 1) if layer % 2 == 1 or layer == last]

    @property
    def out_channels(self) -> int:
        channels = self.layer_channels()
        return sum(channels[layer] for layer in self.output_layers())


class ConvLayer(nn.Sequential):
    """Conv -> BatchNorm -> ReLU6, as in the reference HarDNet."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride,
                      padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU6(inplace=True),
        )


class HarmonicDenseBlock(nn.Module):
    def __init__(self, config: HDBConfig):
        super().__init__()
        self.config = config
        channels = config.layer_channels()
        self.links = [hdb_links(layer) for layer in range(1, config.num_layers + 1)]
        self.layers = nn.ModuleList(
            ConvLayer(sum(channels[i] for i in links), channels[layer])
            for layer, links in zip(range(1, config.num_layers + 1), self.links)
        )
        self.out_layers = config.output_layers()
        self.out_channels = config.out_channels

    def forward(self, x):
        if x.shape[1] != self.config.input_channels:
            raise ConfigError(
                f"block expects {self.config.input_channels} input channels, got {x.shape[1]}"
            )
        outputs = [x]
        for links, layer in zip(self.links, self.layers):
            inputs = [outputs[i] for i in links]
            outputs.append(layer(torch.cat(inputs, dim=1) if len(inputs) > 1 else inputs[0]))
        return torch.cat([outputs[i] for i in self.out_layers], dim=1)


def hdb_forward(x: torch.Tensor, block: HarmonicDenseBlock) -> torch.Tensor:
    return block(x)


@dataclass
class StageConfig:
    """One encoder stage: a harmonic block, a 1x1 transition conv, and an
    optional max-pool afterwards."""

    num_layers: int
    growth_rate: int
    out_channels: int
    downsample_after: bool


# Canonical HarDNet68 table. Stage outputs land at strides 4, 8, 8, 16, 32; the
# stem provides stride 2 and the second stride-8 stage is folded into level 3.
HARDNET68_STAGES = [
    StageConfig(8, 14, 128, True),
    StageConfig(16, 16, 256, False),
    StageConfig(16, 20, 320, True),
    StageConfig(16, 40, 640, True),
    StageConfig(4, 160, 1024, False),
]


@dataclass
class EncoderConfig:
    stem_channels: tuple[int, int] = (32, 64)
    stages: list[StageConfig] = field(default_factory=lambda: list(HARDNET68_STAGES))
    compression: float = 1.7
    rounding: str = "floor_even"
    downsample_kind: str = "max_pool"

    def __post_init__(self):
        self.stem_channels = tuple(int(c) for c in self.stem_channels)
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if len(self.stem_channels) != 2:
            raise ConfigError("stem_channels needs exactly two widths")
        if self.downsample_kind != "max_pool":
            raise ConfigError(f"unsupported downsample_kind {self.downsample_kind!r}")
        if self.compression <= 1:
            raise ConfigError(f"compression must be > 1, got {self.compression}")
        # stride 2 comes from the stem; stages must add exactly four more halvings
        n_down = 1 + sum(s.downsample_after for s in self.stages[:-1])
        if n_down != 4 or self.stages[-1].downsample_after:
            raise ConfigError(
                "stage table must downsample exactly four times (stem pool + stages) "
                "and not after the last stage"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)

    @classmethod
    def hardnet68(cls, **overrides) -> "EncoderConfig":
        return cls(**overrides)

    @classmethod
    def from_file(cls, path) -> "EncoderConfig":
        import yaml

        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    @classmethod
    def tiny(cls) -> "EncoderConfig":
        """Narrow variant used for fast tests; same topology as HarDNet68."""
        return cls(
            stem_channels=(8, 16),
            stages=[
                StageConfig(4, 6, 24, True),
                StageConfig(4, 8, 32, False),
                StageConfig(4, 8, 48, True),
                StageConfig(4, 12, 64, True),
                StageConfig(2, 16, 96, False),
            ],
        )

    def block_configs(self) -> list[HDBConfig]:
        configs = []
        channels = self.stem_channels[1]
        for stage in self.stages:
            configs.append(HDBConfig(stage.num_layers, stage.growth_rate, self.compression,
                                     channels, self.rounding))
            channels = stage.out_channels
        return configs

    def level_channels(self) -> list[int]:
        """Channels of the five pyramid levels (strides 2..32)."""
        levels = [self.stem_channels[1]]
        for i, stage in enumerate(self.stages):
            last_at_stride = stage.downsample_after or i == len(self.stages) - 1
            if last_at_stride:
                levels.append(stage.out_channels)
        return levels


class HarDNetEncoder(nn.Module):
    """Five-level feature pyramid at strides 2, 4, 8, 16, 32."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        c1, c2 = config.stem_channels
        self.stem = nn.Sequential(ConvLayer(3, c1, 3, stride=2), ConvLayer(c1, c2, 3))
        self.stem_pool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for block_cfg, stage in zip(config.block_configs(), config.stages):
            block = HarmonicDenseBlock(block_cfg)
            self.blocks.append(block)
            self.transitions.append(ConvLayer(block.out_channels, stage.out_channels, 1))
        self.out_channels = config.level_channels()

    def forward(self, x):
        height, width = x.shape[-2:]
        for name, size in (("height", height), ("width", width)):
            if size % 32:
                raise InputShapeError(f"input {name} {size} is not divisible by 32")
        x = self.stem(x)
        levels = [x]
        x = self.stem_pool(x)
        n = len(self.blocks)
        for i, (block, transition) in enumerate(zip(self.blocks, self.transitions)):
            x = transition(block(x))
            stage = self.config.stages[i]
            if stage.downsample_after or i == n - 1:
                levels.append(x)
            if stage.downsample_after:
                x = self.pool(x)
        return levels


def encoder_forward(image: torch.Tensor, encoder: HarDNetEncoder) -> list[torch.Tensor]:
    return encoder(image)


def load_pretrained(encoder: HarDNetEncoder, path, name_map: dict | None = None) -> list[str]:
    """Copy weights from a reference HarDNet state dict (``.pth`` or ``.npz``).

    ``name_map`` maps reference parameter names to ours; when omitted, the
    reference ``base.<i>`` layout is translated with :func:`reference_name_map`.
    Returns the list of our parameter names that were not filled.
    """
    path = Path(path)
    if path.suffix == ".npz":
        import numpy as np

        with np.load(path) as archive:
            source = {k: torch.from_numpy(archive[k]) for k in archive.files}
    else:
        source = torch.load(path, map_location="cpu", weights_only=True)
        source = source.get("state_dict", source)
    name_map = name_map or reference_name_map(encoder)
    own = encoder.state_dict()
    loaded = set()
    for ref_name, tensor in source.items():
        ours = name_map.get(ref_name)
        if ours is None or ours not in own:
            continue
        if own[ours].shape != tensor.shape:
            raise ConfigError(
                f"shape mismatch for {ref_name} -> {ours}: {tuple(tensor.shape)} vs "
                f"{tuple(own[ours].shape)}; use rounding='reference' for pretrained weights"
            )
        own[ours] = tensor
        loaded.add(ours)
    encoder.load_state_dict(own)
    return sorted(set(own) - loaded)


def reference_name_map(encoder: HarDNetEncoder) -> dict[str, str]:
    """Name mapping from the public HarDNet68 ``base`` sequential layout.

    Reference order: base.0 stem conv, base.1 stem conv, base.2 max-pool, then
    per stage [block, transition, (pool)].
    """
    mapping = {}
    suffixes = ["0.weight", "1.weight", "1.bias", "1.running_mean", "1.running_var",
                "1.num_batches_tracked"]

    def conv(ref_prefix, our_prefix):
        ref_suffixes = ["conv.weight", "norm.weight", "norm.bias", "norm.running_mean",
                        "norm.running_var", "norm.num_batches_tracked"]
        for rs, os_ in zip(ref_suffixes, suffixes):
            mapping[f"{ref_prefix}.{rs}"] = f"{our_prefix}.{os_}"

    conv("base.0", "stem.0")
    conv("base.1", "stem.1")
    idx = 3
    for i, stage in enumerate(encoder.config.stages):
        for j in range(stage.num_layers):
            conv(f"base.{idx}.layers.{j}", f"blocks.{i}.layers.{j}")
        conv(f"base.{idx + 1}", f"transitions.{i}")
        idx += 3 if stage.downsample_after else 2
    return mapping
