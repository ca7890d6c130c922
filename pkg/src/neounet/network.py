"""NeoUNet: HarDNet encoder, attention-gated skips, deep-supervised decoder."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import EncoderConfig, HarDNetEncoder
from .exceptions import ConfigError


def upsample(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class AttentionGate(nn.Module):
    """Additive attention gate.

    ``alpha = sigmoid(psi(relu(W_x x + W_g g + b_g)) + b_psi)`` and the gate
    returns ``x * alpha``. The gating map ``g`` is bilinearly resampled to the
    spatial size of ``x`` first, so coefficients live at skip resolution.
    """

    def __init__(self, x_channels, g_channels, inter_channels=None):
        super().__init__()
        inter_channels = inter_channels or max(1, x_channels // 2)
        self.x_channels = x_channels
        self.g_channels = g_channels
        self.W_x = nn.Conv2d(x_channels, inter_channels, 1, bias=False)
        self.W_g = nn.Conv2d(g_channels, inter_channels, 1, bias=True)  # bias is b_g
        self.psi = nn.Conv2d(inter_channels, 1, 1, bias=True)  # bias is b_psi

    def coefficients(self, x, g):
        if x.shape[1] != self.x_channels or g.shape[1] != self.g_channels:
            raise ConfigError(
                f"attention gate expects ({self.x_channels}, {self.g_channels}) channels, "
                f"got ({x.shape[1]}, {g.shape[1]})"
            )
        if g.shape[-2:] != x.shape[-2:]:
            g = upsample(g, x.shape[-2:])
        q = self.psi(F.relu(self.W_x(x) + self.W_g(g)))
        return torch.sigmoid(q)

    def forward(self, x, g):
        return x * self.coefficients(x, g)


def attention_gate(x, g, gate: AttentionGate):
    return gate(x, g)


@dataclass
class DecoderBlockConfig:
    in_channels: int
    out_channels: int
    negative_slope: float = 0.01


class DecoderBlock(nn.Module):
    """Upsample ``prev`` x2, concatenate with the (gated) skip, then two
    conv/BN/LeakyReLU sets."""

    def __init__(self, config: DecoderBlockConfig):
        super().__init__()
        self.config = config
        layers = []
        in_ch = config.in_channels
        for _ in range(2):
            layers += [
                nn.Conv2d(in_ch, config.out_channels, 3, padding=1, bias=False),
                nn.BatchNorm2d(config.out_channels),
                nn.LeakyReLU(config.negative_slope, inplace=True),
            ]
            in_ch = config.out_channels
        self.body = nn.Sequential(*layers)

    def forward(self, prev, skip):
        prev = upsample(prev, (prev.shape[-2] * 2, prev.shape[-1] * 2))
        if prev.shape[-2:] != skip.shape[-2:]:
            raise RuntimeError(
                f"decoder size mismatch: upsampled {tuple(prev.shape[-2:])} vs "
                f"skip {tuple(skip.shape[-2:])}"
            )
        return self.body(torch.cat([prev, skip], dim=1))


def decoder_block(prev, gated_skip, block: DecoderBlock):
    return block(prev, gated_skip)


class OutputHead(nn.Module):
    """1x1 conv to two channels (non-neoplastic, neoplastic) and a sigmoid."""

    def __init__(self, in_channels, num_classes=2):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, num_classes, 1)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


def output_head(features, head: OutputHead):
    return head(features)


@dataclass
class NetworkConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32)
    negative_slope: float = 0.01
    num_classes: int = 2

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig.from_dict(self.encoder)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if len(self.decoder_channels) != 4:
            raise ConfigError("decoder_channels needs four widths (coarse to fine)")
        if self.num_classes not in (1, 2):
            raise ConfigError(f"num_classes must be 1 (binary pretraining) or 2, got {self.num_classes}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        return cls(**data)

    @classmethod
    def tiny(cls) -> "NetworkConfig":
        return cls(encoder=EncoderConfig.tiny(), decoder_channels=(32, 24, 16, 8))


class NeoUNet(nn.Module):
    """Returns four sigmoid heads, coarsest first (strides 16, 8, 4, 2).

    Skips at strides 16, 8 and 4 pass through attention gates whose gating
    signal is the previous decoder output (the stride-32 features for the first
    level). The stride-2 skip is concatenated ungated.
    """

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        self.encoder = HarDNetEncoder(config.encoder)
        enc = self.encoder.out_channels  # strides 2, 4, 8, 16, 32
        skips = enc[3::-1]  # strides 16, 8, 4, 2
        prev_channels = [enc[4], *config.decoder_channels[:-1]]
        self.gates = nn.ModuleList(
            AttentionGate(skips[i], prev_channels[i]) for i in range(3)
        )
        self.decoders = nn.ModuleList(
            DecoderBlock(DecoderBlockConfig(prev_channels[i] + skips[i],
                                            config.decoder_channels[i],
                                            config.negative_slope))
            for i in range(4)
        )
        self.heads = nn.ModuleList(
            OutputHead(c, config.num_classes) for c in config.decoder_channels
        )

    def forward(self, image):
        levels = self.encoder(image)
        skips = levels[3::-1]
        prev = levels[4]
        outputs = []
        for i, (decoder, head) in enumerate(zip(self.decoders, self.heads)):
            skip = self.gates[i](skips[i], prev) if i < len(self.gates) else skips[i]
            prev = decoder(prev, skip)
            outputs.append(head(prev))
        return outputs


def neounet_forward(image, model: NeoUNet):
    return model(image)


def infer_labels(head: torch.Tensor, threshold: float = 0.5, target_size=None) -> torch.Tensor:
    """Turn a two-channel probability map into labels {0, 1, 2}.

    A pixel is background when both channels fall below ``threshold``;
    otherwise it takes the larger channel, ties going to non-neoplastic (1).
    Accepts ``(2, H, W)`` or ``(N, 2, H, W)``. A single-channel (binary) map
    gives {0, 1}.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    squeeze = head.dim() == 3
    if squeeze:
        head = head.unsqueeze(0)
    if target_size is not None and tuple(head.shape[-2:]) != tuple(target_size):
        head = upsample(head, tuple(target_size))
    if head.shape[1] == 1:
        labels = (head[:, 0] >= threshold).to(torch.uint8)
        return labels[0] if squeeze else labels
    p_non, p_neo = head[:, 0], head[:, 1]
    foreground = (p_non >= threshold) | (p_neo >= threshold)
    labels = torch.where(p_non >= p_neo, 1, 2)
    labels = torch.where(foreground, labels, 0).to(torch.uint8)
    return labels[0] if squeeze else labels
