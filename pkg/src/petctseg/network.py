"""Configurable 3D residual encoder-decoder with a deepened stage layout.

Stage widths follow min(base_features * 2^s, max_features). Each residual
block is conv3x3x3 -> instance norm -> leaky relu -> conv3x3x3 -> instance
norm, added to the (projected) skip; zeroing the final conv therefore turns
the block into the identity map up to the norm's affine action. Downsampling
is a strided conv in the first block of each encoder stage; the decoder
upsamples by transposed conv and concatenates the matching encoder skip.

Checkpoint weight keys follow the module tree naming documented in the
README (encoder.<stage>.<block>..., decoder.<stage>..., heads.<level>...).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import torch
from torch import nn

from .errors import ConfigError, ShapeError

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 2
    num_encoder_stages: int = 7
    encoder_convs_per_stage: tuple[int, ...] = (1, 3, 4, 6, 6, 6, 6)
    decoder_convs_per_stage: tuple[int, ...] = (1, 1, 1, 1, 1, 1)
    base_features: int = 32
    max_features: int = 384
    patch_size: tuple[int, int, int] = (128, 256, 256)
    deep_supervision: bool = True
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_convs_per_stage", tuple(int(c) for c in self.encoder_convs_per_stage))
        object.__setattr__(self, "decoder_convs_per_stage", tuple(int(c) for c in self.decoder_convs_per_stage))
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if len(self.encoder_convs_per_stage) != self.num_encoder_stages:
            raise ConfigError(
                f"need {self.num_encoder_stages} encoder conv counts, got {self.encoder_convs_per_stage}"
            )
        if len(self.decoder_convs_per_stage) != self.num_encoder_stages - 1:
            raise ConfigError(
                f"need {self.num_encoder_stages - 1} decoder conv counts, got {self.decoder_convs_per_stage}"
            )
        if any(c < 1 for c in self.encoder_convs_per_stage + self.decoder_convs_per_stage):
            raise ConfigError("conv counts must be >= 1")
        if self.base_features < 1 or self.max_features < self.base_features:
            raise ConfigError("need 1 <= base_features <= max_features")
        divisor = 2 ** (self.num_encoder_stages - 1)
        if any(p % divisor for p in self.patch_size):
            raise ConfigError(
                f"every patch dimension must be divisible by {divisor}, got {self.patch_size}"
            )

    def features(self, stage: int) -> int:
        return min(self.base_features * 2**stage, self.max_features)

    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.features(s) for s in range(self.num_encoder_stages))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_convs_per_stage"] = list(self.encoder_convs_per_stage)
        d["decoder_convs_per_stage"] = list(self.decoder_convs_per_stage)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config fields {sorted(unknown)}")
        return cls(**d)


def full_config(deep_supervision: bool = True) -> NetworkConfig:
    """The full-scale configuration; expressible, but too large for desk runs."""
    return NetworkConfig(deep_supervision=deep_supervision)


def toy_config(
    patch_size: tuple[int, int, int] = (32, 32, 32), deep_supervision: bool = True
) -> NetworkConfig:
    """Small configuration used by tests and desk-scale experiments."""
    return NetworkConfig(
        num_encoder_stages=4,
        encoder_convs_per_stage=(1, 1, 1, 1),
        decoder_convs_per_stage=(1, 1, 1),
        base_features=8,
        max_features=32,
        patch_size=patch_size,
        deep_supervision=deep_supervision,
    )


@dataclass(frozen=True)
class StageRow:
    kind: str  # "encoder" or "decoder"
    index: int
    convs: int
    width: int
    spatial_shape: tuple[int, int, int]


def stage_report(config: NetworkConfig) -> list[StageRow]:
    """Per-stage table of (kind, index, conv count, width, spatial shape)."""
    rows = []
    for s in range(config.num_encoder_stages):
        shape = tuple(p // 2**s for p in config.patch_size)
        rows.append(
            StageRow("encoder", s, config.encoder_convs_per_stage[s], config.features(s), shape)
        )
    for d in range(config.num_encoder_stages - 1):
        level = config.num_encoder_stages - 2 - d  # resolution level this stage outputs
        shape = tuple(p // 2**level for p in config.patch_size)
        rows.append(
            StageRow("decoder", d, config.decoder_convs_per_stage[d], config.features(level), shape)
        )
    return rows


def format_stage_report(config: NetworkConfig) -> str:
    lines = [f"{'kind':<8} {'stage':>5} {'convs':>5} {'width':>5}  spatial"]
    for row in stage_report(config):
        shape = "x".join(str(s) for s in row.spatial_shape)
        lines.append(f"{row.kind:<8} {row.index:>5} {row.convs:>5} {row.width:>5}  {shape}")
    return "\n".join(lines)


class ResidualBlock(nn.Module):
    """conv-norm-act-conv-norm plus skip; strided first conv when downsampling."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.InstanceNorm3d(out_channels, affine=True)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = nn.InstanceNorm3d(out_channels, affine=True)
        if in_channels != out_channels or stride != 1:
            self.proj = nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False)
        else:
            self.proj = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm2(self.conv2(nn.functional.leaky_relu(self.norm1(self.conv1(x)), LEAKY_SLOPE)))
        skip = x if self.proj is None else self.proj(x)
        return y + skip


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, n_blocks: int, downsample: bool):
        super().__init__()
        blocks = [ResidualBlock(in_channels, out_channels, stride=2 if downsample else 1)]
        blocks.extend(ResidualBlock(out_channels, out_channels) for _ in range(n_blocks - 1))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, n_blocks: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2, bias=False)
        blocks = [ResidualBlock(out_channels + skip_channels, out_channels)]
        blocks.extend(ResidualBlock(out_channels, out_channels) for _ in range(n_blocks - 1))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x)
        if x.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"decoder output {tuple(x.shape[2:])} does not match skip {tuple(skip.shape[2:])}")
        return self.blocks(torch.cat([x, skip], dim=1))


class Network(nn.Module):
    """Residual U-Net; no operation mutates the module except weight updates."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = config.stage_widths()
        stages = []
        in_ch = config.input_channels
        for s in range(config.num_encoder_stages):
            stages.append(
                EncoderStage(in_ch, widths[s], config.encoder_convs_per_stage[s], downsample=s > 0)
            )
            in_ch = widths[s]
        self.encoder = nn.ModuleList(stages)

        decoders = []
        for d in range(config.num_encoder_stages - 1):
            level = config.num_encoder_stages - 2 - d
            decoders.append(
                DecoderStage(
                    in_channels=widths[level + 1],
                    skip_channels=widths[level],
                    out_channels=widths[level],
                    n_blocks=config.decoder_convs_per_stage[d],
                )
            )
        self.decoder = nn.ModuleList(decoders)

        # heads keyed by output resolution level; level 0 is the full-resolution head,
        # deep supervision adds heads at every decoder level except the two coarsest
        self.supervised_levels = self._supervised_levels(config)
        self.heads = nn.ModuleDict(
            {
                str(level): nn.Conv3d(widths[level], config.num_classes, 1, bias=True)
                for level in self.supervised_levels
            }
        )
        self.apply(init_weights)

    @staticmethod
    def _supervised_levels(config: NetworkConfig) -> tuple[int, ...]:
        if not config.deep_supervision:
            return (0,)
        decoder_levels = list(range(config.num_encoder_stages - 2, -1, -1))
        keep = [lv for lv in decoder_levels[2:] if lv != 0]
        return (0, *sorted(keep))

    def forward(self, x: torch.Tensor):
        if x.ndim != 5 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected input (N, {self.config.input_channels}, z, y, x), got {tuple(x.shape)}"
            )
        divisor = 2 ** (self.config.num_encoder_stages - 1)
        if any(s % divisor for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {divisor}")
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        outputs: dict[int, torch.Tensor] = {}
        for d, stage in enumerate(self.decoder):
            level = self.config.num_encoder_stages - 2 - d
            x = stage(x, skips[level])
            if level in self.heads_levels_set:
                outputs[level] = self.heads[str(level)](x)
        if self.config.deep_supervision and self.training:
            return [outputs[level] for level in sorted(outputs)]
        return outputs[0]

    @property
    def heads_levels_set(self) -> set[int]:
        return set(self.supervised_levels)


def init_weights(module: nn.Module) -> None:
    """Kaiming fan-in for convs, unit affine for norms, zero biases."""
    if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
        nn.init.kaiming_normal_(module.weight, a=LEAKY_SLOPE, mode="fan_in", nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.InstanceNorm3d) and module.affine:
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_network(config: NetworkConfig, seed: Optional[int] = None) -> Network:
    """Construct and initialize the network; seeding makes init reproducible."""
    if seed is not None:
        torch.manual_seed(int(seed))
    return Network(config)


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def supervision_weights(n_levels: int) -> list[float]:
    """Loss weights per supervised level, halved per coarser resolution, sum 1."""
    raw = [0.5**i for i in range(n_levels)]
    total = sum(raw)
    return [w / total for w in raw]
