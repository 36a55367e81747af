"""Configurable 3D encoder-decoder segmentation network.

The same architecture serves as the multi-modal teacher and the mono-modal
student; they differ only in the number of input channels. The layout follows
the nnUNet family: per resolution level two conv(3x3x3) + instance-norm +
leaky-rectifier blocks, strided convolution for downsampling, transposed
convolution for upsampling, channel-concatenation skip connections, and a
1x1x1 head producing one logit channel per region. The deepest encoder
activation is exposed as the bottleneck.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn

from .errors import CheckpointError, ConfigError, ContractError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class NetworkConfig:
    """Structural hyperparameters shared by teacher and student."""

    in_channels: int
    out_regions: int = 3
    depth: int = 4
    base_filters: int = 16
    skip_connections: int = 4
    negative_slope: float = 0.01

    def __post_init__(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(
                f"in_channels must be >= 1, got {self.in_channels}"
            )
        if self.out_regions < 1:
            raise ConfigError(
                f"out_regions must be >= 1, got {self.out_regions}"
            )
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ConfigError(
                f"base_filters must be >= 1, got {self.base_filters}"
            )
        if self.skip_connections not in (0, self.depth):
            raise ConfigError(
                "skip_connections must be 0 or equal to depth "
                f"({self.depth}), got {self.skip_connections}"
            )
        if self.negative_slope < 0.0:
            raise ConfigError(
                f"negative_slope must be >= 0, got {self.negative_slope}"
            )


@dataclass
class ForwardResult:
    """Pre-activation region logits plus the deepest encoder activation."""

    logits: Tensor
    bottleneck: Tensor


class _ConvBlock(nn.Sequential):
    """conv(3x3x3) + instance norm + leaky rectifier.

    The conv carries no bias: instance normalization removes any per-channel
    constant, so a bias would never receive a gradient.
    """

    def __init__(
        self, in_ch: int, out_ch: int, negative_slope: float, stride: int = 1
    ) -> None:
        super().__init__(
            nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
            nn.InstanceNorm3d(out_ch, affine=True),
            nn.LeakyReLU(negative_slope),
        )


class SegmentationNetwork(nn.Module):
    """Encoder-decoder over 3D volumes, returning logits and bottleneck.

    Encoder level ``i`` works at spatial resolution ``1/2^i`` with
    ``base_filters * 2^i`` channels; the first block of every level below the
    top downsamples with stride 2. The decoder mirrors this with transposed
    convolutions, optionally concatenating the matching encoder feature.
    """

    def __init__(self, config: NetworkConfig, seed: int) -> None:
        super().__init__()
        self.config = config
        self.seed = seed
        f = [config.base_filters * 2 ** i for i in range(config.depth + 1)]
        slope = config.negative_slope

        # Encoder is registered before the decoder so the seeded parameter
        # stream yields identical encoder weights for both skip settings.
        stages = [
            nn.Sequential(
                _ConvBlock(config.in_channels, f[0], slope),
                _ConvBlock(f[0], f[0], slope),
            )
        ]
        for i in range(1, config.depth + 1):
            stages.append(
                nn.Sequential(
                    _ConvBlock(f[i - 1], f[i], slope, stride=2),
                    _ConvBlock(f[i], f[i], slope),
                )
            )
        self.encoder = nn.ModuleList(stages)

        use_skips = config.skip_connections == config.depth
        ups = []
        blocks = []
        for i in range(config.depth, 0, -1):
            ups.append(
                nn.ConvTranspose3d(f[i], f[i - 1], 2, stride=2, bias=False)
            )
            dec_in = 2 * f[i - 1] if use_skips else f[i - 1]
            blocks.append(
                nn.Sequential(
                    _ConvBlock(dec_in, f[i - 1], slope),
                    _ConvBlock(f[i - 1], f[i - 1], slope),
                )
            )
        self.upsamplers = nn.ModuleList(ups)
        self.decoder = nn.ModuleList(blocks)
        self.head = nn.Conv3d(f[0], config.out_regions, 1, bias=True)
        self.use_skips = use_skips
        self._init_parameters(seed)

    def _init_parameters(self, seed: int) -> None:
        """Seeded Kaiming-style init, drawn in module registration order."""
        gen = torch.Generator().manual_seed(seed)
        gain = (2.0 / (1.0 + self.config.negative_slope ** 2)) ** 0.5
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                    fan_in = m.weight.shape[1] * m.weight[0, 0].numel()
                    m.weight.normal_(0.0, gain / fan_in ** 0.5, generator=gen)
                    if m.bias is not None:
                        m.bias.zero_()
                elif isinstance(m, nn.InstanceNorm3d):
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    def forward(self, x: Tensor) -> ForwardResult:
        if x.dim() == 4:
            x = x.unsqueeze(0)
        if x.dim() != 5:
            raise ContractError(
                f"expected a (batch, C, D, H, W) or (C, D, H, W) tensor, "
                f"got {x.dim()} dims"
            )
        if x.shape[1] != self.config.in_channels:
            raise ContractError(
                f"expected {self.config.in_channels} input channels, "
                f"got {x.shape[1]}"
            )
        stride = 2 ** self.config.depth
        for d in x.shape[2:]:
            if d % stride != 0:
                raise ContractError(
                    f"spatial dims must be divisible by 2^depth={stride}, "
                    f"got {tuple(x.shape[2:])}"
                )

        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        bottleneck = feats[-1]

        x = bottleneck
        for i, (up, block) in enumerate(zip(self.upsamplers, self.decoder)):
            x = up(x)
            if self.use_skips:
                x = torch.cat([x, feats[-(i + 2)]], dim=1)
            x = block(x)
        return ForwardResult(logits=self.head(x), bottleneck=bottleneck)


def build_network(cfg: NetworkConfig, seed: int) -> SegmentationNetwork:
    """Construct a network with deterministic, seed-keyed parameters."""
    return SegmentationNetwork(cfg, seed)


def forward(net: SegmentationNetwork, x: Tensor) -> ForwardResult:
    """Functional alias for ``net(x)``."""
    return net(x)


def freeze(net: SegmentationNetwork) -> SegmentationNetwork:
    """Detach a network from training: no gradients, evaluation mode."""
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net


def parameter_checksum(net: SegmentationNetwork) -> float:
    """Order-stable scalar fingerprint of all parameters."""
    total = 0.0
    with torch.no_grad():
        for i, p in enumerate(net.parameters()):
            total += float((p.double() * (i + 1)).sum())
    return total


def save_checkpoint(net: SegmentationNetwork, path) -> None:
    """Serialize parameters together with the config and build seed."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(net.config),
        "seed": net.seed,
        "state_dict": {k: v.cpu() for k, v in net.state_dict().items()},
    }
    torch.save(payload, path)


def load_checkpoint(
    path, expected: NetworkConfig | None = None
) -> SegmentationNetwork:
    """Rebuild a network from a checkpoint file.

    When ``expected`` is given, every structural field must match the stored
    config; a 4-channel teacher cannot be loaded into a 1-channel slot.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}")
    for key in ("format_version", "config", "seed", "state_dict"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} missing field '{key}'")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {payload['format_version']}"
        )
    try:
        cfg = NetworkConfig(**payload["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid config in checkpoint {path}: {exc}")
    if expected is not None and cfg != expected:
        raise CheckpointError(
            f"checkpoint config {cfg} does not match expected {expected}"
        )
    net = SegmentationNetwork(cfg, payload["seed"])
    net.load_state_dict(payload["state_dict"])
    return net
