"""Spatial and channel attention gates (CBAM-style) and their composition.

Both gates are sigmoid-squashed, so every gate value lies strictly in (0, 1)
and the gated output never exceeds the input in magnitude.
"""

import torch
import torch.nn as nn


def _check_rank4(x: torch.Tensor) -> None:
    if not isinstance(x, torch.Tensor) or x.dim() != 4:
        raise ValueError(f"expected a rank-4 (B, C, H, W) tensor, got {getattr(x, 'shape', type(x))}")


class SpatialAttention(nn.Module):
    """Gate each spatial location from pooled channel statistics.

    Channel-wise mean and max maps are concatenated, convolved with one
    kernel_size x kernel_size convolution and sigmoid-squashed into a
    single-channel gate broadcast over channels.
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=(kernel_size - 1) // 2, bias=False)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W) -> gate (B, 1, H, W)
        avg_out = torch.mean(x, dim=1, keepdim=True)
        max_out, _ = torch.max(x, dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg_out, max_out], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_rank4(x)
        return x * self.gate(x)


class ChannelAttention(nn.Module):
    """Gate each channel from globally pooled descriptors.

    Global average and max descriptors pass through a shared two-layer
    bottleneck; the two logit vectors are summed and sigmoid-squashed.
    The bottleneck width is channels // reduction_ratio (at least 1);
    reduction_ratio falls back to 4 for narrow inputs so the bottleneck
    stays nonempty.
    """

    def __init__(self, channels: int, reduction_ratio: int = 16):
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be positive, got {channels}")
        if channels < 16 and reduction_ratio == 16:
            reduction_ratio = 4
        hidden = max(channels // reduction_ratio, 1)
        self.channels = channels
        self.reduction_ratio = reduction_ratio
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden, bias=False),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels, bias=False),
        )

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W) -> gate (B, C, 1, 1)
        b, c = x.shape[:2]
        avg_out = self.mlp(torch.mean(x, dim=(2, 3)))
        max_out = self.mlp(torch.amax(x, dim=(2, 3)))
        return torch.sigmoid(avg_out + max_out).view(b, c, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_rank4(x)
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        return x * self.gate(x)


class SCAUnit(nn.Module):
    """Spatial attention followed by channel attention.

    Each instance carries its own parameters; units are never shared
    between call sites.
    """

    def __init__(self, channels: int, kernel_size: int = 7, reduction_ratio: int = 16):
        super().__init__()
        self.spatial = SpatialAttention(kernel_size)
        self.channel = ChannelAttention(channels, reduction_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.channel(self.spatial(x))
