"""Reference 4-level U-Net with skip taps and optional depth-prior refinement.

The encoder downsamples first, so for a 256x256 input with base width 64
the four skips sit at 128/64/32/16 pixels with 64/128/256/512 channels and
the bottleneck stays at the deepest skip resolution. Any backbone exposing
the same encode -> 4 skips + bottleneck -> decode contract can host the
refinement chain in its place.
"""

import torch
import torch.nn as nn

from .attention import _check_rank4
from .gpm import ChainOrder, GeometricPriorChain, StagePlan

DEPTH_LEVELS = 4
INIT_SCHEME = "kaiming_normal_fan_out+batchnorm_unit"


class DoubleConv(nn.Module):
    """Two 3x3 conv + BN + ReLU blocks, the standard U-Net unit."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class UNet(nn.Module):
    """Encoder-decoder segmentation network with optional skip refinement.

    Args:
        base_channels: width of the shallowest skip; stage k has
            base_channels * 2^k channels.
        gpm: optional GeometricPriorChain; when set, forward() requires a
            depth prior and routes the skips through the chain before
            decoding. The chain never alters backbone layer shapes.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 64, out_classes: int = 1,
                 gpm: GeometricPriorChain | None = None):
        super().__init__()
        b = base_channels
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.out_classes = out_classes

        self.pool = nn.MaxPool2d(2)
        self.enc = nn.ModuleList([
            DoubleConv(in_channels, b),
            DoubleConv(b, 2 * b),
            DoubleConv(2 * b, 4 * b),
            DoubleConv(4 * b, 8 * b),
        ])
        self.bottleneck = DoubleConv(8 * b, 16 * b)

        self.fuse3 = DoubleConv(16 * b + 8 * b, 8 * b)
        self.up2 = nn.ConvTranspose2d(8 * b, 4 * b, 2, stride=2)
        self.fuse2 = DoubleConv(4 * b + 4 * b, 4 * b)
        self.up1 = nn.ConvTranspose2d(4 * b, 2 * b, 2, stride=2)
        self.fuse1 = DoubleConv(2 * b + 2 * b, 2 * b)
        self.up0 = nn.ConvTranspose2d(2 * b, b, 2, stride=2)
        self.fuse0 = DoubleConv(b + b, b)
        self.head_up = nn.ConvTranspose2d(b, b, 2, stride=2)
        self.head = DoubleConv(b, b)
        self.out_conv = nn.Conv2d(b, out_classes, 1)

        self._init_weights()
        # start the head near the background base rate so early BCE gradients
        # on mostly-background masks cannot bury the overlap term
        nn.init.constant_(self.out_conv.bias, -2.0)
        self.gpm = gpm
        self.bypass_gpm = False

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def encode(self, image: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Return the four skip tensors (shallow to deep) and the bottleneck."""
        _check_rank4(image)
        if image.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {image.shape[1]}")
        h, w = image.shape[2:]
        if h % 16 or w % 16:
            raise ValueError(f"input resolution {h}x{w} must be divisible by 16")
        skips = []
        x = image
        for block in self.enc:
            x = block(self.pool(x))
            skips.append(x)
        return skips, self.bottleneck(skips[-1])

    def decode(self, skips: list[torch.Tensor], bottleneck: torch.Tensor) -> torch.Tensor:
        """Fuse skips back up to a single-channel logit map at input resolution."""
        if len(skips) != DEPTH_LEVELS:
            raise ValueError(f"expected {DEPTH_LEVELS} skip tensors, got {len(skips)}")
        x = self.fuse3(torch.cat([bottleneck, skips[3]], dim=1))
        x = self.fuse2(torch.cat([self.up2(x), skips[2]], dim=1))
        x = self.fuse1(torch.cat([self.up1(x), skips[1]], dim=1))
        x = self.fuse0(torch.cat([self.up0(x), skips[0]], dim=1))
        return self.out_conv(self.head(self.head_up(x)))

    def forward(self, image: torch.Tensor, depth: torch.Tensor | None = None) -> torch.Tensor:
        skips, bottleneck = self.encode(image)
        if self.gpm is not None and not self.bypass_gpm:
            if depth is None:
                raise ValueError("this model carries a refinement chain and requires a depth prior")
            skips = self.gpm(skips, depth)
        return self.decode(skips, bottleneck)

    def backbone_shape_manifest(self) -> dict[str, tuple[int, ...]]:
        """Shapes of all encoder/decoder parameters (the chain excluded)."""
        return {
            name: tuple(p.shape)
            for name, p in self.named_parameters()
            if not name.startswith("gpm.")
        }


def build_model(
    base_channels: int = 64,
    with_gpm: bool = False,
    ordering: ChainOrder | str = ChainOrder.BOTTOM_TO_TOP,
    in_channels: int = 3,
    out_classes: int = 1,
    similarity_scale: str = "channels",
) -> UNet:
    chain = None
    if with_gpm:
        plan = StagePlan.from_base_channels(base_channels, ChainOrder(ordering))
        chain = GeometricPriorChain(plan, similarity_scale=similarity_scale)
    return UNet(in_channels, base_channels, out_classes, gpm=chain)


def model_config(model: UNet) -> dict:
    """JSON-compatible description sufficient to rebuild the model."""
    cfg = {
        "in_channels": model.in_channels,
        "base_channels": model.base_channels,
        "out_classes": model.out_classes,
        "with_gpm": model.gpm is not None,
        "init": INIT_SCHEME,
    }
    if model.gpm is not None:
        cfg["ordering"] = model.gpm.plan.ordering.value
        cfg["similarity_scale"] = model.gpm.stages[0].similarity_scale
    return cfg


def model_from_config(cfg: dict) -> UNet:
    return build_model(
        base_channels=cfg["base_channels"],
        with_gpm=cfg.get("with_gpm", False),
        ordering=cfg.get("ordering", ChainOrder.BOTTOM_TO_TOP),
        in_channels=cfg.get("in_channels", 3),
        out_classes=cfg.get("out_classes", 1),
        similarity_scale=cfg.get("similarity_scale", "channels"),
    )
