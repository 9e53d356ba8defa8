"""Geometric prior-guided skip refinement.

A GeometricPriorModule (GPM) takes one encoder skip feature map and a
depth-prior stream at half the skip resolution, and returns both streams
enhanced:

* Self-update: the depth stream is refined with one spatial+channel
  attention (SCA) unit, and later re-fused with texture detail taken from
  the enhanced features (downsampled, gated, projected back to the depth
  width).
* Cross-update: the skip features are refined by two SCA units in
  sequence, a geometry-aware embedding is built from the upsampled depth
  stream, and a row-stochastic token-to-token similarity map redistributes
  the embedding over spatial positions before a residual add.

A GeometricPriorChain wires one module per skip level (four levels) and
propagates the evolving depth stream between stages in either visiting
order, resampling and re-projecting at each handoff.
"""

from dataclasses import dataclass
from enum import Enum
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import SCAUnit, _check_rank4


class ChainOrder(str, Enum):
    """Direction in which the chain visits the four skip levels."""

    BOTTOM_TO_TOP = "bottom_to_top"  # deepest (lowest-resolution) skip first; default
    TOP_TO_BOTTOM = "top_to_bottom"  # shallowest skip first


class GeometricPriorModule(nn.Module):
    """One skip-level fusion block of feature and depth-prior streams.

    Args:
        feature_channels: channel width C of the skip features at this level.
        depth_channels: width of the depth stream; defaults to C // 2 so the
            stream supports channel attention and a C-length dot product.
        scale_factor: spatial ratio between skip and depth-stream resolution.
        similarity_scale: "channels" divides attention logits by sqrt(C),
            "tokens" by sqrt(T).
    """

    def __init__(
        self,
        feature_channels: int,
        depth_channels: int | None = None,
        scale_factor: int = 2,
        kernel_size: int = 7,
        reduction_ratio: int = 16,
        similarity_scale: str = "channels",
    ):
        super().__init__()
        if feature_channels < 2:
            raise ValueError(f"feature_channels must be >= 2, got {feature_channels}")
        if depth_channels is None:
            depth_channels = max(feature_channels // 2, 1)
        if depth_channels < 1:
            raise ValueError(f"depth_channels must be positive, got {depth_channels}")
        if similarity_scale not in ("channels", "tokens"):
            raise ValueError(f"similarity_scale must be 'channels' or 'tokens', got {similarity_scale!r}")
        self.feature_channels = feature_channels
        self.depth_channels = depth_channels
        self.scale_factor = scale_factor
        self.similarity_scale = similarity_scale

        sca = lambda ch: SCAUnit(ch, kernel_size=kernel_size, reduction_ratio=reduction_ratio)
        self.sca_feat1 = sca(feature_channels)   # cross-update refine, first unit
        self.sca_feat2 = sca(feature_channels)   # cross-update refine, second unit
        self.sca_geo = sca(depth_channels)       # geometry embedding
        self.sca_depth = sca(depth_channels)     # self-update depth refine
        self.sca_tex = sca(feature_channels)     # texture injection into depth
        # bias-free so a zero stream stays zero through either branch;
        # zero-started so each stage begins as pure self-refinement and the
        # cross-stream terms only grow once they pay off
        self.geo_proj = nn.Conv2d(depth_channels, feature_channels, 1, bias=False)
        self.tex_proj = nn.Conv2d(feature_channels, depth_channels, 1, bias=False)
        nn.init.zeros_(self.geo_proj.weight)
        nn.init.zeros_(self.tex_proj.weight)
        self.up = nn.Upsample(scale_factor=scale_factor, mode="bilinear", align_corners=False)
        self.down = nn.AvgPool2d(scale_factor)

    # -- self-update ------------------------------------------------------

    def refine_depth(self, d_o: torch.Tensor) -> torch.Tensor:
        """Attention-refined depth stream, shape preserved."""
        _check_rank4(d_o)
        if d_o.shape[1] != self.depth_channels:
            raise ValueError(f"depth stream has {d_o.shape[1]} channels, expected {self.depth_channels}")
        return self.sca_depth(d_o)

    def fuse_depth(self, d_refined: torch.Tensor, f_e: torch.Tensor) -> torch.Tensor:
        """Refined depth plus downsampled, gated, re-projected feature texture."""
        _check_rank4(d_refined)
        _check_rank4(f_e)
        tex = self.tex_proj(self.sca_tex(self.down(f_e)))
        if tex.shape != d_refined.shape:
            raise ValueError(
                f"downsampled features {tuple(tex.shape)} do not match depth stream {tuple(d_refined.shape)}"
            )
        return d_refined + tex

    # -- cross-update -----------------------------------------------------

    def refine_features(self, f_o: torch.Tensor) -> torch.Tensor:
        """Skip features refined by two distinct attention units in sequence."""
        _check_rank4(f_o)
        if f_o.shape[1] != self.feature_channels:
            raise ValueError(f"skip features have {f_o.shape[1]} channels, expected {self.feature_channels}")
        return self.sca_feat2(self.sca_feat1(f_o))

    def geometry_embedding(self, d_refined: torch.Tensor) -> torch.Tensor:
        """Upsample the refined depth, gate it, and project to feature width."""
        return self.geo_proj(self.sca_geo(self.up(d_refined)))

    def similarity_map(self, f_refined: torch.Tensor, g_embed: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, T, T) token similarity between the two streams."""
        _check_rank4(f_refined)
        if f_refined.shape != g_embed.shape:
            raise ValueError(
                f"feature/embedding shape mismatch: {tuple(f_refined.shape)} vs {tuple(g_embed.shape)}"
            )
        b, c, h, w = f_refined.shape
        f_tok = f_refined.flatten(2).transpose(1, 2)  # (B, T, C)
        g_tok = g_embed.flatten(2).transpose(1, 2)
        n = c if self.similarity_scale == "channels" else h * w
        logits = torch.bmm(f_tok, g_tok.transpose(1, 2)) / math.sqrt(n)
        return torch.softmax(logits, dim=-1)

    def enhance_features(
        self, f_refined: torch.Tensor, g_embed: torch.Tensor, c_map: torch.Tensor
    ) -> torch.Tensor:
        """Similarity-weighted embedding plus the refined-feature residual."""
        b, c, h, w = f_refined.shape
        t = h * w
        if c_map.shape != (b, t, t):
            raise ValueError(f"similarity map shape {tuple(c_map.shape)} does not match {t} tokens")
        g_tok = g_embed.flatten(2).transpose(1, 2)          # (B, T, C)
        attended = torch.bmm(c_map, g_tok)                  # (B, T, C)
        attended = attended.transpose(1, 2).reshape(b, c, h, w)
        return attended + f_refined

    # -- full block -------------------------------------------------------

    def forward(self, f_o: torch.Tensor, d_o: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_rank4(f_o)
        _check_rank4(d_o)
        s = self.scale_factor
        if f_o.shape[2] % s or f_o.shape[3] % s:
            raise ValueError(f"skip resolution {tuple(f_o.shape[2:])} not divisible by scale factor {s}")
        if (d_o.shape[2], d_o.shape[3]) != (f_o.shape[2] // s, f_o.shape[3] // s):
            raise ValueError(
                f"depth stream at {tuple(d_o.shape[2:])}, expected {(f_o.shape[2] // s, f_o.shape[3] // s)}"
            )
        d_refined = self.refine_depth(d_o)
        g_embed = self.geometry_embedding(d_refined)
        f_refined = self.refine_features(f_o)
        c_map = self.similarity_map(f_refined, g_embed)
        f_e = self.enhance_features(f_refined, g_embed, c_map)
        d_e = self.fuse_depth(d_refined, f_e)
        return f_e, d_e


@dataclass(frozen=True)
class StagePlan:
    """Channel layout of the four skip levels, shallow to deep.

    Resolutions follow from the input size at run time: skip k sits at
    input / 2^(k+1) and its depth stream at half that again.
    """

    feature_channels: tuple[int, int, int, int]
    depth_channels: tuple[int, int, int, int]
    ordering: ChainOrder = ChainOrder.BOTTOM_TO_TOP
    scale_factor: int = 2

    @classmethod
    def from_base_channels(cls, base_channels: int, ordering: ChainOrder = ChainOrder.BOTTOM_TO_TOP) -> "StagePlan":
        feat = tuple(base_channels * 2**k for k in range(4))
        depth = tuple(max(c // 2, 1) for c in feat)
        return cls(feat, depth, ordering)


class GeometricPriorChain(nn.Module):
    """Four fusion modules, one per skip level, sharing an evolving depth stream.

    The raw single-channel prior is resampled to the first visited stage's
    depth-stream resolution and lifted to that stage's depth width by a 1x1
    map. After each stage, the enhanced depth is resampled bilinearly to
    the next stage's depth resolution and re-projected to its width.
    """

    def __init__(self, plan: StagePlan, kernel_size: int = 7, reduction_ratio: int = 16,
                 similarity_scale: str = "channels"):
        super().__init__()
        if len(plan.feature_channels) != 4 or len(plan.depth_channels) != 4:
            raise ValueError("plan must describe exactly 4 skip levels")
        self.plan = plan
        self.stages = nn.ModuleList(
            GeometricPriorModule(
                fc, dc, scale_factor=plan.scale_factor, kernel_size=kernel_size,
                reduction_ratio=reduction_ratio, similarity_scale=similarity_scale,
            )
            for fc, dc in zip(plan.feature_channels, plan.depth_channels)
        )
        order = self.visit_order()
        self.lift = nn.Conv2d(1, plan.depth_channels[order[0]], 1, bias=False)
        self.handoff = nn.ModuleList(
            nn.Conv2d(plan.depth_channels[a], plan.depth_channels[b], 1, bias=False)
            for a, b in zip(order[:-1], order[1:])
        )

    def visit_order(self) -> list[int]:
        if self.plan.ordering == ChainOrder.BOTTOM_TO_TOP:
            return [3, 2, 1, 0]
        return [0, 1, 2, 3]

    def forward(self, skips: list[torch.Tensor], d0: torch.Tensor) -> list[torch.Tensor]:
        if len(skips) != 4:
            raise ValueError(f"expected 4 skip tensors, got {len(skips)}")
        _check_rank4(d0)
        if d0.shape[1] != 1:
            raise ValueError(f"initial depth prior must have 1 channel, got {d0.shape[1]}")
        s = self.plan.scale_factor
        order = self.visit_order()
        depth_sizes = {k: (skips[k].shape[2] // s, skips[k].shape[3] // s) for k in range(4)}

        d = self.lift(F.interpolate(d0, size=depth_sizes[order[0]], mode="bilinear", align_corners=False))
        enhanced: list[torch.Tensor | None] = [None] * 4
        for i, k in enumerate(order):
            f_e, d_e = self.stages[k](skips[k], d)
            enhanced[k] = f_e
            if i < 3:
                nxt = order[i + 1]
                d = self.handoff[i](
                    F.interpolate(d_e, size=depth_sizes[nxt], mode="bilinear", align_corners=False)
                )
        return enhanced
