"""Backbone and convolutional encoder.

The backbone is a small from-scratch ConvNet: five stride-2 stages, each a
3x3 conv + channel LayerNorm + GELU, so the feature map comes out at 1/32 of
the input with odd sizes rounding up.  The encoder keeps that resolution and
refines channels through three stages of large-kernel depthwise blocks, with
norm + 1x1 transitions between stages and a final 1x1 projection back to the
working width d.  There are no positional encodings anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, ShapeError, ops
from .nn import Module, ModuleList, Conv2d, ChannelNorm

BACKBONE_STRIDE = 32


@dataclass
class EncoderConfig:
    hidden_dim: int = 64
    backbone_channels: tuple = (12, 24, 48, 64, 96)
    stage_blocks: tuple = (1, 2, 1)
    stage_dims: tuple = (64, 96, 128)
    block_kernel: int = 7

    @classmethod
    def paper_scale(cls) -> "EncoderConfig":
        return cls(hidden_dim=256, backbone_channels=(64, 128, 256, 512, 512),
                   stage_blocks=(2, 6, 2), stage_dims=(120, 240, 480), block_kernel=7)

    def validate(self) -> None:
        if len(self.backbone_channels) != 5:
            raise ValueError(f"backbone needs 5 stages, got {len(self.backbone_channels)}")
        if len(self.stage_blocks) != 3 or len(self.stage_dims) != 3:
            raise ValueError("encoder needs exactly 3 stages")
        if self.block_kernel % 2 == 0:
            raise ValueError(f"block kernel must be odd, got {self.block_kernel}")


class Backbone(Module):
    """Five stride-2 conv stages; input [*,3,H,W] with H,W >= 32."""

    def __init__(self, channels, *, rng, dtype=np.float32):
        super().__init__()
        self.convs = ModuleList()
        self.norms = ModuleList()
        cin = 3
        for cout in channels:
            self.convs.append(Conv2d(cin, cout, 3, stride=2, padding=1, rng=rng, dtype=dtype))
            self.norms.append(ChannelNorm(cout, dtype=dtype))
            cin = cout
        self.out_channels = cin

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2], x.shape[-1]
        if h < BACKBONE_STRIDE or w < BACKBONE_STRIDE:
            raise ShapeError(f"backbone input {h}x{w} below minimum {BACKBONE_STRIDE}x{BACKBONE_STRIDE}")
        for conv, norm in zip(self.convs, self.norms):
            x = ops.gelu(norm(conv(x)))
        return x


class ConvNeXtBlock(Module):
    """Depthwise large-kernel conv -> channel LN -> 1x1 expand -> GELU -> 1x1, residual."""

    def __init__(self, channels: int, kernel: int, *, expansion: int = 4, rng, dtype=np.float32):
        super().__init__()
        self.dwconv = Conv2d(channels, channels, kernel, padding=(kernel - 1) // 2,
                             groups=channels, rng=rng, dtype=dtype)
        self.norm = ChannelNorm(channels, dtype=dtype)
        self.pw1 = Conv2d(channels, channels * expansion, 1, rng=rng, dtype=dtype)
        self.pw2 = Conv2d(channels * expansion, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.dwconv(x))
        y = self.pw2(ops.gelu(self.pw1(y)))
        return ops.add(x, y)


class Encoder(Module):
    """Three stages of blocks between channel transitions; spatial size is preserved."""

    def __init__(self, cfg: EncoderConfig, *, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.transition_norms = ModuleList()
        self.transition_convs = ModuleList()
        self.stages = ModuleList()
        prev = d
        for dim, nblocks in zip(cfg.stage_dims, cfg.stage_blocks):
            self.transition_norms.append(ChannelNorm(prev, dtype=dtype))
            self.transition_convs.append(Conv2d(prev, dim, 1, rng=rng, dtype=dtype))
            stage = ModuleList()
            for _ in range(nblocks):
                stage.append(ConvNeXtBlock(dim, cfg.block_kernel, rng=rng, dtype=dtype))
            self.stages.append(stage)
            prev = dim
        self.out_norm = ChannelNorm(prev, dtype=dtype)
        self.out_proj = Conv2d(prev, d, 1, rng=rng, dtype=dtype)

    @property
    def channel_trace(self):
        return [self.cfg.hidden_dim, *self.cfg.stage_dims, self.cfg.hidden_dim]

    def forward(self, z: Tensor) -> Tensor:
        for norm, conv, stage in zip(self.transition_norms, self.transition_convs, self.stages):
            z = conv(norm(z))
            for block in stage:
                z = block(z)
        return self.out_proj(self.out_norm(z))
