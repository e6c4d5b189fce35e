"""Convolutional decoder: query grid, self- and cross-interaction, head.

Object queries live on a small 2-D grid [d, h_q, w_q] and stay convolutional
end to end.  Each decoder layer first mixes queries among themselves with a
large-kernel depthwise block (SIM), then exchanges information with the
encoder features (CIM): queries are upsampled to the feature resolution,
fused, mixed depthwise, passed through a pointwise FFN and adaptively
max-pooled back onto the query grid.  Because the interchange happens at the
feature map's own resolution, any input size is handled without positional
encodings or masking.

Slot order is row-major over the grid and stable across layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Parameter, Tensor, ShapeError, ops
from .nn import Module, ModuleList, Conv2d, ChannelNorm, Linear
from .encoder import ConvNeXtBlock

FUSION_MODES = ("add", "multiply", "concat_conv")
UPSAMPLE_MODES = ("bilinear", "nearest")


@dataclass
class DetectionSet:
    """Exactly N predictions for one image: logits over K+1 classes, cxcywh boxes."""

    class_logits: Tensor  # [N, K+1]
    boxes: Tensor         # [N, 4], sigmoid-normalized cxcywh

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[0]


@dataclass
class DecoderOutput:
    per_layer: list  # of DetectionSet, final layer last

    @property
    def final(self) -> DetectionSet:
        return self.per_layer[-1]


def init_queries(num_queries: int, grid_w: int, grid_h: int, dim: int, rng,
                 dtype=np.float32) -> Parameter:
    """Query grid Parameter [d, h, w]; the grid must factor the query count exactly."""
    if grid_w * grid_h != num_queries:
        raise ShapeError(f"query grid {grid_w}x{grid_h} does not factor {num_queries} queries")
    # unit-scale init: slots must start distinguishable or they never specialize
    data = rng.normal(0.0, 1.0, size=(dim, grid_h, grid_w)).astype(dtype)
    return Parameter(data, init_spec="normal(1.0)", dtype=dtype)


def grid_to_rows(q: Tensor) -> Tensor:
    """[B,d,h,w] -> [B,N,d] (or [d,h,w] -> [N,d]), slots in row-major grid order."""
    if q.ndim == 4:
        b, d, h, w = q.shape
        return ops.transpose(ops.reshape(q, (b, d, h * w)), (0, 2, 1))
    d, h, w = q.shape
    return ops.transpose(ops.reshape(q, (d, h * w)), (1, 0))


class SelfInteraction(Module):
    """Query-grid mixing: one or more large-kernel depthwise blocks."""

    def __init__(self, dim: int, kernel: int, blocks: int, *, rng, dtype=np.float32):
        super().__init__()
        self.blocks = ModuleList(ConvNeXtBlock(dim, kernel, rng=rng, dtype=dtype)
                                 for _ in range(blocks))

    def forward(self, q: Tensor) -> Tensor:
        for block in self.blocks:
            q = block(q)
        return q


class CrossInteraction(Module):
    """Query/feature interchange at feature resolution.

    upsample -> fuse -> depthwise mix (residual) -> FFN (residual) -> pool:
        up    = resize(q, feature size)
        mixed = up + dwconv(fuse(up, feats))
        out   = adaptive_max_pool(mixed + ffn(mixed), query grid size)

    ``fixed_size`` switches the interchange to a constant internal resolution
    (both operands resized to it) instead of tracking the feature map.
    """

    def __init__(self, dim: int, kernel: int, *, fusion: str = "add",
                 upsample: str = "bilinear", fixed_size=None, expansion: int = 4,
                 rng, dtype=np.float32):
        super().__init__()
        if fusion not in FUSION_MODES:
            raise ValueError(f"fusion mode '{fusion}' not in {FUSION_MODES}")
        if upsample not in UPSAMPLE_MODES:
            raise ValueError(f"upsample mode '{upsample}' not in {UPSAMPLE_MODES}")
        self.fusion = fusion
        self.upsample = upsample
        self.fixed_size = tuple(fixed_size) if fixed_size else None
        self.dwconv = Conv2d(dim, dim, kernel, padding=(kernel - 1) // 2, groups=dim,
                             rng=rng, dtype=dtype)
        if fusion == "concat_conv":
            self.fuse_proj = Conv2d(2 * dim, dim, 1, rng=rng, dtype=dtype)
        self.ffn1 = Conv2d(dim, dim * expansion, 1, rng=rng, dtype=dtype)
        self.ffn2 = Conv2d(dim * expansion, dim, 1, rng=rng, dtype=dtype)
        self.last_internal_hw = None

    def forward(self, q: Tensor, feats: Tensor) -> Tensor:
        gh, gw = q.shape[-2], q.shape[-1]
        if q.shape[-3] != feats.shape[-3]:
            raise ShapeError(f"query channels {q.shape[-3]} != feature channels {feats.shape[-3]}")
        if self.fixed_size is not None:
            ih, iw = self.fixed_size
            feats = ops.resize2d(feats, ih, iw, mode=self.upsample)
        else:
            ih, iw = feats.shape[-2], feats.shape[-1]
        self.last_internal_hw = (ih, iw)

        up = ops.resize2d(q, ih, iw, mode=self.upsample)
        if self.fusion == "add":
            fused = ops.add(up, feats)
        elif self.fusion == "multiply":
            fused = ops.mul(up, feats)
        else:
            fused = self.fuse_proj(ops.concat([up, feats], axis=-3))
        mixed = ops.add(up, self.dwconv(fused))
        ffn_out = self.ffn2(ops.gelu(self.ffn1(mixed)))
        # the grid may be finer than the interchange plane; the window rule
        # extends to that case, so pooling back to the grid always works
        return ops.adaptive_max_pool2d(ops.add(mixed, ffn_out), gh, gw, allow_enlarge=True)


class DetectionHead(Module):
    """Per-slot classifier and box regressor (3-layer MLP, sigmoid output)."""

    def __init__(self, dim: int, num_classes: int, *, rng, dtype=np.float32):
        super().__init__()
        self.class_proj = Linear(dim, num_classes + 1, rng=rng, dtype=dtype)
        self.box1 = Linear(dim, dim, rng=rng, dtype=dtype)
        self.box2 = Linear(dim, dim, rng=rng, dtype=dtype)
        self.box3 = Linear(dim, 4, rng=rng, dtype=dtype)

    def forward(self, rows: Tensor):
        logits = self.class_proj(rows)
        h = ops.gelu(self.box1(rows))
        h = ops.gelu(self.box2(h))
        boxes = ops.sigmoid(self.box3(h))
        return logits, boxes


class DecoderLayer(Module):
    def __init__(self, dim: int, *, sim_kernel: int, cim_kernel: int, sim_blocks: int,
                 fusion: str, upsample: str, fixed_size, rng, dtype=np.float32):
        super().__init__()
        self.sim = SelfInteraction(dim, sim_kernel, sim_blocks, rng=rng, dtype=dtype)
        self.cim = CrossInteraction(dim, cim_kernel, fusion=fusion, upsample=upsample,
                                    fixed_size=fixed_size, rng=rng, dtype=dtype)

    def forward(self, q: Tensor, feats: Tensor) -> Tensor:
        return self.cim(self.sim(q), feats)


class Decoder(Module):
    """Stack of decoder layers with a shared norm and detection head.

    When ``aux_outputs`` is set the head is applied to every layer's query
    grid, yielding one detection set per layer; otherwise only the final
    layer is read out.
    """

    def __init__(self, dim: int, num_classes: int, num_layers: int, *, sim_kernel: int = 9,
                 cim_kernel: int = 9, sim_blocks: int = 1, fusion: str = "add",
                 upsample: str = "bilinear", fixed_size=None, aux_outputs: bool = True,
                 rng, dtype=np.float32):
        super().__init__()
        if num_layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.layers = ModuleList(
            DecoderLayer(dim, sim_kernel=sim_kernel, cim_kernel=cim_kernel,
                         sim_blocks=sim_blocks, fusion=fusion, upsample=upsample,
                         fixed_size=fixed_size, rng=rng, dtype=dtype)
            for _ in range(num_layers))
        self.out_norm = ChannelNorm(dim, dtype=dtype)
        self.head = DetectionHead(dim, num_classes, rng=rng, dtype=dtype)
        self.aux_outputs = aux_outputs

    def forward(self, q: Tensor, feats: Tensor):
        """q: [B,d,h,w] query grid (already batch-tiled); feats: [B,d,H,W].

        Returns a list of (logits [B,N,K+1], boxes [B,N,4]) per reported layer.
        """
        outputs = []
        n_layers = len(self.layers)
        for i, layer in enumerate(self.layers):
            q = layer(q, feats)
            if self.aux_outputs or i == n_layers - 1:
                rows = grid_to_rows(self.out_norm(q))
                outputs.append(self.head(rows))
        return outputs
