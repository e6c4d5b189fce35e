"""Full detector: backbone -> projection -> encoder -> decoder -> head."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .core import Tensor, ShapeError, no_grad, ops
from .decoder import Decoder, DecoderOutput, DetectionSet, init_queries
from .encoder import Backbone, Encoder, EncoderConfig
from .nn import Conv2d, Module


class DECO(Module):
    """Query-based convolutional detector producing exactly N predictions per image.

    There is no suppression or filtering stage anywhere; the decoder's N query
    slots are the final output set.
    """

    def __init__(self, cfg: ModelConfig, *, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng((seed, 11))
        d = cfg.hidden_dim
        self.backbone = Backbone(cfg.backbone_channels, rng=rng, dtype=dtype)
        self.input_proj = Conv2d(self.backbone.out_channels, d, 1, rng=rng, dtype=dtype)
        self.encoder = Encoder(
            EncoderConfig(hidden_dim=d, backbone_channels=tuple(cfg.backbone_channels),
                          stage_blocks=tuple(cfg.stage_blocks), stage_dims=tuple(cfg.stage_dims),
                          block_kernel=cfg.block_kernel),
            rng=rng, dtype=dtype)
        gw, gh = cfg.query_shape
        self.queries = init_queries(cfg.num_queries, gw, gh, d, rng, dtype=dtype)
        self.decoder = Decoder(d, cfg.num_classes, cfg.decoder_layers,
                               sim_kernel=cfg.sim_kernel, cim_kernel=cfg.cim_kernel,
                               sim_blocks=cfg.sim_blocks, fusion=cfg.fusion_mode,
                               upsample=cfg.upsample_mode, fixed_size=cfg.cim_fixed_size,
                               aux_outputs=cfg.aux_loss, rng=rng, dtype=dtype)

    # ---- forward paths ---------------------------------------------------

    def encode(self, images: Tensor) -> Tensor:
        """[B,3,H,W] -> encoder features [B,d,H/32,W/32]."""
        feats = self.backbone(images)
        return self.encoder(self.input_proj(feats))

    def forward_batched(self, images: Tensor):
        """Batched forward returning per-layer (logits [B,N,K+1], boxes [B,N,4])."""
        if images.ndim != 4:
            raise ShapeError(f"expected [B,3,H,W] images, got {images.shape}")
        feats = self.encode(images)
        q = ops.broadcast_batch(self.queries, images.shape[0])
        return self.decoder(q, feats)

    def forward(self, images: Tensor):
        """Batched forward split into one DecoderOutput per image."""
        layers = self.forward_batched(images)
        b = images.shape[0]
        outs = []
        for i in range(b):
            per_layer = [DetectionSet(class_logits=ops.select_index(lg, 0, i),
                                      boxes=ops.select_index(bx, 0, i))
                         for lg, bx in layers]
            outs.append(DecoderOutput(per_layer=per_layer))
        return outs

    def forward_single(self, image: Tensor) -> DecoderOutput:
        if image.ndim != 3:
            raise ShapeError(f"expected [3,H,W] image, got {image.shape}")
        return self.forward(ops.reshape(image, (1,) + image.shape))[0]

    def predict(self, image: Tensor) -> DetectionSet:
        """Inference on one image; the full slot set is returned, nothing suppressed."""
        with no_grad():
            return self.forward_single(image).final

    # ---- optimizer plumbing ----------------------------------------------

    def param_groups(self):
        """(backbone, rest) named-parameter lists; together they cover the model."""
        backbone, rest = [], []
        for name, p in self.named_parameters():
            (backbone if name.startswith("backbone.") else rest).append((name, p))
        return backbone, rest


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> DECO:
    return DECO(cfg, seed=seed, dtype=dtype)
