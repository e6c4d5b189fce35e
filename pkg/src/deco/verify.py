"""Finite-difference verification of every differentiable op and the composed path.

Inputs are drawn continuously, so tie neighborhoods (max/min/pool argmax
boundaries) have probability zero; seeds are fixed for reproducibility.
"""

from __future__ import annotations

import numpy as np

from .core import Tensor, grad_check, ops
from .decoder import Decoder, DecoderOutput, DetectionSet, init_queries
from .encoder import Encoder, EncoderConfig
from .matching import set_prediction_loss


def _sq(t: Tensor) -> Tensor:
    # sum of squares: makes the seed gradient input-dependent
    return ops.sum_(ops.mul(t, t))


def op_grad_checks() -> list:
    """(name, max rel err) for each differentiable op, f64 central differences."""
    rng = np.random.default_rng(12)

    def t(*shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    checks = []
    a, b = t(3, 4), t(3, 4)
    checks.append(("add", grad_check(lambda a, b: _sq(ops.add(a, b)), (a, b))))
    checks.append(("sub", grad_check(lambda a, b: _sq(ops.sub(a, b)), (a, b))))
    checks.append(("mul", grad_check(lambda a, b: _sq(ops.mul(a, b)), (a, b))))
    bden = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)) * np.sign(rng.normal(size=(3, 4))),
                  requires_grad=True)
    checks.append(("div", grad_check(lambda a, b: _sq(ops.div(a, b)), (a, bden))))
    checks.append(("add_scalar", grad_check(lambda a: _sq(ops.add_scalar(a, 0.7)), (a,))))
    checks.append(("mul_scalar", grad_check(lambda a: _sq(ops.mul_scalar(a, -1.3)), (a,))))
    checks.append(("abs", grad_check(lambda a: _sq(ops.abs_(a)), (t(3, 4),))))
    checks.append(("maximum", grad_check(lambda a, b: _sq(ops.maximum(a, b)), (t(3, 4), t(3, 4)))))
    checks.append(("minimum", grad_check(lambda a, b: _sq(ops.minimum(a, b)), (t(3, 4), t(3, 4)))))
    checks.append(("clamp_min", grad_check(lambda a: _sq(ops.clamp_min(a, 0.1)), (t(3, 4),))))
    checks.append(("gelu", grad_check(lambda a: _sq(ops.gelu(a)), (t(3, 4),))))
    checks.append(("sigmoid", grad_check(lambda a: _sq(ops.sigmoid(a)), (t(3, 4),))))
    checks.append(("sum", grad_check(lambda a: ops.mul(ops.sum_(a), ops.sum_(a)), (t(3, 4),))))
    checks.append(("mean", grad_check(lambda a: ops.mul(ops.mean_(a), ops.mean_(a)), (t(3, 4),))))
    checks.append(("reshape", grad_check(lambda a: _sq(ops.reshape(a, (4, 3))), (t(3, 4),))))
    checks.append(("transpose", grad_check(lambda a: _sq(ops.transpose(a, (2, 0, 1))), (t(2, 3, 4),))))
    checks.append(("concat", grad_check(
        lambda a, b: _sq(ops.concat([a, b], axis=1)), (t(2, 3), t(2, 2)))))
    checks.append(("narrow", grad_check(lambda a: _sq(ops.narrow(a, 1, 1, 2)), (t(3, 4),))))
    checks.append(("select_index", grad_check(lambda a: _sq(ops.select_index(a, 0, 1)), (t(3, 4),))))
    idx = np.array([0, 2, 2, 1])
    checks.append(("gather_rows", grad_check(lambda a: _sq(ops.gather_rows(a, idx)), (t(3, 4),))))
    checks.append(("broadcast_batch", grad_check(
        lambda a: _sq(ops.broadcast_batch(a, 3)), (t(2, 3),))))
    checks.append(("matmul", grad_check(lambda a, b: _sq(ops.matmul(a, b)), (t(3, 4), t(4, 2)))))
    w, bias = t(5, 4, scale=0.5), t(5)
    checks.append(("linear", grad_check(
        lambda x, w, b: _sq(ops.linear(x, w, b)), (t(2, 3, 4), w, bias))))

    x = t(2, 3, 6, 6)
    cw, cb = t(4, 3, 3, 3, scale=0.4), t(4)
    checks.append(("conv2d", grad_check(
        lambda x, w, b: _sq(ops.conv2d(x, w, b, stride=2, padding=1)), (x, cw, cb))))
    xd = t(2, 3, 5, 5)
    dw, db = t(3, 1, 7, 7, scale=0.3), t(3)
    checks.append(("conv2d_depthwise", grad_check(
        lambda x, w, b: _sq(ops.conv2d(x, w, b, padding=3, groups=3)), (xd, dw, db))))
    xc = t(1, 2, 4, 4)
    cwc = t(2, 1, 3, 3, scale=0.5)
    checks.append(("conv2d_circular", grad_check(
        lambda x, w: _sq(ops.conv2d(x, w, None, padding=1, groups=2, pad_mode="circular")),
        (xc, cwc))))

    g, beta = t(3), t(3)
    checks.append(("layer_norm", grad_check(
        lambda x, g, b: _sq(ops.layer_norm(x, g, b)), (t(2, 3, 4, 4), g, beta))))
    checks.append(("resize_bilinear", grad_check(
        lambda x: _sq(ops.resize2d(x, 7, 5)), (t(1, 2, 3, 3),))))
    checks.append(("resize_nearest", grad_check(
        lambda x: _sq(ops.resize2d(x, 5, 7, mode="nearest")), (t(1, 2, 3, 3),))))
    checks.append(("adaptive_max_pool", grad_check(
        lambda x: _sq(ops.adaptive_max_pool2d(x, 3, 3)), (t(1, 2, 7, 7),))))
    checks.append(("adaptive_max_pool_enlarge", grad_check(
        lambda x: _sq(ops.adaptive_max_pool2d(x, 5, 5, allow_enlarge=True)), (t(1, 2, 3, 3),))))

    logits = t(5, 4)
    targets = np.array([0, 3, 3, 1, 2])
    weights = np.array([1.0, 0.5, 1.0, 0.1])
    checks.append(("softmax_xent", grad_check(
        lambda z: ops.mul(ops.softmax_xent(z, targets, weights),
                          ops.softmax_xent(z, targets, weights)), (logits,))))
    return checks


def composed_grad_check() -> float:
    """Gradcheck through encoder -> decoder -> set loss on tiny f64 tensors.

    d=8, 3x3 feature grid, N=4 queries on a 2x2 grid; differentiates with
    respect to the input features and the query parameter, exercising every
    backward in the chain.
    """
    rng = np.random.default_rng(5)
    d = 8
    enc_cfg = EncoderConfig(hidden_dim=d, backbone_channels=(4, 4, 6, 6, d),
                            stage_blocks=(1, 1, 1), stage_dims=(6, 8, 6), block_kernel=3)
    encoder = Encoder(enc_cfg, rng=rng, dtype=np.float64)
    decoder = Decoder(d, num_classes=2, num_layers=2, sim_kernel=3, cim_kernel=3,
                      rng=rng, dtype=np.float64)
    queries = init_queries(4, 2, 2, d, rng=rng, dtype=np.float64)
    feats = Tensor(rng.normal(size=(1, d, 3, 3)), requires_grad=True)
    gts = [(0, np.array([0.4, 0.4, 0.3, 0.3])), (1, np.array([0.7, 0.6, 0.2, 0.25]))]

    def full(feats_t, queries_t):
        z = encoder(feats_t)
        q = ops.broadcast_batch(queries_t, 1)
        layer_sets = [DetectionSet(class_logits=ops.select_index(lg, 0, 0),
                                   boxes=ops.select_index(bx, 0, 0))
                      for lg, bx in decoder(q, z)]
        return set_prediction_loss(DecoderOutput(per_layer=layer_sets), gts).total

    return grad_check(full, (feats, queries))
