"""Differentiable array ops for the tensor engine.

Conventions:
  * feature maps are channels-first, [C,H,W] or [B,C,H,W]
  * binary elementwise ops demand identical shapes; the only broadcasts in
    the engine are bias addition (inside conv2d/linear) and scalar multiply
  * every op preserves the input float dtype and rejects mixed dtypes
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, ShapeError, grad_enabled, debug_checks_enabled

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _result(data: np.ndarray, parents, bwd, op: str) -> Tensor:
    if debug_checks_enabled() and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._bwd = bwd
        out._op = op
        return out
    return Tensor(data)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return g / bd, -g * ad / (bd * bd)

    return _result(out, (a, b), bwd, "div")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    _check_binary(a, b, "maximum")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _result(out, (a, b), lambda g: (g * take_a, g * ~take_a), "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    _check_binary(a, b, "minimum")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _result(out, (a, b), lambda g: (g * take_a, g * ~take_a), "minimum")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient is zero at and below the floor."""
    passes = a.data > floor
    out = np.where(passes, a.data, a.data.dtype.type(floor))
    return _result(out, (a,), lambda g: (g * passes,), "clamp_min")


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf).astype(x.dtype),)

    return _result((x * phi).astype(x.dtype), (a,), bwd, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),), "sum")


def mean_(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.dtype)

    def bwd(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False),)

    return _result(out, (a,), bwd, "mean")


# --------------------------------------------------------------------------
# shape plumbing
# --------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    in_shape = a.shape
    return _result(np.ascontiguousarray(out), (a,), lambda g: (g.reshape(in_shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError("concat: dtype mismatch")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _result(out, tensors, bwd, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    n = a.shape[axis]
    if not (0 <= start and start + length <= n):
        raise ShapeError(f"narrow: [{start},{start + length}) out of range for axis {axis} of size {n}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _result(out, (a,), bwd, "narrow")


def select_index(a: Tensor, axis: int, i: int) -> Tensor:
    """Pick index ``i`` along ``axis``, dropping the axis."""
    n = a.shape[axis]
    if not (0 <= i < n):
        raise ShapeError(f"select_index: index {i} out of range for axis {axis} of size {n}")
    out = np.ascontiguousarray(np.take(a.data, i, axis=axis))

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        idx = [slice(None)] * a.ndim
        idx[axis] = i
        full[tuple(idx)] = g
        return (full,)

    return _result(out, (a,), bwd, "select_index")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Row gather on a 2-D tensor: out[k] = a[idx[k]]."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D input, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), bwd, "gather_rows")


def broadcast_batch(a: Tensor, batch: int) -> Tensor:
    """Tile a tensor along a new leading batch axis; backward sums over it."""
    out = np.ascontiguousarray(np.broadcast_to(a.data[None], (batch,) + a.shape))
    return _result(out, (a,), lambda g: (g.sum(axis=0),), "broadcast_batch")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError("matmul: dtype mismatch")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias over the last axis; weight is [out, in]."""
    din = weight.shape[1]
    if x.shape[-1] != din:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-dim {din}")
    if x.dtype != weight.dtype:
        raise ShapeError("linear: dtype mismatch")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out2 = x2 @ weight.data.T
    if bias is not None:
        out2 = out2 + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    wd = weight.data

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ wd).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out2.reshape(lead + (weight.shape[0],)), parents, bwd, "linear")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _pad_spatial(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    if mode == "zeros":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if mode == "circular":
        h, w = x.shape[2], x.shape[3]
        if pad > h or pad > w:
            raise ShapeError(f"circular padding {pad} exceeds spatial size {h}x{w}")
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="wrap")
    raise ValueError(f"unknown pad mode '{mode}'")


def _fold_padding(gp: np.ndarray, pad: int, h: int, w: int, mode: str) -> np.ndarray:
    """Adjoint of _pad_spatial: route padded-plane gradients back to the input."""
    if pad == 0:
        return gp
    if mode == "zeros":
        return gp[:, :, pad:pad + h, pad:pad + w]
    # circular: every padded row/col aliases an interior one
    rows = np.zeros(gp.shape[:2] + (h, gp.shape[3]), dtype=gp.dtype)
    src_r = (np.arange(gp.shape[2]) - pad) % h
    np.add.at(rows, (slice(None), slice(None), src_r), gp)
    out = np.zeros(gp.shape[:2] + (h, w), dtype=gp.dtype)
    src_c = (np.arange(gp.shape[3]) - pad) % w
    np.add.at(out, (slice(None), slice(None), slice(None), src_c), rows)
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)


def _col2im(gcols: np.ndarray, shape, kh, kw, stride, oh, ow) -> np.ndarray:
    b, c, hp, wp = shape
    gc = gcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros(shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gc[:, :, i, j]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, stride: int = 1,
           padding: int = 0, groups: int = 1, pad_mode: str = "zeros") -> Tensor:
    """2-D cross-correlation, channels-first, symmetric integer padding.

    ``weight`` is [C_out, C_in/groups, kh, kw].  ``pad_mode`` is "zeros" or
    "circular"; the latter exists so translation equivariance can be tested
    without boundary effects.
    """
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got {weight.shape}")
    if x.dtype != weight.dtype:
        raise ShapeError("conv2d: dtype mismatch between input and weight")
    was3d = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride {stride} or padding {padding}")

    xd = x.data[None] if was3d else x.data
    b, cin, h, w = xd.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels ({cin}->{cout}) not divisible by groups {groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cin_g} in-channels per group, input has {cin // groups}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    xp = _pad_spatial(xd, padding, pad_mode)
    need_x = x.requires_grad
    need_w = weight.requires_grad

    if groups == cin and cout == cin and stride == 1:
        out, bwd_core = _depthwise_conv(xp, weight.data, (b, cin, h, w), padding, pad_mode,
                                        need_x, need_w)
    else:
        out, bwd_core = _grouped_conv(xp, weight.data, groups, stride, kh, kw, oh, ow,
                                      (b, cin, h, w), padding, pad_mode, need_x, need_w)

    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if was3d:
            g = g[None]
        gx, gw = bwd_core(g)
        if gx is not None and was3d:
            gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out[0] if was3d else out, parents, bwd, "conv2d")


def _depthwise_conv(xp, wd, xshape, padding, pad_mode, need_x, need_w):
    # windows flattened once, then one per-channel-batched GEMV; at the small
    # spatial sizes this path sees, dispatch count matters more than copies
    b, c, h, w = xshape
    kh, kw = wd.shape[2], wd.shape[3]
    k2 = wd[:, 0]  # [C,kh,kw]
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    flat = np.ascontiguousarray(win).reshape(b, c, oh * ow, kh * kw)
    out = np.matmul(flat, k2.reshape(c, kh * kw, 1)).reshape(b, c, oh, ow)

    def bwd_core(g):
        gw = None
        if need_w:
            gp = g.reshape(b, c, 1, oh * ow)
            gw = np.matmul(gp, flat).sum(axis=0).reshape(c, 1, kh, kw)
        gx = None
        if need_x:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + oh, v:v + ow] += g * k2[:, u, v][None, :, None, None]
            gx = _fold_padding(gxp, padding, h, w, pad_mode)
        return gx, gw

    return out, bwd_core


def _grouped_conv(xp, wd, groups, stride, kh, kw, oh, ow, xshape, padding, pad_mode,
                  need_x, need_w):
    b, cin, h, w = xshape
    cout = wd.shape[0]
    cg_in, cg_out = cin // groups, cout // groups
    outs = []
    saved_cols = []
    for g in range(groups):
        xg = xp[:, g * cg_in:(g + 1) * cg_in]
        cols = _im2col(xg, kh, kw, stride, oh, ow)
        wmat = wd[g * cg_out:(g + 1) * cg_out].reshape(cg_out, -1)
        outs.append((cols @ wmat.T).reshape(b, oh, ow, cg_out))
        saved_cols.append(cols if need_w else None)
    out = np.concatenate(outs, axis=3).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd_core(gr):
        gw = np.zeros_like(wd) if need_w else None
        gx = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=gr.dtype) if need_x else None
        for g in range(groups):
            gmat = gr[:, g * cg_out:(g + 1) * cg_out].transpose(0, 2, 3, 1).reshape(-1, cg_out)
            wmat = wd[g * cg_out:(g + 1) * cg_out].reshape(cg_out, -1)
            if need_w:
                cols = saved_cols[g]
                if cols is None:
                    xg = xp[:, g * cg_in:(g + 1) * cg_in]
                    cols = _im2col(xg, kh, kw, stride, oh, ow)
                gw[g * cg_out:(g + 1) * cg_out] = (gmat.T @ cols).reshape(cg_out, cg_in, kh, kw)
            if need_x:
                gcols = gmat @ wmat
                gx[:, g * cg_in:(g + 1) * cg_in] = _col2im(
                    gcols, (b, cg_in, h + 2 * padding, w + 2 * padding), kh, kw, stride, oh, ow)
        if need_x:
            gx = _fold_padding(gx, padding, h, w, pad_mode)
        return gx, gw

    return out, bwd_core


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """LayerNorm over the channel dim at each spatial position (channels-first).

    Accepts [C,H,W] or [B,C,H,W]; gamma and beta are [C].
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"layer_norm: input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    ax = x.ndim - 3
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    gshape = (c, 1, 1) if x.ndim == 3 else (1, c, 1, 1)
    xd = x.data
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    gr = gamma.data.reshape(gshape)
    out = xn * gr + beta.data.reshape(gshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != ax)

    def bwd(g):
        gbeta = g.sum(axis=reduce_axes)
        ggamma = (g * xn).sum(axis=reduce_axes)
        gxn = g * gr
        m1 = gxn.mean(axis=ax, keepdims=True)
        m2 = (gxn * xn).mean(axis=ax, keepdims=True)
        gx = inv * (gxn - m1 - xn * m2)
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), bwd, "layer_norm")


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def _half_pixel_sources(in_size: int, out_size: int):
    dst = np.arange(out_size, dtype=np.float64)
    src = (dst + 0.5) * (in_size / out_size) - 0.5
    return np.clip(src, 0.0, float(in_size - 1))


def resize2d(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    """Spatial resize with half-pixel alignment.

    Bilinear interpolates with source coords (dst+0.5)*in/out - 0.5 clamped to
    the valid range; nearest rounds the same coords.  Constant inputs map to
    the constant exactly (the interpolation is written as a lerp).
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"resize2d: unknown mode '{mode}'")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize2d: bad output size {out_h}x{out_w}")
    was3d = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"resize2d: input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    xd = x.data[None] if was3d else x.data
    b, c, h, w = xd.shape
    src_r = _half_pixel_sources(h, out_h)
    src_c = _half_pixel_sources(w, out_w)

    if mode == "nearest":
        ir = np.clip(np.floor(src_r + 0.5), 0, h - 1).astype(np.int64)
        ic = np.clip(np.floor(src_c + 0.5), 0, w - 1).astype(np.int64)
        out = np.ascontiguousarray(xd[:, :, ir][:, :, :, ic])

        def bwd(g):
            if was3d:
                g = g[None]
            gx = np.zeros_like(xd)
            flat = gx.reshape(b * c, h, w)
            gf = g.reshape(b * c, out_h, out_w)
            rows = np.repeat(ir[:, None], out_w, axis=1)
            cols = np.repeat(ic[None, :], out_h, axis=0)
            np.add.at(flat, (np.arange(b * c)[:, None, None], rows[None], cols[None]), gf)
            gx = flat.reshape(xd.shape)
            return (gx[0] if was3d else gx,)

        return _result(out[0] if was3d else out, (x,), bwd, "resize2d")

    r0 = np.floor(src_r).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    fr = (src_r - r0).astype(xd.dtype)
    c0 = np.floor(src_c).astype(np.int64)
    c1 = np.minimum(c0 + 1, w - 1)
    fc = (src_c - c0).astype(xd.dtype)

    # lerp form keeps constants exact: a + f*(b-a)
    rows_lo = xd[:, :, r0]
    rows_hi = xd[:, :, r1]
    rows = rows_lo + fr[:, None] * (rows_hi - rows_lo)   # [B,C,outH,W]
    cols_lo = rows[:, :, :, c0]
    cols_hi = rows[:, :, :, c1]
    out = cols_lo + fc * (cols_hi - cols_lo)             # [B,C,outH,outW]

    def bwd(g):
        if was3d:
            g = g[None]
        # back through column lerp
        g_lo = g * (1.0 - fc)
        g_hi = g * fc
        grows = np.zeros((b, c, out_h, w), dtype=g.dtype)
        flat = grows.reshape(b * c * out_h, w)
        row_ids = np.arange(b * c * out_h)[:, None]
        np.add.at(flat, (row_ids, np.broadcast_to(c0, (1, out_w))), g_lo.reshape(-1, out_w))
        np.add.at(flat, (row_ids, np.broadcast_to(c1, (1, out_w))), g_hi.reshape(-1, out_w))
        # back through row lerp
        gr_lo = grows * (1.0 - fr)[:, None]
        gr_hi = grows * fr[:, None]
        gx = np.zeros_like(xd)
        gx2 = gx.transpose(0, 1, 3, 2).copy()            # [B,C,W,H] to index rows last
        flat2 = gx2.reshape(b * c * w, h)
        t_lo = gr_lo.transpose(0, 1, 3, 2).reshape(-1, out_h)
        t_hi = gr_hi.transpose(0, 1, 3, 2).reshape(-1, out_h)
        row_ids2 = np.arange(b * c * w)[:, None]
        np.add.at(flat2, (row_ids2, np.broadcast_to(r0, (1, out_h))), t_lo)
        np.add.at(flat2, (row_ids2, np.broadcast_to(r1, (1, out_h))), t_hi)
        gx = flat2.reshape(b, c, w, h).transpose(0, 1, 3, 2)
        gx = np.ascontiguousarray(gx)
        return (gx[0] if was3d else gx,)

    return _result(np.ascontiguousarray(out[0] if was3d else out), (x,), bwd, "resize2d")


def adaptive_max_pool2d(x: Tensor, out_h: int, out_w: int, *, allow_enlarge: bool = False) -> Tensor:
    """Adaptive max pooling; window i covers [floor(i*n/out), ceil((i+1)*n/out)).

    Gradient routes to the argmax of each window; ties pick the first element
    in row-major order.  Pooling never enlarges unless ``allow_enlarge`` is
    set, in which case the same window rule applies (windows then overlap or
    repeat, which is what a resolution-tracking consumer needs when its grid
    is finer than the input).
    """
    was3d = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"adaptive_max_pool2d: input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    xd = x.data[None] if was3d else x.data
    b, c, h, w = xd.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"adaptive_max_pool2d: output {out_h}x{out_w} invalid")
    if not allow_enlarge and (out_h > h or out_w > w):
        raise ShapeError(f"adaptive_max_pool2d: output {out_h}x{out_w} exceeds input {h}x{w}; "
                         "pooling never enlarges")

    out = np.empty((b, c, out_h, out_w), dtype=xd.dtype)
    argrows = np.empty((b, c, out_h, out_w), dtype=np.int64)
    argcols = np.empty((b, c, out_h, out_w), dtype=np.int64)
    for i in range(out_h):
        r0, r1 = (i * h) // out_h, -((-(i + 1) * h) // out_h)
        for j in range(out_w):
            c0, c1 = (j * w) // out_w, -((-(j + 1) * w) // out_w)
            win = xd[:, :, r0:r1, c0:c1].reshape(b, c, -1)
            k = win.argmax(axis=2)
            out[:, :, i, j] = np.take_along_axis(win, k[:, :, None], axis=2)[:, :, 0]
            argrows[:, :, i, j] = r0 + k // (c1 - c0)
            argcols[:, :, i, j] = c0 + k % (c1 - c0)

    def bwd(g):
        if was3d:
            g = g[None]
        gx = np.zeros_like(xd)
        bi, ci = np.indices((b, c))
        bi = bi[:, :, None, None]
        ci = ci[:, :, None, None]
        np.add.at(gx, (bi, ci, argrows, argcols), g)
        return (gx[0] if was3d else gx,)

    return _result(out[0] if was3d else out, (x,), bwd, "adaptive_max_pool2d")


# --------------------------------------------------------------------------
# classification loss kernel
# --------------------------------------------------------------------------


def softmax_xent(logits: Tensor, target, class_weights=None) -> Tensor:
    """Fused stable softmax + cross-entropy, summed over rows.

    ``logits`` is [K] with an int target, or [N,K] with an int vector of
    targets.  ``class_weights`` (optional, [K]) scales each row's loss by the
    weight of its target class; the caller handles any averaging.
    """
    single = logits.ndim == 1
    if logits.ndim not in (1, 2):
        raise ShapeError(f"softmax_xent: logits must be [K] or [N,K], got {logits.shape}")
    ld = logits.data[None] if single else logits.data
    n, k = ld.shape
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"softmax_xent: {n} rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"softmax_xent: target out of range [0,{k})")
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=ld.dtype)
        if cw.shape != (k,):
            raise ShapeError(f"softmax_xent: class_weights must be ({k},), got {cw.shape}")
        wrow = cw[t]
    else:
        wrow = np.ones(n, dtype=ld.dtype)

    z = ld - ld.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    rows = np.arange(n)
    out = np.asarray(-(wrow * logp[rows, t]).sum(), dtype=ld.dtype)

    def bwd(g):
        p = ez / sez
        grad = p * wrow[:, None]
        grad[rows, t] -= wrow
        grad = grad * g
        return (grad[0] if single else grad.astype(ld.dtype, copy=False),)

    return _result(out, (logits,), bwd, "softmax_xent")


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (no tape)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)
