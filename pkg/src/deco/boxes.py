"""Axis-aligned box geometry: conversions, IoU and generalized IoU.

Two representations are used throughout:
  * cxcywh: center x, center y, width, height (model space, usually normalized)
  * xyxy:   x1, y1, x2, y2 with x2 > x1 and y2 > y1

Everything here is plain numpy; the differentiable GIoU used by the loss is
assembled from engine ops in the matching module.
"""

from __future__ import annotations

import numpy as np


class BoxError(ValueError):
    """Raised for degenerate or malformed boxes."""


def cxcywh_to_xyxy(box):
    cx, cy, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise BoxError(f"box has nonpositive size w={w} h={h}")
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def xyxy_to_cxcywh(box):
    x1, y1, x2, y2 = (float(v) for v in box)
    if x2 <= x1 or y2 <= y1:
        raise BoxError(f"box corners not ordered: ({x1},{y1},{x2},{y2})")
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def boxes_cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def boxes_xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_iou_giou(a, b):
    """IoU and GIoU of two xyxy boxes (scalars)."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise BoxError("degenerate box passed to box_iou_giou")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    iou = inter / union
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    enclose = cw * ch
    giou = iou - (enclose - union) / enclose
    return iou, giou


def iou_giou_matrix(a: np.ndarray, b: np.ndarray):
    """Pairwise IoU and GIoU for xyxy box arrays [N,4] x [M,4] -> two [N,M] arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[-1] != 4 or b.shape[-1] != 4:
        raise BoxError(f"expected [N,4] and [M,4], got {a.shape} and {b.shape}")
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union
    lt_c = np.minimum(a[:, None, :2], b[None, :, :2])
    rb_c = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh_c = rb_c - lt_c
    enclose = wh_c[..., 0] * wh_c[..., 1]
    giou = iou - (enclose - union) / enclose
    return iou, giou
