"""Bipartite set matching and the set-prediction loss.

The matcher pairs each ground-truth box with a distinct prediction slot by
minimizing class/L1/GIoU costs.  Matching itself is non-differentiable and
runs on detached numpy; the loss is then assembled from engine ops over the
matched pairs.

Tie-breaking contract: among assignments with the exactly-equal minimal
total (totals summed in ascending ground-truth order), the matcher returns
the lexicographically smallest prediction vector.  The brute-force oracle
implements the same contract by exhaustive enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import boxes_cxcywh_to_xyxy, iou_giou_matrix
from .core import Tensor, ops


class MatchingError(ValueError):
    pass


@dataclass
class CostWeights:
    class_weight: float = 1.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    no_object_weight: float = 0.1


@dataclass
class Assignment:
    pairs: list  # (gt_index, pred_index), ascending gt order
    total: float


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def matching_cost(class_logits, pred_boxes, gt_classes, gt_boxes, weights: CostWeights) -> np.ndarray:
    """Cost matrix [N preds x M ground truths], float64, no gradient.

    cost[i,j] = class_weight * (-softmax(logits_i)[class_j])
              + l1_weight * ||box_i - box_j||_1
              + giou_weight * (1 - giou(box_i, box_j))
    """
    logits = _as_array(class_logits).astype(np.float64)
    boxes = _as_array(pred_boxes).astype(np.float64)
    n = logits.shape[0]
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    m = gt_classes.shape[0]
    if m > n:
        raise MatchingError(f"{m} ground truths exceed {n} predictions")
    if m == 0:
        return np.zeros((n, 0), dtype=np.float64)
    if gt_classes.min() < 0 or gt_classes.max() >= logits.shape[1] - 1:
        raise MatchingError("ground-truth class id out of range")
    probs = ops.softmax_probs(logits)
    cost_class = -probs[:, gt_classes]
    cost_l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    _, giou = iou_giou_matrix(boxes_cxcywh_to_xyxy(boxes), boxes_cxcywh_to_xyxy(gt_boxes))
    cost = (weights.class_weight * cost_class
            + weights.l1_weight * cost_l1
            + weights.giou_weight * (1.0 - giou))
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    return cost


# --------------------------------------------------------------------------
# Hungarian solver (augmenting paths with potentials, O(n^3))
# --------------------------------------------------------------------------


def _solve_rect(cost: np.ndarray):
    """Augmenting-path assignment for an M x N (M <= N) matrix, gt rows first.

    Standard potentials-and-shortest-path Hungarian; each gt row triggers one
    augmentation, and the search tree stays small because at most M columns
    are ever matched.  Returns (col_to_row, u, v); v <= 0 throughout.
    """
    m, n = cost.shape
    u = np.zeros(m)
    v = np.zeros(n)
    col_row = np.full(n, -1, dtype=np.int64)
    inf = np.inf
    for i in range(m):
        minv = np.full(n, inf)
        way = np.full(n, -1, dtype=np.int64)  # previous column on the path
        used = np.zeros(n, dtype=bool)
        i0 = i
        j0 = -1  # virtual start column
        tree_rows = [i]
        while True:
            cur = cost[i0] - u[i0] - v
            improve = ~used & (cur < minv)
            minv[improve] = cur[improve]
            way[improve] = j0
            j1 = int(np.argmin(np.where(used, inf, minv)))
            delta = minv[j1]
            u[tree_rows] += delta
            v[used] -= delta
            minv[~used] -= delta
            if col_row[j1] == -1:
                break
            used[j1] = True
            i0 = int(col_row[j1])
            tree_rows.append(i0)
            j0 = j1
        # augment: flip matches back along the alternating path
        while j1 != -1:
            jprev = int(way[j1])
            col_row[j1] = i if jprev == -1 else col_row[jprev]
            j1 = jprev
    return col_row, u, v


def _canonical_total(cost_gt_major: np.ndarray, pred_for_gt: np.ndarray) -> float:
    """Left-to-right float sum in ascending gt order; the tie-break currency."""
    total = 0.0
    for g in range(cost_gt_major.shape[0]):
        total += float(cost_gt_major[g, pred_for_gt[g]])
    return total


def _solve_gt_major(cost_gt_major: np.ndarray) -> np.ndarray:
    """Solve [M,N] (M <= N) and tie-break; returns pred_for_gt."""
    m, n = cost_gt_major.shape
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    col_row, u, v = _solve_rect(cost_gt_major)
    pred_for_gt = np.empty(m, dtype=np.int64)
    matched = np.flatnonzero(col_row >= 0)
    pred_for_gt[col_row[matched]] = matched
    # uniqueness certificate: with optimal duals every optimal assignment uses
    # only tight edges, so one tight edge per gt row means no competing optimum
    scale = max(1.0, float(np.abs(cost_gt_major).max()))
    tol = 1e-9 * scale
    red = cost_gt_major - u[:, None] - v[None, :]
    if np.all((red <= tol).sum(axis=1) == 1):
        return pred_for_gt
    return _refine_lex(cost_gt_major, pred_for_gt)


def _refine_lex(cost_gt_major: np.ndarray, pred_for_gt: np.ndarray) -> np.ndarray:
    """Re-fix rows in gt order so the pred vector is lexicographically smallest
    among assignments whose canonical totals achieve the minimum."""
    m, n = cost_gt_major.shape
    best = pred_for_gt.copy()
    best_total = _canonical_total(cost_gt_major, best)
    used = np.zeros(n, dtype=bool)
    for g in range(m):
        row_best_total = None
        row_best_cand = None
        row_best_suffix = None
        for cand in np.flatnonzero(~used):
            if cand == best[g]:
                cand_total = _canonical_total(cost_gt_major, best)
                suffix = best[g + 1:].copy()
            else:
                avail = np.flatnonzero(~used)
                avail = avail[avail != cand]
                if m - g - 1 > 0:
                    sub = cost_gt_major[g + 1:][:, avail]
                    sub_pred = _solve_plain(sub)
                    suffix = avail[sub_pred]
                else:
                    suffix = np.zeros(0, dtype=np.int64)
                trial = best.copy()
                trial[g] = cand
                trial[g + 1:] = suffix
                cand_total = _canonical_total(cost_gt_major, trial)
            if row_best_total is None or cand_total < row_best_total:
                row_best_total = cand_total
                row_best_cand = cand
                row_best_suffix = suffix
        if row_best_total <= best_total:
            best_total = row_best_total
            best[g] = row_best_cand
            best[g + 1:] = row_best_suffix
        used[best[g]] = True
    return best


def _solve_plain(cost_gt_major: np.ndarray) -> np.ndarray:
    """Bare solve without tie refinement (used inside the refinement)."""
    m, _ = cost_gt_major.shape
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    col_row, _, _ = _solve_rect(cost_gt_major)
    pred_for_gt = np.empty(m, dtype=np.int64)
    matched = np.flatnonzero(col_row >= 0)
    pred_for_gt[col_row[matched]] = matched
    return pred_for_gt


def hungarian_assign(cost: np.ndarray) -> Assignment:
    """Min-cost injection of ground truths into predictions.

    ``cost`` is [N preds x M gts] with finite entries and M <= N.  Returns
    pairs (gt, pred) in ascending gt order and the canonical total.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if m > n:
        raise MatchingError(f"{m} ground truths exceed {n} predictions")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    if m == 0:
        return Assignment(pairs=[], total=0.0)
    cost_gt_major = np.ascontiguousarray(cost.T)
    pred_for_gt = _solve_gt_major(cost_gt_major)
    total = _canonical_total(cost_gt_major, pred_for_gt)
    return Assignment(pairs=[(g, int(pred_for_gt[g])) for g in range(m)], total=total)


def hungarian_bruteforce(cost: np.ndarray) -> Assignment:
    """Exhaustive oracle: same contract as hungarian_assign, N <= 8 only."""
    from itertools import permutations

    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > 8:
        raise MatchingError(f"brute force capped at 8 predictions, got {n}")
    if m > n:
        raise MatchingError(f"{m} ground truths exceed {n} predictions")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    if m == 0:
        return Assignment(pairs=[], total=0.0)
    cost_gt_major = cost.T
    perms = np.array(list(permutations(range(n), m)), dtype=np.int64)  # lex order
    totals = np.zeros(len(perms))
    for g in range(m):
        totals = totals + cost_gt_major[g, perms[:, g]]
    k = int(np.argmin(totals))  # first occurrence = lex smallest among minima
    pred_for_gt = perms[k]
    return Assignment(pairs=[(g, int(pred_for_gt[g])) for g in range(m)],
                      total=_canonical_total(cost_gt_major, pred_for_gt))


# --------------------------------------------------------------------------
# differentiable loss
# --------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: Tensor
    class_loss: float
    l1_loss: float
    giou_loss: float
    per_layer: list = field(default_factory=list)


def giou_pairs(pred_boxes: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Differentiable GIoU between row-aligned cxcywh boxes, returns [M]."""
    m = pred_boxes.shape[0]
    dt = pred_boxes.dtype

    def col(t, j):
        return ops.narrow(t, 1, j, 1)

    cx, cy, w, h = (col(pred_boxes, j) for j in range(4))
    hw = ops.mul_scalar(w, 0.5)
    hh = ops.mul_scalar(h, 0.5)
    px1, px2 = ops.sub(cx, hw), ops.add(cx, hw)
    py1, py2 = ops.sub(cy, hh), ops.add(cy, hh)

    g = boxes_cxcywh_to_xyxy(np.asarray(gt_boxes)).astype(dt)
    gx1 = ops.constant(g[:, 0:1], dtype=dt)
    gy1 = ops.constant(g[:, 1:2], dtype=dt)
    gx2 = ops.constant(g[:, 2:3], dtype=dt)
    gy2 = ops.constant(g[:, 3:4], dtype=dt)

    iw = ops.clamp_min(ops.sub(ops.minimum(px2, gx2), ops.maximum(px1, gx1)), 0.0)
    ih = ops.clamp_min(ops.sub(ops.minimum(py2, gy2), ops.maximum(py1, gy1)), 0.0)
    inter = ops.mul(iw, ih)
    pred_area = ops.mul(ops.sub(px2, px1), ops.sub(py2, py1))
    gt_area = ops.mul(ops.sub(gx2, gx1), ops.sub(gy2, gy1))
    union = ops.sub(ops.add(pred_area, gt_area), inter)
    iou = ops.div(inter, union)
    ew = ops.sub(ops.maximum(px2, gx2), ops.minimum(px1, gx1))
    eh = ops.sub(ops.maximum(py2, gy2), ops.minimum(py1, gy1))
    enclose = ops.mul(ew, eh)
    giou = ops.sub(iou, ops.div(ops.sub(enclose, union), enclose))
    return ops.reshape(giou, (m,))


def _layer_loss(logits: Tensor, boxes: Tensor, gts, weights: CostWeights):
    """Loss terms for one image and one decoder layer; returns three Tensors."""
    n, kplus1 = logits.shape
    k = kplus1 - 1
    class_weights = np.ones(kplus1, dtype=logits.dtype)
    class_weights[k] = weights.no_object_weight

    gt_classes = np.asarray([c for c, _ in gts], dtype=np.int64)
    gt_boxes = np.asarray([b for _, b in gts], dtype=np.float64).reshape(-1, 4)
    m = len(gts)

    targets = np.full(n, k, dtype=np.int64)
    if m:
        cost = matching_cost(logits, boxes, gt_classes, gt_boxes, weights)
        assign = hungarian_assign(cost)
        pred_idx = np.array([p for _, p in assign.pairs], dtype=np.int64)
        targets[pred_idx] = gt_classes

    class_term = ops.mul_scalar(ops.softmax_xent(logits, targets, class_weights), 1.0 / n)
    if m == 0:
        zero = ops.constant(0.0, dtype=boxes.dtype)
        return class_term, zero, zero

    matched = ops.gather_rows(boxes, pred_idx)
    diff = ops.abs_(ops.sub(matched, ops.constant(gt_boxes, dtype=boxes.dtype)))
    l1_term = ops.mul_scalar(ops.sum_(diff), 1.0 / m)
    giou = giou_pairs(matched, gt_boxes)
    giou_term = ops.mul_scalar(ops.sum_(ops.add_scalar(ops.mul_scalar(giou, -1.0), 1.0)), 1.0 / m)
    return class_term, l1_term, giou_term


def set_prediction_loss(output, gts, weights: CostWeights | None = None, aux: bool = True) -> LossBreakdown:
    """Set-prediction loss for one image.

    ``output`` carries per-layer detection sets (class_logits [N,K+1], boxes
    [N,4] normalized cxcywh); ``gts`` is a list of (class_id, box) tuples.
    Matching runs independently per layer; layer losses are summed.  Box terms
    are normalized by the image's ground-truth count, the class term by N.
    """
    weights = weights or CostWeights()
    layers = output.per_layer if aux else output.per_layer[-1:]
    total = None
    cls_f = l1_f = giou_f = 0.0
    per_layer = []
    for det in layers:
        c, l1, gi = _layer_loss(det.class_logits, det.boxes, gts, weights)
        layer_total = ops.add(
            ops.mul_scalar(c, weights.class_weight),
            ops.add(ops.mul_scalar(l1, weights.l1_weight), ops.mul_scalar(gi, weights.giou_weight)))
        total = layer_total if total is None else ops.add(total, layer_total)
        cls_f += c.item()
        l1_f += l1.item()
        giou_f += gi.item()
        per_layer.append({"class": c.item(), "l1": l1.item(), "giou": gi.item()})
    return LossBreakdown(total=total, class_loss=cls_f, l1_loss=l1_f, giou_loss=giou_f,
                         per_layer=per_layer)


def batch_prediction_loss(layer_outputs, gts_per_image, weights: CostWeights | None = None,
                          aux: bool = True) -> LossBreakdown:
    """Batched loss over per-layer (logits [B,N,K+1], boxes [B,N,4]) tensors.

    Equivalent to averaging ``set_prediction_loss`` over the batch, but with a
    constant number of engine ops per layer regardless of batch size.
    """
    weights = weights or CostWeights()
    if not aux:
        layer_outputs = layer_outputs[-1:]
    b, n, kplus1 = layer_outputs[0][0].shape
    k = kplus1 - 1
    dt = layer_outputs[0][0].dtype
    class_weights = np.ones(kplus1, dtype=dt)
    class_weights[k] = weights.no_object_weight

    total = None
    cls_f = l1_f = giou_f = 0.0
    per_layer = []
    for logits, boxes in layer_outputs:
        logits_flat = ops.reshape(logits, (b * n, kplus1))
        boxes_flat = ops.reshape(boxes, (b * n, 4))
        targets = np.full(b * n, k, dtype=np.int64)
        flat_idx = []
        gt_rows = []
        row_scale = []
        for i, gts in enumerate(gts_per_image):
            m = len(gts)
            if m == 0:
                continue
            gt_classes = np.asarray([c for c, _ in gts], dtype=np.int64)
            gt_boxes = np.asarray([bx for _, bx in gts], dtype=np.float64).reshape(-1, 4)
            cost = matching_cost(logits.data[i], boxes.data[i], gt_classes, gt_boxes, weights)
            assign = hungarian_assign(cost)
            pred_idx = np.array([p for _, p in assign.pairs], dtype=np.int64)
            targets[i * n + pred_idx] = gt_classes
            flat_idx.append(i * n + pred_idx)
            gt_rows.append(gt_boxes)
            row_scale.append(np.full(m, 1.0 / (m * b)))

        class_term = ops.mul_scalar(ops.softmax_xent(logits_flat, targets, class_weights), 1.0 / (n * b))
        if flat_idx:
            idx = np.concatenate(flat_idx)
            gt_all = np.concatenate(gt_rows, axis=0)
            scale = np.concatenate(row_scale).astype(dt)
            matched = ops.gather_rows(boxes_flat, idx)
            diff = ops.abs_(ops.sub(matched, ops.constant(gt_all, dtype=dt)))
            l1_term = ops.sum_(ops.mul(diff, ops.constant(np.repeat(scale[:, None], 4, axis=1), dtype=dt)))
            giou = giou_pairs(matched, gt_all)
            one_minus = ops.add_scalar(ops.mul_scalar(giou, -1.0), 1.0)
            giou_term = ops.sum_(ops.mul(one_minus, ops.constant(scale, dtype=dt)))
        else:
            l1_term = ops.constant(0.0, dtype=dt)
            giou_term = ops.constant(0.0, dtype=dt)

        layer_total = ops.add(
            ops.mul_scalar(class_term, weights.class_weight),
            ops.add(ops.mul_scalar(l1_term, weights.l1_weight),
                    ops.mul_scalar(giou_term, weights.giou_weight)))
        total = layer_total if total is None else ops.add(total, layer_total)
        cls_f += class_term.item()
        l1_f += l1_term.item()
        giou_f += giou_term.item()
        per_layer.append({"class": class_term.item(), "l1": l1_term.item(), "giou": giou_term.item()})
    return LossBreakdown(total=total, class_loss=cls_f, l1_loss=l1_f, giou_loss=giou_f,
                         per_layer=per_layer)
