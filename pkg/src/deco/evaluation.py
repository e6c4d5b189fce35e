"""COCO-style average precision and query-slot export.

Detections are matched greedily per class and IoU threshold in descending
confidence order; AP uses the 101-point interpolated precision envelope and
the headline number averages thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_giou_matrix

COCO_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

# COCO pixel-area bands: small < 32^2 <= medium < 96^2 <= large
AREA_BANDS = (("small", 0.0, 32.0 ** 2), ("medium", 32.0 ** 2, 96.0 ** 2),
              ("large", 96.0 ** 2, np.inf))


@dataclass
class DetectionRecord:
    image_id: int
    class_id: int
    confidence: float
    box_xyxy: np.ndarray  # pixels

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0,1]")


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict = field(default_factory=dict)
    num_detections: int = 0
    num_gts: int = 0
    area_aps: dict = field(default_factory=dict)


def _group(records, key):
    out = {}
    for r in records:
        out.setdefault(key(r), []).append(r)
    return out


def _match_class_threshold(dets: list, gts_by_image: dict, thr: float,
                           gt_band_ok: dict | None = None):
    """Greedy match in descending confidence; returns (tp flags, fp flags, order).

    With ``gt_band_ok`` set, detections matched to an out-of-band gt are
    ignored (neither tp nor fp), following the area-split convention.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].image_id, i))
    taken = {img: np.zeros(len(g), dtype=bool) for img, g in gts_by_image.items()}
    tp = np.zeros(len(order), dtype=bool)
    ignore = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = dets[i]
        gts = gts_by_image.get(det.image_id)
        if not gts:
            continue
        gt_boxes = np.stack([g[1] for g in gts])
        iou, _ = iou_giou_matrix(det.box_xyxy[None], gt_boxes)
        iou = iou[0]
        iou[taken[det.image_id]] = -1.0
        j = int(np.argmax(iou))
        if iou[j] >= thr:
            taken[det.image_id][j] = True
            if gt_band_ok is not None and not gt_band_ok[det.image_id][j]:
                ignore[rank] = True
            else:
                tp[rank] = True
    fp = ~tp & ~ignore
    return tp, fp, order


def _ap_from_flags(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    denom = tp_cum + fp_cum
    keep = denom > 0  # ignored detections contribute no PR point
    precision = tp_cum[keep] / denom[keep]
    recall = tp_cum[keep] / n_gt
    if len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # precision at the first point with recall >= r, 0 past the curve end
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_ap(detections: list, gts: list, thresholds=COCO_THRESHOLDS) -> EvalReport:
    """COCO-style AP over (class, threshold) cells.

    ``gts`` rows are (image_id, class_id, box_xyxy pixels).  Classes with no
    ground truth are excluded from the averages.
    """
    det_by_class = _group(detections, lambda r: r.class_id)
    gt_by_class = _group(gts, lambda g: g[1])
    classes = sorted(gt_by_class)
    per_class = {}
    ap50 = {}
    ap75 = {}
    for cls in classes:
        gts_by_image = _group([(g[0], np.asarray(g[2], dtype=np.float64)) for g in gt_by_class[cls]],
                              lambda g: g[0])
        n_gt = len(gt_by_class[cls])
        dets = det_by_class.get(cls, [])
        aps = []
        for thr in thresholds:
            tp, fp, _ = _match_class_threshold(dets, gts_by_image, thr)
            aps.append(_ap_from_flags(tp, fp, n_gt))
            if abs(thr - 0.50) < 1e-9:
                ap50[cls] = aps[-1]
            if abs(thr - 0.75) < 1e-9:
                ap75[cls] = aps[-1]
        per_class[cls] = float(np.mean(aps))

    def mean_or_zero(values):
        vals = [v for v in values if not np.isnan(v)]
        return float(np.mean(vals)) if vals else 0.0

    report = EvalReport(
        ap=mean_or_zero(per_class.values()),
        ap50=mean_or_zero(ap50.values()),
        ap75=mean_or_zero(ap75.values()),
        per_class=per_class,
        num_detections=len(detections),
        num_gts=len(gts),
    )
    report.area_aps = _area_aps(detections, gts, thresholds)
    return report


def _area_aps(detections, gts, thresholds):
    """AP per COCO area band; reported only when >= 2 bands hold ground truth."""
    def band_of(box):
        area = (box[2] - box[0]) * (box[3] - box[1])
        for name, lo, hi in AREA_BANDS:
            if lo <= area < hi:
                return name
        return "large"

    bands_present = {band_of(np.asarray(g[2], dtype=np.float64)) for g in gts}
    if len(bands_present) < 2:
        return {}
    out = {}
    for name, lo, hi in AREA_BANDS:
        if name not in bands_present:
            continue
        cell_aps = []
        det_by_class = _group(detections, lambda r: r.class_id)
        gt_by_class = _group(gts, lambda g: g[1])
        for cls, class_gts in sorted(gt_by_class.items()):
            rows = [(g[0], np.asarray(g[2], dtype=np.float64)) for g in class_gts]
            gts_by_image = _group(rows, lambda g: g[0])
            band_ok = {img: np.array([band_of(b) == name for _, b in g])
                       for img, g in gts_by_image.items()}
            n_gt = int(sum(ok.sum() for ok in band_ok.values()))
            if n_gt == 0:
                continue
            for thr in thresholds:
                tp, fp, _ = _match_class_threshold(det_by_class.get(cls, []), gts_by_image,
                                                   thr, gt_band_ok=band_ok)
                cell_aps.append(_ap_from_flags(tp, fp, n_gt))
        out[name] = float(np.mean([a for a in cell_aps if not np.isnan(a)])) if cell_aps else 0.0
    return out


def detection_recall(detections: list, gts: list, iou_threshold: float = 0.5,
                     score_threshold: float = 0.5) -> float:
    """Fraction of ground truths matched by a confident same-class detection."""
    if not gts:
        return float("nan")
    strong = [d for d in detections if d.confidence >= score_threshold]
    matched = 0
    for cls, class_gts in _group(gts, lambda g: g[1]).items():
        rows = [(g[0], np.asarray(g[2], dtype=np.float64)) for g in class_gts]
        gts_by_image = _group(rows, lambda g: g[0])
        dets = [d for d in strong if d.class_id == cls]
        tp, _, _ = _match_class_threshold(dets, gts_by_image, iou_threshold)
        matched += int(tp.sum())
    return matched / len(gts)


def report_to_text(report: EvalReport) -> str:
    lines = [
        f"ap={report.ap:.6f}",
        f"ap50={report.ap50:.6f}",
        f"ap75={report.ap75:.6f}",
    ]
    for name in ("small", "medium", "large"):
        if name in report.area_aps:
            lines.append(f"ap_{name}={report.area_aps[name]:.6f}")
    for cls in sorted(report.per_class):
        lines.append(f"ap_class_{cls}={report.per_class[cls]:.6f}")
    lines.append(f"detections={report.num_detections}")
    lines.append(f"gts={report.num_gts}")
    return "\n".join(lines)


def report_to_csv(report: EvalReport) -> str:
    rows = ["metric,value"]
    for line in report_to_text(report).splitlines():
        key, value = line.split("=", 1)
        rows.append(f"{key},{value}")
    return "\n".join(rows) + "\n"


def export_query_slots(outputs: list, threshold: float = 0.5) -> str:
    """CSV of per-slot predictions over a dataset.

    ``outputs`` rows are (slot_probs [N,K+1], boxes [N,4] normalized cxcywh).
    One CSV row per prediction whose best real-class confidence clears the
    threshold; coordinates stay normalized so slots are comparable across
    images.
    """
    lines = ["slot,cx,cy,w,h,class,conf"]
    for probs, boxes in outputs:
        conf = probs[:, :-1].max(axis=1)
        cls = probs[:, :-1].argmax(axis=1)
        for slot in range(probs.shape[0]):
            if conf[slot] >= threshold:
                cx, cy, w, h = boxes[slot]
                lines.append(f"{slot},{cx:.6f},{cy:.6f},{w:.6f},{h:.6f},"
                             f"{int(cls[slot])},{conf[slot]:.6f}")
    return "\n".join(lines) + "\n"
